"""Parameter schedules and the closed-form ADMM updates.

Every z-subproblem has a Hessian that is a positive multiple of the identity
and a box (or box-intersected infinity-norm ball) feasible set, so the exact
constrained minimizer is the unconstrained minimizer clamped coordinate-wise.
All updates broadcast over leading axes, which lets the simulator advance many
agents and replicas at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mechanisms import sample_gaussian_noise


@dataclass(frozen=True)
class RhoSchedule:
    c1: float = 2.0
    c2: float = 5.0
    Tc: int = 10_000
    cap: float = 1e9

    def __post_init__(self):
        if not self.c1 > 0 or self.c2 < 0 or self.Tc < 1:
            raise ValueError(f"invalid rho schedule {self}")


@dataclass(frozen=True)
class Schedules:
    rho: RhoSchedule = RhoSchedule()
    prox_scale: float = 1.0

    def __post_init__(self):
        if not self.prox_scale > 0:
            raise ValueError("prox_scale must be > 0")


@dataclass(frozen=True)
class FeasibleBox:
    """``[-bound, bound]`` per coordinate; ``bound=None`` drops the constraint.

    Without a bound the feasible set is not compact, so the convergence
    guarantees that rely on a bounded domain no longer apply.
    """

    bound: float | None = 100.0

    def __post_init__(self):
        if self.bound is not None and not self.bound > 0:
            raise ValueError("box bound must be > 0")

    @property
    def lo(self) -> float:
        return -math.inf if self.bound is None else -self.bound

    @property
    def hi(self) -> float:
        return math.inf if self.bound is None else self.bound

    def project(self, v):
        if self.bound is None:
            return np.asarray(v, dtype=float)
        return np.clip(v, -self.bound, self.bound)

    def contains(self, v) -> bool:
        return self.bound is None or bool(np.all(np.abs(v) <= self.bound))


def rho_schedule(t: int, eps_bar: float, sched: Schedules | RhoSchedule) -> float:
    r = sched.rho if isinstance(sched, Schedules) else sched
    if t < 1:
        raise ValueError("iterations are counted from 1")
    growth = r.c1 * 1.2 ** (t // r.Tc) if t // r.Tc < 3000 else math.inf
    return min(r.cap, growth + r.c2 / eps_bar)


def eta_schedule(t: int, a: float = 1.0) -> float:
    return a / math.sqrt(t)


def delta_schedule(t: int, a: float = 1.0) -> float:
    return a / t**2


def w_update(z_list, lambda_list, rho_t: float) -> np.ndarray:
    """Server step: ``mean_p(z_p - lambda_p / rho)``, the minimizer of the w-subproblem."""
    if not rho_t > 0:
        raise ValueError(f"rho must be > 0, got {rho_t}")
    z = np.asarray(z_list, dtype=float)
    lam = np.asarray(lambda_list, dtype=float)
    if z.shape != lam.shape or z.ndim < 3 or z.shape[-3] < 1:
        raise ValueError("need matching stacks of P >= 1 primal and dual matrices")
    return np.mean(z - lam / rho_t, axis=-3)


def project_box(v, lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("empty box: lo > hi")
    return np.clip(v, lo, hi)


def z_update_prox(z_t, w_next, lambda_t, grad, xi, rho_t, eta_t, box: FeasibleBox) -> np.ndarray:
    """Minimize the linearized, noise-perturbed augmented Lagrangian plus the
    proximal term ``|z - z_t|^2 / (2 eta)`` over the box."""
    if not rho_t > 0 or not eta_t > 0:
        raise ValueError(f"rho and eta must be > 0, got {rho_t}, {eta_t}")
    inv_eta = 1.0 / eta_t
    z_star = (rho_t * w_next + lambda_t - xi - grad + inv_eta * z_t) / (rho_t + inv_eta)
    return box.project(z_star)


def z_update_trust(z_t, w_next, lambda_t, grad, xi, rho_t, delta_t, box: FeasibleBox) -> np.ndarray:
    """Same linearized objective without the proximal term, restricted to the
    infinity-norm ball of radius ``delta_t`` around ``z_t`` intersected with the box."""
    if not rho_t > 0 or delta_t < 0:
        raise ValueError(f"need rho > 0 and delta >= 0, got {rho_t}, {delta_t}")
    lo = np.maximum(z_t - delta_t, box.lo)
    hi = np.minimum(z_t + delta_t, box.hi)
    assert np.all(lo <= hi), "trust region misses the feasible box; z_t left the box"
    z_star = w_next + (lambda_t - xi - grad) / rho_t
    return np.clip(z_star, lo, hi)


def z_update_outp(z_t, w_next, lambda_t, grad, rho_t, eta_t, sigma_t, box: FeasibleBox, rng) -> np.ndarray:
    """Output-perturbation baseline: exact prox step, Gaussian noise, then projection."""
    z_clean = z_update_prox(z_t, w_next, lambda_t, grad, 0.0, rho_t, eta_t, box)
    return box.project(z_clean + sample_gaussian_noise(np.shape(z_clean), sigma_t, rng))


def dual_update(lambda_t, w_next, z_next, rho_t) -> np.ndarray:
    return lambda_t + rho_t * (w_next - z_next)
