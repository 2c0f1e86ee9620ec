"""Noise calibration and sampling.

Neighboring datasets differ by the removal of one sample while the global
normalizer ``I`` stays fixed. Under that convention the L1 change of the local
gradient when sample ``i`` is dropped is ``|x_i|_1 * |h(z; x_i) - y_i|_1 / I``,
so the sensitivity is a max over per-sample products and costs one forward
pass.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import AgentData, ProblemDims, residuals


class Mechanism(str, enum.Enum):
    LAPLACE_OBJECTIVE = "laplace_objective"
    GAUSSIAN_OUTPUT = "gaussian_output"
    NONE = "none"


@dataclass(frozen=True)
class PrivacyConfig:
    eps_bar: float = 1.0
    mechanism: Mechanism = Mechanism.LAPLACE_OBJECTIVE
    delta_bar: float = 1e-6
    sigma_scale: float = 1.0
    # exponent q in the baseline's t**(-q) variance decay
    sigma_decay: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if not self.eps_bar > 0:
            raise ValueError(f"eps_bar must be > 0, got {self.eps_bar}")
        if self.mechanism is Mechanism.GAUSSIAN_OUTPUT and not 0 < self.delta_bar < 1:
            raise ValueError(f"delta_bar must lie in (0, 1), got {self.delta_bar}")
        if not self.sigma_scale > 0:
            raise ValueError(f"sigma_scale must be > 0, got {self.sigma_scale}")
        if self.sigma_decay < 0:
            raise ValueError("sigma_decay must be >= 0")


# spawn-key tags keeping noise streams apart from other consumers of the seed
NOISE_STREAM = 0
PARTITION_STREAM = 1
AUDIT_STREAM = 2


@dataclass(frozen=True)
class RngStream:
    """Counter-style stream keyed by ``(seed, agent, iteration)``.

    Each key maps to its own Philox generator, so draws do not depend on the
    order in which agents are processed.
    """

    seed: int
    agent: int = 0
    iteration: int = 0
    purpose: int = NOISE_STREAM

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.purpose, self.agent, self.iteration))
        return np.random.Generator(np.random.Philox(ss))


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def _sample_terms(z, data: AgentData, dims: ProblemDims, ord: int) -> np.ndarray:
    r = residuals(z, data)
    x_norm = np.linalg.norm(data.features, ord=ord, axis=1)
    r_norm = np.linalg.norm(r, ord=ord, axis=1)
    return x_norm * r_norm / dims.I


def l1_sensitivity(z, data: AgentData, dims: ProblemDims) -> float:
    if data.num_samples == 0:
        warnings.warn("sensitivity of an empty dataset is taken as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(_sample_terms(z, data, dims, 1).max())


def l2_sensitivity(z, data: AgentData, dims: ProblemDims) -> float:
    if data.num_samples == 0:
        warnings.warn("sensitivity of an empty dataset is taken as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(_sample_terms(z, data, dims, 2).max())


def sample_laplace_noise(shape, sensitivity: float, eps_bar: float, rng) -> np.ndarray:
    """I.i.d. Laplace(0, sensitivity / eps_bar) entries.

    The joint density is proportional to ``exp(-eps_bar |xi|_1 / sensitivity)``,
    which factorizes per coordinate.
    """
    if sensitivity < 0:
        raise ValueError(f"sensitivity must be >= 0, got {sensitivity}")
    if not eps_bar > 0:
        raise ValueError(f"eps_bar must be > 0, got {eps_bar}")
    scale = sensitivity / eps_bar
    gen = _generator(rng)
    if scale == 0:
        return np.zeros(shape)
    return gen.laplace(0.0, scale, size=shape)


def sample_gaussian_noise(shape, sigma: float, rng) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gen = _generator(rng)
    if sigma == 0:
        return np.zeros(shape)
    return gen.normal(0.0, sigma, size=shape)


def gaussian_sigma(t: int, l2_sens: float, privacy: PrivacyConfig) -> float:
    """Decreasing noise level of the output-perturbation baseline.

    ``sigma_scale * l2_sens * sqrt(2 ln(1.25/delta)) / eps * t**(-sigma_decay)``.
    This approximates, and does not reproduce, the schedule of the published
    baseline.
    """
    base = l2_sens * math.sqrt(2.0 * math.log(1.25 / privacy.delta_bar)) / privacy.eps_bar
    return privacy.sigma_scale * base * t ** (-privacy.sigma_decay)


def avg_noise_magnitude(noises) -> float:
    if len(noises) == 0:
        raise ValueError("no noise matrices given")
    stacked = np.stack([np.asarray(n, dtype=float) for n in noises])
    return float(np.mean(np.abs(stacked)))


def compose_epsilon(eps_bar: float, T: int) -> float:
    """Total budget of ``T`` eps-DP iterations under basic sequential composition."""
    if T < 0:
        raise ValueError("T must be >= 0")
    return 0.0 if T == 0 else T * eps_bar
