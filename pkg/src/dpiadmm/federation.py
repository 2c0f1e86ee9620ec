"""Round-synchronous simulation of the server/agent ADMM loop.

One round is: server w-update, per-agent z-update (gradient, sensitivity,
noise, subproblem), server dual update. The loop is vectorized over a leading
replica axis so that several seeds of the same configuration share the
expensive matrix products. Each replica draws its noise from streams keyed by
``(seed, agent, iteration)``, so a replica's trajectory does not depend on
which other replicas run beside it beyond floating-point summation order.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import admm
from .admm import FeasibleBox, Schedules
from .mechanisms import (
    PARTITION_STREAM,
    Mechanism,
    PrivacyConfig,
    RngStream,
    gaussian_sigma,
)
from .model import AgentData, ProblemDims, ShapeError, softmax_rows

log = logging.getLogger(__name__)


class Algorithm(str, enum.Enum):
    OBJP = "ObjP"
    OBJT = "ObjT"
    OUTP = "OutP"
    NONPRIVATE_PROX = "NonPrivate-Prox"
    NONPRIVATE_TRUST = "NonPrivate-Trust"

    @property
    def uses_trust_region(self) -> bool:
        return self in (Algorithm.OBJT, Algorithm.NONPRIVATE_TRUST)

    @property
    def allowed_mechanisms(self) -> tuple[Mechanism, ...]:
        if self in (Algorithm.OBJP, Algorithm.OBJT):
            return (Mechanism.LAPLACE_OBJECTIVE, Mechanism.NONE)
        if self is Algorithm.OUTP:
            return (Mechanism.GAUSSIAN_OUTPUT, Mechanism.NONE)
        return (Mechanism.NONE,)

    @property
    def default_mechanism(self) -> Mechanism:
        return self.allowed_mechanisms[0]


class NumericalError(RuntimeError):
    """A non-finite value appeared in the iterates."""


@dataclass(frozen=True)
class RunConfig:
    algorithm: Algorithm = Algorithm.OBJT
    T: int = 0
    privacy: PrivacyConfig = PrivacyConfig()
    schedules: Schedules = Schedules()
    box: FeasibleBox = FeasibleBox()
    beta: float = 1e-6
    P: int = 10
    seed: int = 0
    log_every: int = 100
    bias_column: bool = False
    log_objective: bool = True
    dtype: str = "float64"
    train_images: str | None = None
    train_labels: str | None = None
    agents_dir: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    num_classes: int | None = None
    partition_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.privacy.mechanism not in self.algorithm.allowed_mechanisms:
            raise ValueError(f"{self.algorithm.value} cannot use mechanism {self.privacy.mechanism.value}")


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    test_error: float
    avg_noise_mag: float
    consensus_violation: float
    objective: float
    rho_t: float
    prox_t: float


@dataclass(frozen=True)
class AgentState:
    id: int
    data: AgentData
    z: np.ndarray
    lam: np.ndarray


@dataclass
class RunResult:
    seed: int
    metrics: list[MetricsRecord]
    w: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    # ergodic averages: w over w^2..w^{T+1}, z over z^1..z^T
    w_avg: np.ndarray
    z_avg: np.ndarray
    mean_noise_magnitude: float
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def agent_states(self, agents: list[AgentData]) -> list[AgentState]:
        return [AgentState(p, a, self.z[p], self.lam[p]) for p, a in enumerate(agents)]


def partition_homogeneous(features, labels, P: int, rng) -> list[AgentData]:
    """Shuffle rows and deal them into ``P`` contiguous blocks.

    Blocks have ``I // P`` rows; the first ``I % P`` agents get one extra.
    ``labels`` is a one-hot matrix. ``rng`` is a seed, an ``RngStream`` or a
    numpy Generator.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    I = features.shape[0]
    if P < 1:
        raise ValueError("P must be >= 1")
    if P > I:
        raise ValueError(f"cannot split {I} rows among {P} agents")
    if isinstance(rng, (int, np.integer)):
        rng = RngStream(int(rng), purpose=PARTITION_STREAM)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    order = gen.permutation(I)
    sizes = [I // P + (1 if p < I % P else 0) for p in range(P)]
    bounds = np.cumsum([0] + sizes)
    return [AgentData(features[order[a:b]], labels[order[a:b]]) for a, b in zip(bounds[:-1], bounds[1:])]


def consensus_violation(w, z_list) -> float:
    z = np.asarray(z_list, dtype=float)
    return float(np.abs(np.asarray(w)[..., None, :, :] - z).sum())


class _AgentBlock:
    """Per-agent constants for the batched gradient."""

    def __init__(self, data: AgentData, dtype):
        self.n = data.num_samples
        self.x = np.ascontiguousarray(data.features, dtype=dtype)
        self.xt = np.ascontiguousarray(self.x.T)
        self.y = data.labels.astype(dtype)
        self.x_l1 = np.abs(data.features).sum(axis=1)
        self.x_l2 = np.sqrt((data.features**2).sum(axis=1))

    def grad_and_sens(self, z, dims: ProblemDims, need_l2: bool):
        """Gradient ``(S, J, K)`` and per-replica L1 / L2 sensitivities at ``z``."""
        S, J, K = z.shape
        grad = (2.0 * dims.beta / dims.P) * z
        if self.n == 0:
            zeros = np.zeros(S)
            return grad, zeros, zeros
        zc = z.transpose(1, 0, 2).reshape(J, S * K).astype(self.x.dtype, copy=False)
        h = softmax_rows((self.x @ zc).reshape(self.n, S, K))
        h -= self.y[:, None, :]
        g = (self.xt @ h.reshape(self.n, S * K)).reshape(J, S, K).transpose(1, 0, 2)
        grad = grad + g.astype(float) / dims.I
        r_l1 = np.abs(h).sum(axis=2, dtype=float)
        l1 = (self.x_l1[:, None] * r_l1).max(axis=0) / dims.I
        l2 = None
        if need_l2:
            r_l2 = np.sqrt((h.astype(float) ** 2).sum(axis=2))
            l2 = (self.x_l2[:, None] * r_l2).max(axis=0) / dims.I
        return grad, l1, l2

    def loss(self, z, dims: ProblemDims) -> np.ndarray:
        S, J, K = z.shape
        reg = dims.beta / dims.P * (z**2).sum(axis=(1, 2))
        if self.n == 0:
            return reg
        zc = z.transpose(1, 0, 2).reshape(J, S * K).astype(self.x.dtype, copy=False)
        logits = (self.x @ zc).reshape(self.n, S, K).astype(float)
        m = logits.max(axis=2, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=2))
        nll = lse - np.einsum("isk,ik->is", logits, self.y.astype(float))
        return nll.sum(axis=0) / dims.I + reg


def _test_errors(w, test: AgentData) -> np.ndarray:
    pred = np.argmax(np.einsum("ij,sjk->sik", test.features, w), axis=2)
    return np.mean(pred != test.classes[None, :], axis=1)


def run_replicas(config: RunConfig, agents: list[AgentData], test: AgentData | None,
                 seeds: list[int] | None = None) -> list[RunResult]:
    """Run the configured algorithm once per seed, sharing the linear algebra.

    Returns one ``RunResult`` per seed, in order.
    """
    seeds = [config.seed] if seeds is None else [int(s) for s in seeds]
    S = len(seeds)
    if S == 0:
        raise ValueError("need at least one seed")
    dims = ProblemDims.from_agents(agents, beta=config.beta)
    if test is not None and test.num_samples and (test.num_features, test.num_classes) != (dims.J, dims.K):
        raise ShapeError("test set dimensions differ from training data")
    P, J, K = dims.P, dims.J, dims.K
    algo = config.algorithm
    priv = config.privacy
    sched = config.schedules
    box = config.box
    a = sched.prox_scale
    mech = priv.mechanism
    dtype = np.dtype(config.dtype)
    blocks = [_AgentBlock(ag, dtype) for ag in agents]

    z = np.zeros((S, P, J, K))
    lam = np.zeros((S, P, J, K))
    w = np.zeros((S, J, K))
    w_sum = np.zeros((S, J, K))
    z_sum = np.zeros((S, P, J, K))
    noise_sum = np.zeros(S)
    records: list[list[MetricsRecord]] = [[] for _ in range(S)]
    started = time.perf_counter()

    for t in range(1, config.T + 1):
        rho = admm.rho_schedule(t, priv.eps_bar, sched)
        prox = admm.delta_schedule(t, a) if algo.uses_trust_region else admm.eta_schedule(t, a)
        w = admm.w_update(z, lam, rho)
        z_sum += z
        z_new = np.empty_like(z)
        noise_abs = np.zeros(S)
        for p, blk in enumerate(blocks):
            grad, l1, l2 = blk.grad_and_sens(z[:, p], dims, need_l2=mech is Mechanism.GAUSSIAN_OUTPUT)
            noise = np.zeros((S, J, K))
            if mech is Mechanism.LAPLACE_OBJECTIVE:
                for s, seed in enumerate(seeds):
                    scale = l1[s] / priv.eps_bar
                    if scale > 0:
                        gen = RngStream(seed, p, t).generator()
                        noise[s] = gen.laplace(0.0, scale, size=(J, K))
            elif mech is Mechanism.GAUSSIAN_OUTPUT:
                for s, seed in enumerate(seeds):
                    sigma = gaussian_sigma(t, l2[s], priv)
                    if sigma > 0:
                        gen = RngStream(seed, p, t).generator()
                        noise[s] = gen.normal(0.0, sigma, size=(J, K))
            noise_abs += np.abs(noise).sum(axis=(1, 2))

            zp = z[:, p]
            if algo is Algorithm.OUTP:
                clean = admm.z_update_prox(zp, w, lam[:, p], grad, 0.0, rho, prox, box)
                z_new[:, p] = box.project(clean + noise)
            elif algo.uses_trust_region:
                z_new[:, p] = admm.z_update_trust(zp, w, lam[:, p], grad, noise, rho, prox, box)
            else:
                z_new[:, p] = admm.z_update_prox(zp, w, lam[:, p], grad, noise, rho, prox, box)
            if not np.all(np.isfinite(z_new[:, p])):
                raise NumericalError(f"non-finite local model at iteration {t}, agent {p}")
        z = z_new
        lam = admm.dual_update(lam, w[:, None], z, rho)
        if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(w)):
            raise NumericalError(f"non-finite server state at iteration {t}")
        w_sum += w
        noise_mag = noise_abs / (P * J * K)
        noise_sum += noise_mag

        if t % config.log_every == 0 or t == config.T:
            errs = _test_errors(w, test) if test is not None and test.num_samples else np.full(S, math.nan)
            cv = np.abs(w[:, None] - z).sum(axis=(1, 2, 3))
            if config.log_objective:
                obj = sum(blk.loss(z[:, p], dims) for p, blk in enumerate(blocks))
            else:
                obj = np.full(S, math.nan)
            for s in range(S):
                records[s].append(MetricsRecord(t, float(errs[s]), float(noise_mag[s]), float(cv[s]),
                                                float(obj[s]), rho, prox))
            log.debug("t=%d err=%s cv=%s", t, errs, cv)

    elapsed = time.perf_counter() - started
    T = max(config.T, 1)
    return [
        RunResult(
            seed=seed,
            metrics=records[s],
            w=w[s].copy(),
            z=z[s].copy(),
            lam=lam[s].copy(),
            w_avg=w_sum[s] / T,
            z_avg=z_sum[s] / T,
            mean_noise_magnitude=float(noise_sum[s] / T),
            wall_time=elapsed,
        )
        for s, seed in enumerate(seeds)
    ]


def run_experiment(config: RunConfig, agents: list[AgentData], test: AgentData | None) -> RunResult:
    return run_replicas(config, agents, test, [config.seed])[0]
