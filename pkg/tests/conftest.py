import os
from pathlib import Path

import numpy as np
import pytest

from dpiadmm.model import AgentData, ProblemDims, one_hot

MNIST_DIR = Path(os.environ.get("DPIADMM_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train.images": "train-images-idx3-ubyte",
    "train.labels": "train-labels-idx1-ubyte",
    "test.images": "t10k-images-idx3-ubyte",
    "test.labels": "t10k-labels-idx1-ubyte",
}


# acceptance outcomes, filled by test_acceptance.py and printed at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[name] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=_criterion_order):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def _criterion_order(name: str):
    head = name.split()[1] if name.startswith("criterion ") else name
    return (int(head) if head.isdigit() else 99, name)


def mnist_available() -> bool:
    return all((MNIST_DIR / f).exists() for f in MNIST_FILES.values())


def mnist_paths() -> dict[str, str]:
    return {k: str(MNIST_DIR / f) for k, f in MNIST_FILES.items()}


def random_agent(rng, rows, J, K, scale=1.0) -> AgentData:
    x = scale * rng.normal(size=(rows, J))
    return AgentData(x, one_hot(rng.integers(0, K, size=rows), K))


def synthetic_federation(seed, P, J, K, rows_per_agent, shift=0.0):
    """Gaussian-blob classes; ``shift`` moves each agent's blobs to make agents heterogeneous."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(K, J))
    agents = []
    for p in range(P):
        n = rows_per_agent[p] if np.ndim(rows_per_agent) else rows_per_agent
        c = rng.integers(0, K, size=n)
        x = centers[c] + shift * p + rng.normal(size=(n, J))
        agents.append(AgentData(x, one_hot(c, K)))
    return agents


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_problem(rng):
    data = random_agent(rng, 6, 3, 3)
    dims = ProblemDims(P=2, J=3, K=3, I=10, beta=1e-2)
    z = rng.normal(size=(3, 3))
    return z, data, dims
