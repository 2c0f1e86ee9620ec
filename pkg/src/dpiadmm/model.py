"""Multiclass logistic regression pieces of the distributed ERM.

A parameter matrix is a plain ``(J, K)`` float array. Agent data holds a
feature matrix ``(I_p, J)`` and one-hot labels ``(I_p, K)``. Every loss and
gradient is normalized by the *global* sample count ``I`` so that summing the
local losses over agents gives the centralized objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-300


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent."""


@dataclass(frozen=True)
class AgentData:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if x.ndim != 2 or y.ndim != 2:
            raise ShapeError(f"features and labels must be 2-D, got {x.shape} and {y.shape}")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"row count mismatch: {x.shape[0]} features vs {y.shape[0]} labels")
        if y.size and (not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1)):
            raise ValueError("label rows must be one-hot")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @classmethod
    def from_class_indices(cls, features, classes, num_classes: int) -> "AgentData":
        return cls(features, one_hot(classes, num_classes))

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def without_row(self, i: int) -> "AgentData":
        keep = np.arange(self.num_samples) != i
        return AgentData(self.features[keep], self.labels[keep])


@dataclass(frozen=True)
class ProblemDims:
    """Sizes of the federated problem. ``I`` is the global sample count."""

    P: int
    J: int
    K: int
    I: int
    beta: float = 0.0

    def __post_init__(self):
        if min(self.P, self.J, self.K, self.I) < 0:
            raise ValueError("problem counts must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    @classmethod
    def from_agents(cls, agents: list[AgentData], beta: float = 0.0) -> "ProblemDims":
        if not agents:
            raise ValueError("need at least one agent")
        J, K = agents[0].num_features, agents[0].num_classes
        for a in agents:
            if (a.num_features, a.num_classes) != (J, K):
                raise ShapeError("all agents must share feature and class counts")
        return cls(P=len(agents), J=J, K=K, I=sum(a.num_samples for a in agents), beta=beta)


def one_hot(classes, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.ndim != 1:
        raise ShapeError("class indices must be a 1-D vector")
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes})")
    out = np.zeros((classes.size, num_classes))
    out[np.arange(classes.size), classes.astype(int)] = 1.0
    return out


def _check_param(w, data: AgentData):
    w = np.asarray(w, dtype=float)
    if w.shape != (data.num_features, data.num_classes):
        raise ShapeError(f"parameter shape {w.shape} does not match data "
                         f"({data.num_features}, {data.num_classes})")
    return w


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_probs(w, x) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if w.ndim != 2 or x.shape != (w.shape[0],):
        raise ShapeError(f"feature vector of shape {x.shape} incompatible with w {w.shape}")
    return softmax_rows(x @ w)


def residuals(z, data: AgentData) -> np.ndarray:
    """Per-sample ``h_k(z; x_i) - y_ik``, shape ``(I_p, K)``."""
    z = _check_param(z, data)
    return softmax_rows(data.features @ z) - data.labels


def local_loss(z, data: AgentData, dims: ProblemDims) -> float:
    z = _check_param(z, data)
    reg = dims.beta / dims.P * float(np.sum(z * z)) if dims.P else 0.0
    if data.num_samples == 0:
        return reg
    logits = data.features @ z
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.maximum(np.exp(logits - m).sum(axis=1), LOG_FLOOR))
    # -sum_k y_k log h_k = lse - <y, logits> for one-hot y
    nll = lse - np.sum(data.labels * logits, axis=1)
    return float(nll.sum()) / dims.I + reg


def local_gradient(z, data: AgentData, dims: ProblemDims) -> np.ndarray:
    z = _check_param(z, data)
    grad = 2.0 * dims.beta / dims.P * z
    if data.num_samples:
        grad = grad + data.features.T @ residuals(z, data) / dims.I
    return grad


def predict(w, x) -> np.ndarray | int:
    """Class index by argmax of the logits; ties go to the lowest index.

    Accepts a single feature vector or a matrix of rows.
    """
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"features of width {x.shape[-1]} incompatible with w {w.shape}")
    out = np.argmax(x @ w, axis=-1)
    return int(out) if x.ndim == 1 else out


def testing_error(w, test: AgentData) -> float:
    if test.num_samples == 0:
        raise ValueError("testing error needs a nonempty test set")
    _check_param(w, test)
    return float(np.mean(predict(w, test.features) != test.classes))


def global_objective(z_list, agents: list[AgentData], dims: ProblemDims) -> float:
    if len(z_list) != len(agents):
        raise ValueError(f"{len(z_list)} parameter matrices for {len(agents)} agents")
    return sum(local_loss(z, a, dims) for z, a in zip(z_list, agents))
