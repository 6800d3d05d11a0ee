"""Loss models, exact gradients and a finite-difference gradient oracle.

Two loss kinds are supported:

``quadratic``
    f(theta, (x, y)) = 0.5 * ||theta - y * x||^2. The Hessian is the identity
    for every sample, so the symmetric two-point difference is exactly
    2 * gamma * phi . grad f and zeroth-order estimates carry no bias.

``logistic``
    Logistic loss on the margin y * x . theta plus the smooth nonconvex
    penalty lam * sum_j theta_j^2 / (1 + theta_j^2). Labels are +/-1.

Parameter vectors are plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

KINDS = ("quadratic", "logistic")

# max over t of |d/dt t^2/(1+t^2)| = 2|t|/(1+t^2)^2, attained at t = 1/sqrt(3)
_PENALTY_GRAD_MAX = 3.0 * np.sqrt(3.0) / 8.0
# max over t of |d^2/dt^2 t^2/(1+t^2)|, attained at t = 0
_PENALTY_CURV_MAX = 2.0


class DimensionError(ValueError):
    """Parameter and feature dimensions disagree."""


class DivergenceError(FloatingPointError):
    """A model update produced a non-finite or exploding parameter vector."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class LossModel:
    kind: str = "logistic"
    lam: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("regularizer weight must be non-negative")

    # Batched forms. X is (n, d), y is (n,), theta is (d,) or (m, d) for a
    # stack of m parameter vectors evaluated row-wise against X.

    def losses(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample losses."""
        theta, X, y = _check(theta, X, y)
        if self.kind == "quadratic":
            r = theta - y[:, None] * X
            return 0.5 * np.einsum("ij,ij->i", r, r)
        margin = y * np.einsum("ij,ij->i", np.broadcast_to(theta, X.shape), X)
        out = np.logaddexp(0.0, -margin)
        if self.lam:
            t2 = np.square(theta)
            pen = self.lam * np.sum(t2 / (1.0 + t2), axis=-1)
            out = out + pen
        return out

    def grads(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample gradients, shape (n, d)."""
        theta, X, y = _check(theta, X, y)
        if self.kind == "quadratic":
            return np.broadcast_to(theta, X.shape) - y[:, None] * X
        margin = y * np.einsum("ij,ij->i", np.broadcast_to(theta, X.shape), X)
        # d/dm log(1 + e^-m) = -sigmoid(-m)
        w = -y * _sigmoid(-margin)
        g = w[:, None] * X
        if self.lam:
            g = g + self.lam * 2.0 * theta / np.square(1.0 + np.square(theta))
        return g

    def mean_grad(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.grads(theta, X, y).mean(axis=0)

    def mean_loss(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(self.losses(theta, X, y).mean())

    # Constants used by the bound calculators.

    def hessian_bound(self, X: np.ndarray) -> float:
        """Upper bound b on the spectral norm of any per-sample Hessian."""
        if self.kind == "quadratic":
            return 1.0
        max_sq = float(np.max(np.einsum("ij,ij->i", X, X)))
        return 0.25 * max_sq + _PENALTY_CURV_MAX * self.lam

    def lipschitz_bound(self, X: np.ndarray, y: np.ndarray, theta: np.ndarray | None = None) -> float:
        """Bound L such that |f(t + u) - f(t - u)| <= 2 L ||u|| for every sample.

        Global for the logistic kind. The quadratic kind is not globally
        Lipschitz; its symmetric difference is exactly 2 u . (theta - y x), so
        the bound is local to ``theta`` (required) and exact for symmetric
        differences centred there.
        """
        if self.kind == "quadratic":
            if theta is None:
                raise ValueError("quadratic Lipschitz bound is local; pass theta")
            return float(np.max(np.linalg.norm(self.grads(theta, X, y), axis=1)))
        return float(np.max(np.linalg.norm(X, axis=1))) + _PENALTY_GRAD_MAX * self.lam


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _check(theta, X, y):
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if theta.shape[-1] != X.shape[1]:
        raise DimensionError(f"parameter dimension {theta.shape[-1]} != feature dimension {X.shape[1]}")
    if y.shape[0] != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if theta.ndim == 2 and theta.shape[0] != X.shape[0]:
        raise DimensionError("stacked parameters must match the number of samples")
    return theta, X, y


def eval_loss(model: LossModel, theta: np.ndarray, sample: Sample) -> float:
    return float(model.losses(theta, sample.features[None, :], [sample.label])[0])


def eval_grad(model: LossModel, theta: np.ndarray, sample: Sample) -> np.ndarray:
    return np.array(model.grads(theta, sample.features[None, :], [sample.label])[0])


def finite_diff_grad(model: LossModel, theta: np.ndarray, sample: Sample, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (eval_loss(model, theta + e, sample) - eval_loss(model, theta - e, sample)) / (2.0 * h)
    return out


def global_grad(model: LossModel, theta: np.ndarray, shards: Sequence) -> np.ndarray:
    """Exact gradient of F = sum_i F_i, each F_i the mean loss over shard i."""
    if not shards:
        raise ValueError("no device datasets")
    total = np.zeros(np.shape(theta)[-1])
    for shard in shards:
        if len(shard) == 0:
            raise ValueError("empty device dataset")
        total += model.mean_grad(theta, shard.X, shard.y)
    return total


def global_loss(model: LossModel, theta: np.ndarray, shards: Sequence) -> float:
    if not shards:
        raise ValueError("no device datasets")
    return float(sum(model.mean_loss(theta, s.X, s.y) for s in shards))


def global_grad_norm_sq(model: LossModel, theta: np.ndarray, shards: Sequence) -> float:
    g = global_grad(model, theta, shards)
    return float(g @ g)


class GlobalObjective:
    """F = sum_i F_i with all shards stacked for single-call evaluation."""

    def __init__(self, model: LossModel, shards: Sequence):
        if not shards or any(len(s) == 0 for s in shards):
            raise ValueError("empty device dataset")
        self.model = model
        self.X = np.vstack([s.X for s in shards])
        self.y = np.concatenate([s.y for s in shards])
        self.w = np.concatenate([np.full(len(s), 1.0 / len(s)) for s in shards])

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.w @ self.model.grads(theta, self.X, self.y)

    def loss(self, theta: np.ndarray) -> float:
        return float(self.w @ self.model.losses(theta, self.X, self.y))

    def grad_norm_sq(self, theta: np.ndarray) -> float:
        g = self.grad(theta)
        return float(g @ g)


def check_finite(theta: np.ndarray, limit: float = 1e6) -> None:
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameter entry")
    if float(np.linalg.norm(theta)) > limit:
        raise DivergenceError(f"parameter norm exceeded {limit:g}")
