"""Prototypical episode objective with hand-written reverse-mode gradients.

Distances come in three flavours:

* ``euclidean``: ``||x - y||^2``
* ``cholesky``:  ``(x - y)^T L L^T (x - y)`` with ``L`` unit lower-triangular
* ``rbf``:       ``2 - 2 exp(-gamma ||x - y||^2)``

all of which are ``K(x, x) + K(y, y) - 2 K(x, y)`` for the matching kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .embeddings import EmbeddingModel, activate
from .errors import NumericalError

VARIANTS = ("euclidean", "cholesky", "rbf")


@dataclass
class DistanceKernel:
    variant: str = "euclidean"
    gamma: float | None = None
    L: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == "rbf":
            if self.gamma is None or not self.gamma > 0:
                raise ValueError(f"rbf kernel needs gamma > 0, got {self.gamma}")
            self.gamma = float(self.gamma)
        if self.variant == "cholesky":
            if self.L is None:
                raise ValueError("cholesky kernel needs a matrix L")
            self.L = project_cholesky(np.asarray(self.L, dtype=np.float64))

    @classmethod
    def euclidean(cls) -> "DistanceKernel":
        return cls("euclidean")

    @classmethod
    def cholesky(cls, dim: int, L=None) -> "DistanceKernel":
        return cls("cholesky", L=np.eye(dim) if L is None else L)

    @classmethod
    def rbf(cls, gamma: float) -> "DistanceKernel":
        return cls("rbf", gamma=gamma)

    def copy(self) -> "DistanceKernel":
        return DistanceKernel(self.variant, self.gamma, None if self.L is None else self.L.copy())

    def to_dict(self) -> dict:
        doc = {"variant": self.variant}
        if self.variant == "rbf":
            doc["gamma"] = self.gamma
        if self.variant == "cholesky":
            doc["L"] = self.L
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DistanceKernel":
        variant = doc["variant"]
        if variant == "cholesky":
            L = np.asarray(doc["L"], dtype=np.float64)
            n = int(round(np.sqrt(L.size)))
            if n * n != L.size:
                raise ValueError("cholesky L is not square")
            return cls(variant, L=L.reshape(n, n))
        return cls(variant, gamma=doc.get("gamma"))


@dataclass(frozen=True)
class LossConfig:
    use_separation: bool = False
    lam: float = 0.1
    delta_v: float = 10.0

    def __post_init__(self):
        if self.lam < 0 or self.delta_v < 0:
            raise ValueError("lambda and delta_v must be nonnegative")


@dataclass
class Gradients:
    dA: np.ndarray
    dL: np.ndarray | None = None


def project_cholesky(L: np.ndarray) -> np.ndarray:
    """Zero the strict upper triangle and pin the diagonal to one."""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {L.shape}")
    out = np.tril(L, k=-1)
    np.fill_diagonal(out, 1.0)
    return out


# ---------------------------------------------------------------------------
# Kernels and distances
# ---------------------------------------------------------------------------


def kernel_value(kernel: DistanceKernel, x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if kernel.variant == "euclidean":
        return float(x @ y)
    if kernel.variant == "cholesky":
        return float((x @ kernel.L) @ (y @ kernel.L))
    diff = x - y
    return float(np.exp(-kernel.gamma * (diff @ diff)))


def squared_distance(kernel: DistanceKernel, x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = float(pairwise_sq_distances(kernel, x[np.newaxis], y[np.newaxis])[0, 0])
    if not np.isfinite(d):
        raise NumericalError("non-finite distance")
    return d


def _whiten(kernel: DistanceKernel, V: np.ndarray) -> np.ndarray:
    # rows v -> (L^T v)^T, so plain Euclidean on the result is the cholesky form
    return V @ kernel.L if kernel.variant == "cholesky" else V


def pairwise_sq_distances(kernel: DistanceKernel, Q: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Distances between every row of ``Q`` and every row of ``C``.

    The quadratic forms are evaluated on differences rather than through the
    expanded kernel sum, which is algebraically identical and never negative.
    """
    diff = _whiten(kernel, Q)[:, np.newaxis, :] - _whiten(kernel, C)[np.newaxis, :, :]
    r = np.einsum("qkd,qkd->qk", diff, diff)
    if kernel.variant == "rbf":
        return 2.0 - 2.0 * np.exp(-kernel.gamma * r)
    return r


# ---------------------------------------------------------------------------
# Prototypes, probabilities, losses
# ---------------------------------------------------------------------------


def _averaging_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    M = (labels[np.newaxis, :] == np.arange(n_way)[:, np.newaxis]).astype(np.float64)
    counts = M.sum(axis=1)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {empty} have no support points")
    return M / counts[:, np.newaxis]


def compute_prototypes(embeddings, episode_labels, n_way: int) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    return _averaging_matrix(episode_labels, n_way) @ E


def class_probabilities(dists) -> np.ndarray:
    logits = -np.asarray(dists, dtype=np.float64)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def prototypical_loss(probs, true_labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def softmax_cross_entropy(dists, true_labels) -> float:
    """Mean of ``d_true + logsumexp(-d)``; same value as
    ``prototypical_loss(class_probabilities(dists), labels)``."""
    dists = np.asarray(dists, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    per_query = dists[np.arange(len(labels)), labels] + logsumexp(-dists, axis=1)
    return float(per_query.mean())


def _prototype_gaps(prototypes):
    diff = prototypes[:, np.newaxis, :] - prototypes[np.newaxis, :, :]
    return diff, np.einsum("ijd,ijd->ij", diff, diff)


def separation_penalty(prototypes, config: LossConfig) -> float:
    """``lam * sum over ordered pairs i != j of max(0, delta_v - ||mu_i - mu_j||^2)``."""
    mu = np.asarray(prototypes, dtype=np.float64)
    _, sq = _prototype_gaps(mu)
    hinge = np.maximum(0.0, config.delta_v - sq)
    np.fill_diagonal(hinge, 0.0)
    return float(config.lam * hinge.sum())


# ---------------------------------------------------------------------------
# Episode objective
# ---------------------------------------------------------------------------


def episode_loss(model: EmbeddingModel, kernel: DistanceKernel, episode, config: LossConfig = LossConfig()) -> float:
    return episode_gradients(model, kernel, episode, config, need_grad=False)[0]


def episode_gradients(
    model: EmbeddingModel,
    kernel: DistanceKernel,
    episode,
    config: LossConfig = LossConfig(),
    need_grad: bool = True,
):
    """Loss and analytic gradients with respect to ``A`` (and ``L``).

    The backward pass mirrors the forward chain: activation, prototype means,
    kernel distance, softmax cross-entropy and the optional separation hinge.
    """
    n_way = episode.n_way
    Xs, Xq = episode.support_x, episode.query_x
    ys, yq = np.asarray(episode.support_y), np.asarray(episode.query_y)

    Es = activate(model.kind, Xs @ model.A.T)
    Eq = activate(model.kind, Xq @ model.A.T)
    avg = _averaging_matrix(ys, n_way)
    C = avg @ Es

    Uq, Uc = _whiten(kernel, Eq), _whiten(kernel, C)
    diff = Uq[:, np.newaxis, :] - Uc[np.newaxis, :, :]  # (nq, n_way, dim)
    r = np.einsum("qkd,qkd->qk", diff, diff)
    if kernel.variant == "rbf":
        rbf = np.exp(-kernel.gamma * r)
        dists = 2.0 - 2.0 * rbf
    else:
        dists = r

    nq = len(yq)
    rows = np.arange(nq)
    lse = logsumexp(-dists, axis=1)
    loss = float(np.mean(dists[rows, yq] + lse))

    penalty = 0.0
    if config.use_separation:
        gaps, sq = _prototype_gaps(C)
        active = (config.delta_v - sq) > 0
        np.fill_diagonal(active, False)
        penalty = float(config.lam * np.where(active, config.delta_v - sq, 0.0).sum())
    loss += penalty

    if not np.isfinite(loss):
        raise NumericalError(f"non-finite episode loss {loss}")
    if not need_grad:
        return loss, None

    # d loss / d dists
    P = np.exp(-dists - lse[:, np.newaxis])
    G = -P
    G[rows, yq] += 1.0
    G /= nq
    if kernel.variant == "rbf":
        G = G * (2.0 * kernel.gamma * rbf)  # now d loss / d r

    # r = ||(e - c) L||^2  ->  grads in whitened coordinates, then map back by L^T
    W = 2.0 * G[:, :, np.newaxis] * diff  # d loss / d (u_q - u_k)
    dUq = W.sum(axis=1)
    dUc = -W.sum(axis=0)
    if kernel.variant == "cholesky":
        dEq, dC = dUq @ kernel.L.T, dUc @ kernel.L.T
        Dq = Eq[:, np.newaxis, :] - C[np.newaxis, :, :]
        dL = np.einsum("qki,qkj->ij", Dq, W)
        dL = np.tril(dL, k=-1)
    else:
        dEq, dC = dUq, dUc
        dL = None

    if config.use_separation:
        # each ordered pair (i, j) contributes -lam * 2 (mu_i - mu_j) to mu_i and the reverse to mu_j
        coef = active.astype(np.float64) + active.T
        dC = dC - 2.0 * config.lam * np.einsum("ij,ijd->id", coef, gaps)

    dEs = avg.T @ dC
    if model.kind == "logistic":
        dZs = -dEs * Es * (1.0 - Es)
        dZq = -dEq * Eq * (1.0 - Eq)
    else:
        dZs, dZq = dEs, dEq
    dA = dZs.T @ Xs + dZq.T @ Xq

    if not np.all(np.isfinite(dA)) or (dL is not None and not np.all(np.isfinite(dL))):
        raise NumericalError("non-finite gradient")
    return loss, Gradients(dA, dL)


def finite_diff_gradients(
    model: EmbeddingModel,
    kernel: DistanceKernel,
    episode,
    config: LossConfig = LossConfig(),
    h: float = 1e-5,
    loss_fn=None,
) -> Gradients:
    """Central differences of ``loss_fn`` (default :func:`episode_loss`).

    For the cholesky kernel only the strict lower triangle of ``L`` is
    perturbed; the remaining entries are fixed by projection.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    loss_fn = loss_fn or episode_loss
    A = model.A
    dA = np.zeros_like(A)
    probe = EmbeddingModel(model.kind, A.copy())
    for idx in np.ndindex(A.shape):
        orig = probe.A[idx]
        probe.A[idx] = orig + h
        up = loss_fn(probe, kernel, episode, config)
        probe.A[idx] = orig - h
        down = loss_fn(probe, kernel, episode, config)
        probe.A[idx] = orig
        dA[idx] = (up - down) / (2 * h)

    dL = None
    if kernel.variant == "cholesky":
        dL = np.zeros_like(kernel.L)
        k2 = kernel.copy()
        for i, j in zip(*np.tril_indices(kernel.L.shape[0], k=-1)):
            orig = k2.L[i, j]
            k2.L[i, j] = orig + h
            up = loss_fn(model, k2, episode, config)
            k2.L[i, j] = orig - h
            down = loss_fn(model, k2, episode, config)
            k2.L[i, j] = orig
            dL[i, j] = (up - down) / (2 * h)
    return Gradients(dA, dL)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
