"""Linear and logistic patch embeddings, plus a two-or-more member ensemble."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .audio import N_MELS, PATCH_FRAMES

INPUT_DIM = PATCH_FRAMES * N_MELS  # 2176
KINDS = ("linear", "logistic")


@dataclass
class EmbeddingModel:
    """``kind`` is ``"linear"`` (``A x``) or ``"logistic"`` (``1 / (1 + exp(A x))``).

    The logistic form keeps the positive exponent; it equals the usual sigmoid
    of ``-A x``.
    """

    kind: str
    A: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.A.ndim != 2:
            raise ValueError("weight matrix must be 2-D")
        if not np.all(np.isfinite(self.A)):
            raise ValueError("weight matrix has non-finite entries")

    @property
    def out_dim(self) -> int:
        return self.A.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.kind, self.A.copy())


@dataclass
class EnsembleModel:
    members: list  # of (EmbeddingModel, DistanceKernel)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        dims = {m.in_dim for m, _ in self.members}
        if len(dims) != 1:
            raise ValueError(f"ensemble members disagree on input dimension: {sorted(dims)}")

    @property
    def in_dim(self) -> int:
        return self.members[0][0].in_dim


def init_model(kind: str, out_dim: int, rng: np.random.Generator, in_dim: int = INPUT_DIM) -> EmbeddingModel:
    if out_dim <= 0:
        raise ValueError(f"out_dim must be positive, got {out_dim}")
    bound = 1.0 / np.sqrt(in_dim)
    return EmbeddingModel(kind, rng.uniform(-bound, bound, size=(out_dim, in_dim)))


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    # expit(-z) == 1 / (1 + exp(z)) without overflow
    return expit(-z)


def forward(model: EmbeddingModel, X: np.ndarray) -> np.ndarray:
    """Vectorised embedding of the rows of ``X``; the training hot path."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ValueError(f"expected (n, {model.in_dim}) inputs, got {X.shape}")
    return activate(model.kind, X @ model.A.T)


def embed(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.in_dim,):
        raise ValueError(f"expected a {model.in_dim}-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    return activate(model.kind, model.A @ x)


def embed_batch(model: EmbeddingModel, X) -> list[np.ndarray]:
    """Apply :func:`embed` to each input, bit-for-bit identical to single calls."""
    return [embed(model, x) for x in X]


def model_to_dict(model: EmbeddingModel) -> dict:
    return {"kind": model.kind, "out_dim": model.out_dim, "in_dim": model.in_dim, "A": model.A}


def model_from_dict(doc: dict) -> EmbeddingModel:
    out_dim, in_dim = int(doc["out_dim"]), int(doc["in_dim"])
    A = np.asarray(doc["A"], dtype=np.float64)
    if A.size != out_dim * in_dim:
        raise ValueError(f"A has {A.size} entries, expected {out_dim}x{in_dim}")
    return EmbeddingModel(doc["kind"], A.reshape(out_dim, in_dim))
