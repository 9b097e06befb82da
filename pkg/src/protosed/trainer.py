"""Episodic gradient-descent training, validation accuracy and checkpoints."""
from __future__ import annotations

import json
import logging
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import EpisodeSpec, PatchPool, eligible_classes, sample_episode
from .embeddings import EmbeddingModel, EnsembleModel, forward, init_model, model_from_dict
from .errors import CheckpointError, EpisodeError, NumericalError
from .objective import (
    DistanceKernel,
    LossConfig,
    episode_gradients,
    pairwise_sq_distances,
    project_cholesky,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def child_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator per named purpose, all derived from one seed."""
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "logistic"
    out_dim: int = 256
    kernel: str = "euclidean"
    gamma: float | None = None
    epochs: int = 15
    lr: float = 1e-4
    episode_spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    episodes_per_epoch: int | None = None
    val_episodes: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")

    def make_kernel(self) -> DistanceKernel:
        if self.kernel == "cholesky":
            return DistanceKernel.cholesky(self.out_dim)
        if self.kernel == "rbf":
            return DistanceKernel.rbf(self.gamma)
        return DistanceKernel(self.kernel)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_accuracy: float

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "mean_loss": self.mean_loss, "val_accuracy": self.val_accuracy},
            sort_keys=True,
        )


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    updates: int = 0

    @property
    def final_val_accuracy(self) -> float:
        return self.epochs[-1].val_accuracy if self.epochs else float("nan")

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.epochs)


def default_episodes_per_epoch(pool_size: int, spec: EpisodeSpec) -> int:
    return max(1, pool_size // (spec.n_way * spec.per_class))


def _clipped_spec(pool: PatchPool, spec: EpisodeSpec) -> EpisodeSpec:
    n = len(eligible_classes(pool, spec.per_class))
    if n < 2:
        raise EpisodeError(
            f"validation pool has {n} classes with >= {spec.per_class} patches; need at least 2"
        )
    return EpisodeSpec(min(spec.n_way, n), spec.k_shot, spec.n_query)


def predict_episode(model, kernel, episode) -> np.ndarray:
    """Episode-local argmax class of each query point."""
    Es = forward(model, episode.support_x)
    Eq = forward(model, episode.query_x)
    protos = np.stack([Es[episode.support_y == k].mean(axis=0) for k in range(episode.n_way)])
    dists = pairwise_sq_distances(kernel, Eq, protos)
    return np.argmin(dists, axis=1)


def validation_accuracy(model, kernel, val_pool, spec: EpisodeSpec = EpisodeSpec(), n_episodes: int = 100, rng=None) -> float:
    """Fraction of query points assigned to their true class over sampled episodes.

    ``n_way`` is clipped to the number of classes the pool can support.
    """
    val_pool = PatchPool.coerce(val_pool)
    if len(val_pool) == 0:
        raise EpisodeError("validation pool is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = _clipped_spec(val_pool, spec)
    correct = total = 0
    for _ in range(n_episodes):
        ep = sample_episode(val_pool, spec, rng)
        pred = predict_episode(model, kernel, ep)
        correct += int(np.sum(pred == ep.query_y))
        total += len(pred)
    return correct / total


def train(train_pool, val_pool, config: TrainConfig = TrainConfig(), *, log_every: int = 0):
    """Plain gradient descent over sampled episodes; returns the final-epoch
    ``(model, kernel, report)``."""
    train_pool = PatchPool.coerce(train_pool)
    val_pool = PatchPool.coerce(val_pool)
    spec = config.episode_spec
    # fail fast, before any work, if the pools cannot form episodes
    sample_episode(train_pool, spec, np.random.default_rng(0))
    _clipped_spec(val_pool, spec)

    model = init_model(config.kind, config.out_dim, child_rng(config.seed, "init"), in_dim=train_pool.dim)
    kernel = config.make_kernel()
    ep_rng = child_rng(config.seed, "episodes")
    val_rng = child_rng(config.seed, "validation")
    n_eps = config.episodes_per_epoch or default_episodes_per_epoch(len(train_pool), spec)

    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for i in range(n_eps):
            episode = sample_episode(train_pool, spec, ep_rng)
            try:
                loss, grads = episode_gradients(model, kernel, episode, config.loss)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, episode {i + 1}: {exc}") from None
            model.A -= config.lr * grads.dA
            if grads.dL is not None:
                kernel.L = project_cholesky(kernel.L - config.lr * grads.dL)
            losses.append(loss)
            report.updates += 1
            if log_every and (i + 1) % log_every == 0:
                logger.info("epoch %d episode %d loss %.5f", epoch, i + 1, loss)
        acc = validation_accuracy(model, kernel, val_pool, spec, config.val_episodes, val_rng)
        record = EpochRecord(epoch, float(np.mean(losses)), float(acc))
        report.epochs.append(record)
        logger.info("epoch %d mean loss %.5f val acc %.4f", epoch, record.mean_loss, acc)
    report.wall_seconds = time.perf_counter() - t0
    return model, kernel, report


def train_ensemble(train_pool, val_pool, config: TrainConfig = TrainConfig(), member_dims=(256, 1024)):
    """Train independent logistic members with seeds ``seed, seed + 1, ...``."""
    members, reports = [], []
    for offset, dim in enumerate(member_dims):
        cfg = TrainConfig(
            kind="logistic", out_dim=dim, kernel=config.kernel, gamma=config.gamma,
            epochs=config.epochs, lr=config.lr, episode_spec=config.episode_spec,
            episodes_per_epoch=config.episodes_per_epoch, val_episodes=config.val_episodes,
            loss=config.loss, seed=config.seed + offset,
        )
        model, kernel, report = train(train_pool, val_pool, cfg)
        members.append((model, kernel))
        reports.append(report)
    return EnsembleModel(members), reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _float_array(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.asarray(values).ravel()) + "]"


def _member_json(model: EmbeddingModel, kernel: DistanceKernel) -> str:
    kparts = [f'"variant":{json.dumps(kernel.variant)}']
    if kernel.variant == "rbf":
        kparts.append(f'"gamma":{format(kernel.gamma, ".17g")}')
    if kernel.variant == "cholesky":
        kparts.append(f'"L":{_float_array(kernel.L)}')
    return (
        "{"
        f'"A":{_float_array(model.A)},'
        f'"in_dim":{model.in_dim},'
        f'"kernel":{{{",".join(kparts)}}},'
        f'"kind":{json.dumps(model.kind)},'
        f'"out_dim":{model.out_dim}'
    )


def checkpoint_text(model, kernel=None) -> str:
    """Canonical checkpoint document; floats written with 17 significant digits."""
    if isinstance(model, EnsembleModel):
        members = ",".join(_member_json(m, k) + "}" for m, k in model.members)
        return f'{{"format_version":{FORMAT_VERSION},"kind":"ensemble","members":[{members}]}}\n'
    return _member_json(model, kernel) + f',"format_version":{FORMAT_VERSION}}}\n'


def save_checkpoint(model, kernel, path) -> None:
    text = checkpoint_text(model, kernel)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _member_from_doc(doc: dict):
    model = model_from_dict(doc)
    kernel = DistanceKernel.from_dict(doc["kernel"])
    return model, kernel


def load_checkpoint(path):
    """Returns ``(model, kernel)``; for an ensemble, ``(EnsembleModel, None)``."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {doc.get('format_version') if isinstance(doc, dict) else None}"
        )
    try:
        if doc.get("kind") == "ensemble":
            return EnsembleModel([_member_from_doc(m) for m in doc["members"]]), None
        return _member_from_doc(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
