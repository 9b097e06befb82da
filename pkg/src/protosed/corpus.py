"""Annotations, patch labelling, class balancing and episode sampling."""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .audio import PATCH_FRAMES, MelPcenGram, Patch, patch_matrix, patch_starts, read_envelope, write_envelope
from .errors import AnnotationError, DataError, EpisodeError, IngestionError

POS, UNK, NEG = "POS", "UNK", "NEG"
_TOKENS = {POS, UNK, NEG}
_REQUIRED = ("Audiofilename", "Starttime", "Endtime")
BACKGROUND = 0


@dataclass(frozen=True)
class AnnotationRow:
    audiofile: str
    start: float
    end: float
    labels: dict = field(default_factory=dict, hash=False)

    def classes_with(self, token: str) -> list[str]:
        return [c for c, t in self.labels.items() if t == token]


def parse_annotations(csv_text: str) -> list[AnnotationRow]:
    """Parse an event annotation CSV.

    Every column after ``Audiofilename, Starttime, Endtime`` is a class column
    whose cells must be POS, UNK or NEG. Errors carry 1-based line numbers.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise AnnotationError("empty annotation document") from None
    for col in _REQUIRED:
        if col not in header:
            raise AnnotationError(f"missing header column {col!r}")
    class_cols = [(i, h) for i, h in enumerate(header) if h not in _REQUIRED]
    if not class_cols:
        raise AnnotationError("annotation header has no class column")
    i_file, i_start, i_end = (header.index(c) for c in _REQUIRED)

    rows = []
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise AnnotationError(f"line {lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            start, end = float(cells[i_start]), float(cells[i_end])
        except ValueError:
            raise AnnotationError(f"line {lineno}: non-numeric start/end time") from None
        if not (math.isfinite(start) and math.isfinite(end)) or start < 0 or start >= end:
            raise AnnotationError(f"line {lineno}: need 0 <= start < end, got {start}, {end}")
        labels = {}
        for i, name in class_cols:
            token = cells[i].strip()
            if token not in _TOKENS:
                raise AnnotationError(f"line {lineno}: unknown label {token!r} in column {name!r}")
            labels[name] = token
        rows.append(AnnotationRow(cells[i_file].strip(), start, end, labels))
    return rows


def read_annotations(path) -> list[AnnotationRow]:
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IngestionError(path, str(exc)) from None
    try:
        return parse_annotations(text)
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None


def class_names(rows) -> list[str]:
    """Sorted names of every class with at least one POS row."""
    return sorted({c for r in rows for c in r.classes_with(POS)})


def group_by_file(rows) -> dict[str, list[AnnotationRow]]:
    out: dict[str, list[AnnotationRow]] = {}
    for r in rows:
        out.setdefault(r.audiofile, []).append(r)
    return out


# ---------------------------------------------------------------------------
# Patch pools
# ---------------------------------------------------------------------------


@dataclass
class LabeledPatch:
    features: np.ndarray
    class_id: int
    source: tuple = ("", 0)


class PatchPool:
    """Array-backed sequence of labelled patches.

    Behaves like a list of :class:`LabeledPatch` but keeps features in one
    ``(n, dim)`` matrix so sampling and batching stay cheap.
    """

    def __init__(self, features, class_ids, sources=None):
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.features), -1)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        if len(self.class_ids) != len(self.features):
            raise ValueError("features and class_ids differ in length")
        self.sources = list(sources) if sources is not None else [("", 0)] * len(self.class_ids)

    @classmethod
    def coerce(cls, items) -> "PatchPool":
        if isinstance(items, PatchPool):
            return items
        items = list(items)
        if not items:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), [])
        return cls(
            np.stack([np.asarray(p.features, dtype=np.float64).reshape(-1) for p in items]),
            [p.class_id for p in items],
            [tuple(p.source) for p in items],
        )

    @classmethod
    def concat(cls, pools) -> "PatchPool":
        pools = [p for p in pools if len(p)]
        if not pools:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), [])
        return cls(
            np.concatenate([p.features for p in pools]),
            np.concatenate([p.class_ids for p in pools]),
            [s for p in pools for s in p.sources],
        )

    def __len__(self):
        return len(self.class_ids)

    def __getitem__(self, i) -> LabeledPatch:
        return LabeledPatch(self.features[i], int(self.class_ids[i]), self.sources[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "PatchPool":
        indices = np.asarray(indices, dtype=np.int64)
        return PatchPool(self.features[indices], self.class_ids[indices], [self.sources[i] for i in indices])

    def counts(self) -> dict[int, int]:
        return dict(sorted(Counter(self.class_ids.tolist()).items()))

    @cached_property
    def by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.class_ids == c) for c in np.unique(self.class_ids)}


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def label_patches(
    patches,
    rows,
    overlap_frac: float = 0.5,
    *,
    hop_length: int = 256,
    sample_rate: int = 22050,
    class_ids: dict | None = None,
    recording: str = "",
) -> list[LabeledPatch]:
    """Assign each patch the POS class covering at least ``overlap_frac`` of it.

    Coverage is measured per event. Competing classes are resolved by larger
    overlap, then lower class id. Patches that stay background but touch an
    UNK span are dropped. ``class_ids`` maps class names to ids >= 1; by
    default the sorted POS class names of ``rows`` are numbered from 1.
    """
    if class_ids is None:
        class_ids = {name: i + 1 for i, name in enumerate(class_names(rows))}
    pos_events = []
    unk_spans = []
    for r in rows:
        for name in r.classes_with(POS):
            if name in class_ids:
                pos_events.append((r.start, r.end, class_ids[name]))
        if r.classes_with(UNK):
            unk_spans.append((r.start, r.end))

    hop_s = hop_length / sample_rate
    out = []
    for p in patches:
        n = p.values.shape[0]
        t0 = p.start_frame * hop_s
        t1 = (p.start_frame + n) * hop_s
        need = overlap_frac * (t1 - t0)
        best: dict[int, float] = {}
        for s, e, cid in pos_events:
            ov = _overlap(t0, t1, s, e)
            if ov >= need and ov > 0 and ov > best.get(cid, -1.0):
                best[cid] = ov
        if best:
            label = min(best, key=lambda c: (-best[c], c))
        elif any(_overlap(t0, t1, s, e) > 0 for s, e in unk_spans):
            continue
        else:
            label = BACKGROUND
        out.append(LabeledPatch(p.flatten(), label, (recording, p.start_frame)))
    return out


def label_gram(gram: MelPcenGram, rows, class_ids, patch_hop: int = 8, overlap_frac: float = 0.5, recording: str = "") -> PatchPool:
    """Cut ``gram`` into patches and label them; array-backed shortcut over
    :func:`make_patches` + :func:`label_patches`."""
    starts = patch_starts(gram.n_frames, PATCH_FRAMES, patch_hop)
    flat = patch_matrix(gram, starts)
    views = [Patch(row.reshape(PATCH_FRAMES, gram.n_mels), int(s)) for s, row in zip(starts, flat)]
    labeled = label_patches(
        views, rows, overlap_frac,
        hop_length=gram.hop_length, sample_rate=gram.sample_rate,
        class_ids=class_ids, recording=recording,
    )
    return PatchPool.coerce(labeled) if labeled else PatchPool(np.zeros((0, flat.shape[1])), [], [])


def balance_oversample(pool, rng: np.random.Generator) -> PatchPool:
    """Duplicate event-class patches until every event class matches the largest.

    Originals are kept in order; duplicates are appended class by class.
    Background (class 0) is left untouched.
    """
    pool = PatchPool.coerce(pool)
    if len(pool) == 0:
        raise DataError("cannot balance an empty pool")
    groups = {c: idx for c, idx in pool.by_class.items() if c != BACKGROUND}
    if not groups:
        return pool
    target = max(len(idx) for idx in groups.values())
    extra = []
    for c in sorted(groups):
        deficit = target - len(groups[c])
        if deficit > 0:
            extra.append(groups[c][rng.integers(0, len(groups[c]), size=deficit)])
    if not extra:
        return pool
    order = np.concatenate([np.arange(len(pool))] + extra)
    return pool.subset(order)


def split_train_val(pool, val_frac: float = 0.2, rng: np.random.Generator | None = None) -> tuple[PatchPool, PatchPool]:
    """Per-class split; ``ceil(val_frac * count)`` patches of each class go to validation."""
    if not 0 < val_frac < 1:
        raise ValueError(f"val_frac must lie in (0, 1), got {val_frac}")
    if rng is None:
        rng = np.random.default_rng()
    pool = PatchPool.coerce(pool)
    val_mask = np.zeros(len(pool), dtype=bool)
    for c, idx in pool.by_class.items():
        if len(idx) == 1:
            warnings.warn(f"class {c} has a single patch; keeping it in the training split", stacklevel=2)
            continue
        n_val = math.ceil(val_frac * len(idx))
        val_mask[rng.choice(idx, size=n_val, replace=False)] = True
    return pool.subset(np.flatnonzero(~val_mask)), pool.subset(np.flatnonzero(val_mask))


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 10
    k_shot: int = 5
    n_query: int = 5

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ValueError(f"invalid episode spec {self}")

    @property
    def per_class(self) -> int:
        return self.k_shot + self.n_query


@dataclass
class Episode:
    """Support/query split; labels are episode-local indices ``0..n_way-1``."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: list[int]
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def support(self):
        return list(zip(self.support_x, self.support_y.tolist()))

    @property
    def query(self):
        return list(zip(self.query_x, self.query_y.tolist()))


def eligible_classes(pool, per_class: int) -> list[int]:
    pool = PatchPool.coerce(pool)
    return [c for c, idx in pool.by_class.items() if len(idx) >= per_class]


def sample_episode(pool, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    pool = PatchPool.coerce(pool)
    eligible = eligible_classes(pool, spec.per_class)
    if len(eligible) < spec.n_way:
        short = {c: len(idx) for c, idx in pool.by_class.items() if len(idx) < spec.per_class}
        detail = f"; classes below {spec.per_class} patches: {short}" if short else ""
        raise EpisodeError(
            f"need {spec.n_way} classes with >= {spec.per_class} patches, "
            f"found {len(eligible)}{detail}"
        )
    chosen = rng.choice(np.asarray(eligible), size=spec.n_way, replace=False)
    sup, qry = [], []
    for c in chosen:
        picks = rng.choice(pool.by_class[int(c)], size=spec.per_class, replace=False)
        sup.append(picks[: spec.k_shot])
        qry.append(picks[spec.k_shot :])
    sup_idx, qry_idx = np.concatenate(sup), np.concatenate(qry)
    return Episode(
        support_x=pool.features[sup_idx],
        support_y=np.repeat(np.arange(spec.n_way), spec.k_shot),
        query_x=pool.features[qry_idx],
        query_y=np.repeat(np.arange(spec.n_way), spec.n_query),
        class_map=[int(c) for c in chosen],
        support_idx=sup_idx,
        query_idx=qry_idx,
    )


# ---------------------------------------------------------------------------
# Labelled-patch cache
# ---------------------------------------------------------------------------


def write_pool(pool, path, class_names: list[str] | None = None) -> None:
    pool = PatchPool.coerce(pool)
    header = {
        "n_patches": len(pool),
        "dim": pool.dim if len(pool) else 0,
        "class_names": list(class_names or []),
        "sources": [[str(s[0]), int(s[1])] for s in pool.sources],
    }
    write_envelope(
        path, header,
        pool.features.astype("<f4").tobytes(),
        pool.class_ids.astype("<i4").tobytes(),
    )


def read_pool(path) -> tuple[PatchPool, list[str]]:
    header, payload = read_envelope(path)
    n, dim = int(header["n_patches"]), int(header["dim"])
    n_feat = n * dim * 4
    if len(payload) != n_feat + n * 4:
        raise IngestionError(os.fspath(path), "patch cache payload has the wrong length")
    feats = np.frombuffer(payload[:n_feat], dtype="<f4").reshape(n, dim).astype(np.float64)
    ids = np.frombuffer(payload[n_feat:], dtype="<i4").astype(np.int64)
    sources = [tuple(s) for s in header.get("sources", [])] or None
    return PatchPool(feats, ids, sources), header.get("class_names", [])
