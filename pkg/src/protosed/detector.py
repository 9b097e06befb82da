"""Five-shot detection on a single recording."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .audio import PATCH_FRAMES, MelPcenGram, patch_matrix, patch_starts
from .corpus import POS
from .embeddings import EnsembleModel, forward
from .errors import DataError
from .objective import class_probabilities, pairwise_sq_distances

N_SHOTS = 5


@dataclass(frozen=True)
class DetectionConfig:
    prob_threshold: float = 0.5
    patch_hop: int = 8
    median_filter_width: int = 1
    min_event_duration: float = 0.0

    def __post_init__(self):
        if not 0 < self.prob_threshold < 1:
            raise ValueError(f"prob_threshold must lie in (0, 1), got {self.prob_threshold}")
        if self.median_filter_width < 1 or self.median_filter_width % 2 == 0:
            raise ValueError("median_filter_width must be odd and >= 1")
        if self.patch_hop < 1:
            raise ValueError("patch_hop must be >= 1")


@dataclass(frozen=True)
class PredictedEvent:
    start: float
    end: float
    score: float


@dataclass
class Support:
    pos: np.ndarray
    neg: np.ndarray
    pos_starts: np.ndarray
    neg_starts: np.ndarray
    query_from: float  # seconds; queries start at or after the last support event


def first_shots(rows, n: int = N_SHOTS):
    """The earliest ``n`` POS rows of a recording's annotations."""
    pos = sorted((r for r in rows if POS in r.labels.values()), key=lambda r: (r.start, r.end))
    if len(pos) < n:
        raise DataError(f"need {n} POS annotations for the support set, found {len(pos)}")
    return pos[:n]


def build_support(gram: MelPcenGram, first5, patch_hop: int = 8) -> Support:
    """Positive and negative support patches from the annotated prefix.

    Grid patches at least half inside one of the events are positives; an
    event no longer than a patch instead yields one patch centred on it.
    Negatives are grid patches inside the prefix that touch no event.
    """
    events = sorted(((r.start, r.end) for r in first5), key=lambda e: e)
    if len(events) != N_SHOTS:
        raise DataError(f"support needs exactly {N_SHOTS} POS events, got {len(events)}")
    hop_s = gram.frame_hop_seconds
    duration = gram.n_frames * hop_s
    if events[-1][1] > duration + 1e-9:
        raise DataError(f"support event ends at {events[-1][1]:.3f}s, after the recording ({duration:.3f}s)")
    patch_s = PATCH_FRAMES * hop_s
    prefix_end = events[-1][1]

    starts = patch_starts(gram.n_frames, PATCH_FRAMES, patch_hop)
    t0 = starts * hop_s
    t1 = t0 + patch_s

    pos_starts = []
    for s, e in events:
        if e - s <= patch_s + 1e-9:
            centre = 0.5 * (s + e) / hop_s
            pos_starts.append([int(np.floor(centre - PATCH_FRAMES / 2 + 0.5))])
        else:
            overlap = np.minimum(t1, e) - np.maximum(t0, s)
            pos_starts.append(starts[overlap >= 0.5 * patch_s])
    pos_starts = np.unique(np.concatenate(pos_starts).astype(np.int64))

    touches = np.zeros(len(starts), dtype=bool)
    for s, e in events:
        touches |= (np.minimum(t1, e) - np.maximum(t0, s)) > 0
    neg_starts = starts[(t1 <= prefix_end + 1e-9) & ~touches]

    if len(pos_starts) == 0:
        raise DataError("no positive support patches could be extracted")
    if len(neg_starts) == 0:
        raise DataError("no negative support patches: the events cover the whole annotated prefix")
    return Support(
        pos=patch_matrix(gram, pos_starts),
        neg=patch_matrix(gram, neg_starts),
        pos_starts=pos_starts,
        neg_starts=neg_starts,
        query_from=prefix_end,
    )


def _members(model, kernel):
    if isinstance(model, EnsembleModel):
        return model.members
    return [(model, kernel)]


def positive_probability(model, kernel, support: Support, queries: np.ndarray) -> np.ndarray:
    """Two-way softmax probability of the positive prototype, averaged over
    ensemble members."""
    probs = []
    for m, k in _members(model, kernel):
        c_pos = forward(m, support.pos).mean(axis=0)
        c_neg = forward(m, support.neg).mean(axis=0)
        dists = pairwise_sq_distances(k, forward(m, queries), np.stack([c_pos, c_neg]))
        probs.append(class_probabilities(dists)[:, 0])
    return np.mean(probs, axis=0)


def frame_probabilities(model, kernel, gram: MelPcenGram, support: Support, config: DetectionConfig = DetectionConfig(),
                        batch: int = 1024):
    """``(start_frames, p_pos)`` for every query patch after the support prefix."""
    starts = patch_starts(gram.n_frames, PATCH_FRAMES, config.patch_hop)
    starts = starts[starts * gram.frame_hop_seconds >= support.query_from - 1e-9]
    p = np.empty(len(starts))
    for lo in range(0, len(starts), batch):
        sl = slice(lo, lo + batch)
        p[sl] = positive_probability(model, kernel, support, patch_matrix(gram, starts[sl]))
    return starts, p


def extract_events(start_frames, p_pos, hop_length: int = 256, sample_rate: int = 22050,
                   config: DetectionConfig = DetectionConfig()) -> list[PredictedEvent]:
    """Threshold (optionally median-smoothed) probabilities into timed events.

    A maximal run of above-threshold patches spans from the first patch's
    start to the last patch's end, cut short at the next run's start if the
    two would otherwise overlap.
    """
    start_frames = np.asarray(start_frames, dtype=np.int64)
    p = np.asarray(p_pos, dtype=np.float64)
    if p.size == 0:
        return []
    if config.median_filter_width > 1:
        p = median_filter(p, size=config.median_filter_width, mode="nearest")
    above = p > config.prob_threshold
    runs = []
    i, n = 0, len(p)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        runs.append((i, j))
        i = j + 1
    events = []
    for r, (i, j) in enumerate(runs):
        start = start_frames[i] * hop_length / sample_rate
        end = (start_frames[j] + PATCH_FRAMES) * hop_length / sample_rate
        if r + 1 < len(runs):
            # patches overlap when the hop is shorter than a patch; keep events disjoint
            end = min(end, start_frames[runs[r + 1][0]] * hop_length / sample_rate)
        if end - start >= config.min_event_duration:
            events.append(PredictedEvent(float(start), float(end), float(p[i : j + 1].mean())))
    return events


def detect(model, kernel, gram: MelPcenGram, rows, config: DetectionConfig = DetectionConfig()) -> list[PredictedEvent]:
    support = build_support(gram, first_shots(rows), config.patch_hop)
    starts, p = frame_probabilities(model, kernel, gram, support, config)
    return extract_events(starts, p, gram.hop_length, gram.sample_rate, config)


def predictions_csv(rows: list[tuple[str, PredictedEvent]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Audiofilename", "Starttime", "Endtime"])
    for name, ev in rows:
        writer.writerow([name, f"{ev.start:.6f}", f"{ev.end:.6f}"])
    return buf.getvalue()
