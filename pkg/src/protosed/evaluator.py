"""Event-level scoring: IoU, bipartite matching and precision/recall/F."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import POS, UNK, parse_annotations
from .errors import AnnotationError, DataError, IngestionError


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"interval needs start < end, got ({self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


def _as_interval(x) -> Interval:
    return x if isinstance(x, Interval) else Interval(float(x[0]), float(x[1]))


def iou(a, b) -> float:
    a, b = _as_interval(a), _as_interval(b)
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def remove_unk(preds, unk) -> list[Interval]:
    """Drop predictions with any positive-length overlap with an UNK span."""
    preds = [_as_interval(p) for p in preds]
    unk = [_as_interval(u) for u in unk]
    return [p for p in preds if not any(min(p.end, u.end) > max(p.start, u.start) for u in unk)]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    fscore: float


def _components(edges: np.ndarray):
    """Connected components of the bipartite edge mask, as (rows, cols) lists."""
    n_p, n_g = edges.shape
    seen_p = np.zeros(n_p, dtype=bool)
    seen_g = np.zeros(n_g, dtype=bool)
    comps = []
    for start in range(n_p):
        if seen_p[start] or not edges[start].any():
            continue
        rows, cols = [], []
        stack = [("p", start)]
        seen_p[start] = True
        while stack:
            side, i = stack.pop()
            if side == "p":
                rows.append(i)
                for j in np.flatnonzero(edges[i] & ~seen_g):
                    seen_g[j] = True
                    stack.append(("g", int(j)))
            else:
                cols.append(i)
                for j in np.flatnonzero(edges[:, i] & ~seen_p):
                    seen_p[j] = True
                    stack.append(("p", int(j)))
        comps.append((sorted(rows), sorted(cols)))
    return comps


def _best_value(weights: np.ndarray) -> float:
    if weights.size == 0:
        return 0.0
    r, c = linear_sum_assignment(weights, maximize=True)
    return float(weights[r, c].sum())


def _match_component(weights: np.ndarray) -> list[tuple[int, int]]:
    """Lexicographically smallest pair list among optimal assignments.

    Pairs are fixed greedily in lexicographic order whenever committing one
    still leaves the optimum reachable on the remaining rows and columns.
    """
    target = _best_value(weights)
    tol = 1e-9 * max(1.0, abs(target))
    rows_left = list(range(weights.shape[0]))
    cols_left = list(range(weights.shape[1]))
    chosen, gained = [], 0.0
    for i in range(weights.shape[0]):
        for j in np.flatnonzero(weights[i] > 0):
            if j not in cols_left:
                continue
            rest_r = [r for r in rows_left if r != i]
            rest_c = [c for c in cols_left if c != j]
            value = gained + weights[i, j] + _best_value(weights[np.ix_(rest_r, rest_c)])
            if value >= target - tol:
                chosen.append((i, int(j)))
                gained += weights[i, j]
                rows_left, cols_left = rest_r, rest_c
                break
    return chosen


def match_events(preds, gts, min_iou: float = 0.3) -> MatchResult:
    """Maximum-cardinality matching over pairs with ``iou >= min_iou``.

    Among maximum-cardinality matchings the one with the largest total IoU
    is returned, ties going to the lexicographically smallest pair list.
    """
    preds = [_as_interval(p) for p in preds]
    gts = [_as_interval(g) for g in gts]
    n_p, n_g = len(preds), len(gts)
    scores = np.zeros((n_p, n_g))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            scores[i, j] = iou(p, g)
    edges = scores >= min_iou
    if min_iou <= 0:
        edges &= scores > 0
    # one extra edge always outweighs any IoU total of a component
    bonus = float(min(n_p, n_g) + 1)

    pairs = []
    for rows, cols in _components(edges):
        w = np.where(edges[np.ix_(rows, cols)], bonus + scores[np.ix_(rows, cols)], 0.0)
        pairs.extend((rows[i], cols[j]) for i, j in _match_component(w))
    pairs.sort()
    tp = len(pairs)
    return MatchResult(pairs, tp, n_p - tp, n_g - tp)


def compute_metrics(tp: int, fp: int, fn: int) -> Metrics:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    fscore = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(precision, recall, fscore)


# ---------------------------------------------------------------------------
# File-level scoring
# ---------------------------------------------------------------------------


@dataclass
class FileScore:
    match: MatchResult
    metrics: Metrics


@dataclass
class ScoreReport:
    per_file: dict[str, FileScore] = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def pooled(self) -> Metrics:
        return compute_metrics(self.tp, self.fp, self.fn)

    def to_dict(self) -> dict:
        pooled = self.pooled
        return {
            "per_file": {
                name: {
                    "tp": s.match.tp, "fp": s.match.fp, "fn": s.match.fn,
                    "precision": s.metrics.precision, "recall": s.metrics.recall,
                    "fscore": s.metrics.fscore,
                }
                for name, s in sorted(self.per_file.items())
            },
            "pooled": {
                "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": pooled.precision, "recall": pooled.recall, "fscore": pooled.fscore,
            },
        }


def pool_results(results: dict[str, MatchResult]) -> ScoreReport:
    report = ScoreReport()
    for name, m in results.items():
        report.per_file[name] = FileScore(m, compute_metrics(m.tp, m.fp, m.fn))
        report.tp += m.tp
        report.fp += m.fp
        report.fn += m.fn
    return report


def parse_predictions(csv_text: str) -> dict[str, list[Interval]]:
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise AnnotationError("empty prediction document") from None
    try:
        i_f, i_s, i_e = (header.index(c) for c in ("Audiofilename", "Starttime", "Endtime"))
    except ValueError:
        raise AnnotationError("prediction header must name Audiofilename, Starttime, Endtime") from None
    out: dict[str, list[Interval]] = {}
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        try:
            iv = Interval(float(cells[i_s]), float(cells[i_e]))
        except (ValueError, IndexError) as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        out.setdefault(cells[i_f].strip(), []).append(iv)
    return out


def score_recording(preds, gt_rows, min_iou: float = 0.3, n_shots: int = 5) -> MatchResult:
    """Score one recording against its POS/UNK annotation rows.

    With ``n_shots > 0`` the first ``n_shots`` POS events are the support
    examples: they leave the ground truth and predictions starting before
    the last of them ends are ignored.
    """
    pos = sorted((r for r in gt_rows if any(t == POS for t in r.labels.values())), key=lambda r: (r.start, r.end))
    unk = [Interval(r.start, r.end) for r in gt_rows if any(t == UNK for t in r.labels.values())]
    preds = [_as_interval(p) for p in preds]
    if n_shots > 0 and pos:
        cutoff = pos[min(n_shots, len(pos)) - 1].end
        pos = pos[n_shots:]
        preds = [p for p in preds if p.start >= cutoff]
    gts = [Interval(r.start, r.end) for r in pos]
    return match_events(remove_unk(preds, unk), gts, min_iou)


def score_files(pred_csv: str, gt_csv: str, min_iou: float = 0.3, n_shots: int = 5) -> ScoreReport:
    """Per-recording matching plus pooled totals from CSV documents."""
    preds = parse_predictions(pred_csv)
    gt_rows = parse_annotations(gt_csv)
    by_file: dict[str, list] = {}
    for r in gt_rows:
        by_file.setdefault(r.audiofile, []).append(r)
    missing = sorted(set(preds) - set(by_file))
    if missing:
        raise DataError(f"predictions name recordings absent from ground truth: {missing}")
    results = {name: score_recording(preds.get(name, []), rows, min_iou, n_shots) for name, rows in by_file.items()}
    return pool_results(results)


def score_file(pred_path, gt_path, min_iou: float = 0.3, n_shots: int = 5) -> ScoreReport:
    texts = []
    for p in (pred_path, gt_path):
        try:
            with open(p, newline="", encoding="utf-8") as fh:
                texts.append(fh.read())
        except OSError as exc:
            raise IngestionError(os.fspath(p), str(exc)) from None
    return score_files(texts[0], texts[1], min_iou, n_shots)
