"""Built-in oracle suites run by ``protosed verify``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .corpus import Episode
from .embeddings import EmbeddingModel
from .evaluator import compute_metrics, iou, match_events
from .objective import (
    DistanceKernel,
    LossConfig,
    class_probabilities,
    episode_gradients,
    episode_loss,
    finite_diff_gradients,
    kernel_value,
    max_relative_error,
    softmax_cross_entropy,
    squared_distance,
)

REFERENCE_ROWS = [
    # (tp, fp, fn) -> percentages (precision, recall, fscore)
    ((33, 62, 197), (34.73, 14.34, 20.31)),
    ((21, 1333, 209), (1.55, 9.13, 2.65)),
    ((11, 1871, 219), (0.58, 4.78, 1.042)),
]
GRAD_CONFIGS = [
    (kind, kernel, sep)
    for kind in ("linear", "logistic")
    for kernel in ("euclidean", "cholesky", "rbf:0.01", "rbf:0.1")
    for sep in (False, True)
]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def percent_matches(value: float, expected_pct: float, tol_points: float = 0.01) -> bool:
    return abs(100.0 * value - expected_pct) <= tol_points


def metric_suite() -> tuple[bool, str]:
    worst = 0.0
    ok = True
    for (tp, fp, fn), expected in REFERENCE_ROWS:
        m = compute_metrics(tp, fp, fn)
        for got, want in zip((m.precision, m.recall, m.fscore), expected):
            worst = max(worst, abs(100 * got - want))
            ok &= percent_matches(got, want)
    return ok, f"max deviation {worst:.4f} points over {len(REFERENCE_ROWS)} rows"


def make_kernel(name: str, dim: int, rng: np.random.Generator) -> DistanceKernel:
    if name == "cholesky":
        return DistanceKernel.cholesky(dim, rng.normal(0.0, 0.3, (dim, dim)))
    if name.startswith("rbf:"):
        return DistanceKernel.rbf(float(name.split(":")[1]))
    return DistanceKernel.euclidean()


def random_episode(rng, in_dim=12, n_way=3, k_shot=2, n_query=2) -> Episode:
    n = n_way * (k_shot + n_query)
    X = rng.normal(size=(n, in_dim))
    return Episode(
        X[: n_way * k_shot], np.repeat(np.arange(n_way), k_shot),
        X[n_way * k_shot :], np.repeat(np.arange(n_way), n_query),
        list(range(n_way)),
    )


def gradient_check(kind, kernel_name, separation, trials=20, seed=0, gradient_fn=episode_gradients,
                   in_dim=12, out_dim=8, h=1e-5) -> float:
    """Worst entrywise relative error between ``gradient_fn`` and central differences."""
    rng = np.random.default_rng([seed, GRAD_CONFIGS.index((kind, kernel_name, separation))])
    cfg = LossConfig(use_separation=separation)
    worst = 0.0
    for _ in range(trials):
        model = EmbeddingModel(kind, rng.normal(0.0, 0.5, (out_dim, in_dim)))
        kernel = make_kernel(kernel_name, out_dim, rng)
        ep = random_episode(rng, in_dim)
        _, grads = gradient_fn(model, kernel, ep, cfg)
        num = finite_diff_gradients(model, kernel, ep, cfg, h=h)
        worst = max(worst, max_relative_error(grads.dA, num.dA))
        if kernel.variant == "cholesky":
            worst = max(worst, max_relative_error(grads.dL, num.dL))
    return worst


def gradient_suite(trials=20, gradient_fn=episode_gradients, tol=1e-4) -> tuple[bool, str]:
    worst = {c: gradient_check(*c, trials=trials, gradient_fn=gradient_fn) for c in GRAD_CONFIGS}
    bad = [c for c, e in worst.items() if not e <= tol]
    overall = max(worst.values())
    return not bad, f"max rel err {overall:.2e} over {len(GRAD_CONFIGS)} configs" + (f"; failing {bad}" if bad else "")


def brute_force_max_matching(edges: np.ndarray) -> int:
    """Exhaustive search over all matchings of a small bipartite graph."""
    n_p, n_g = edges.shape
    best = 0

    def go(i, used, size):
        nonlocal best
        if size + (n_p - i) <= best:
            return
        if i == n_p:
            best = max(best, size)
            return
        for j in range(n_g):
            if edges[i, j] and not used & (1 << j):
                go(i + 1, used | (1 << j), size + 1)
        go(i + 1, used, size)

    go(0, 0, 0)
    return best


def random_intervals(rng, n, horizon=10.0):
    starts = rng.uniform(0, horizon, size=n)
    lengths = rng.uniform(0.2, 3.0, size=n)
    return [(float(s), float(s + l)) for s, l in zip(starts, lengths)]


def matching_suite(instances=1000, seed=0, min_iou=0.3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(instances):
        preds = random_intervals(rng, int(rng.integers(0, 9)))
        gts = random_intervals(rng, int(rng.integers(0, 9)))
        edges = np.array([[iou(p, g) >= min_iou for g in gts] for p in preds], dtype=bool).reshape(len(preds), len(gts))
        if match_events(preds, gts, min_iou).tp != brute_force_max_matching(edges):
            mismatches += 1
    return mismatches == 0, f"{instances - mismatches}/{instances} instances agree"


def kernel_suite(seed=0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    chol = DistanceKernel.cholesky(16)
    eucl = DistanceKernel.euclidean()
    worst_chol = worst_rbf = worst_expand = 0.0
    for _ in range(50):
        x, y = rng.normal(size=16), rng.normal(size=16)
        sq = float(np.sum((x - y) ** 2))
        worst_chol = max(worst_chol, abs(squared_distance(chol, x, y) - squared_distance(eucl, x, y)))
        for gamma in (0.001, 0.01, 0.1, 0.5, 1.0):
            k = DistanceKernel.rbf(gamma)
            worst_rbf = max(worst_rbf, abs(squared_distance(k, x, y) - (2 - 2 * math.exp(-gamma * sq))))
        expanded = kernel_value(eucl, x, x) + kernel_value(eucl, y, y) - 2 * kernel_value(eucl, x, y)
        worst_expand = max(worst_expand, abs(expanded - sq))
    ok = worst_chol <= 1e-10 and worst_rbf <= 1e-12 and worst_expand <= 1e-9
    return ok, f"cholesky(L=I) {worst_chol:.1e}, rbf {worst_rbf:.1e}, expansion {worst_expand:.1e}"


def loss_suite(seed=0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    n_way = 10
    model = EmbeddingModel("logistic", np.zeros((8, 12)))
    ep = random_episode(rng, 12, n_way=n_way, k_shot=5, n_query=5)
    loss = episode_loss(model, DistanceKernel.euclidean(), ep)
    dists = rng.exponential(5.0, size=(200, n_way))
    row_err = float(np.max(np.abs(class_probabilities(dists).sum(axis=1) - 1)))
    ce_gap = abs(softmax_cross_entropy(np.zeros((4, n_way)), np.zeros(4, dtype=int)) - math.log(n_way))
    ok = abs(loss - math.log(10)) <= 1e-9 and row_err <= 1e-12 and ce_gap <= 1e-9
    return ok, f"uniform loss {loss:.9f} (ln 10 = {math.log(10):.9f}), row-sum err {row_err:.1e}"


def run_all(gradient_fn=episode_gradients, grad_trials=20, match_instances=1000) -> list[SuiteResult]:
    suites = [
        ("metric fixtures", metric_suite),
        ("gradients vs finite differences", lambda: gradient_suite(grad_trials, gradient_fn)),
        ("matching vs brute force", lambda: matching_suite(match_instances)),
        ("kernel identities", kernel_suite),
        ("loss anchors", loss_suite),
    ]
    results = []
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[SuiteResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.1f}s  {r.detail}")
    return "\n".join(lines)
