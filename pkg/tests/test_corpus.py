import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protosed import corpus
from protosed.audio import Patch
from protosed.corpus import (
    AnnotationRow,
    EpisodeSpec,
    LabeledPatch,
    PatchPool,
    balance_oversample,
    label_patches,
    parse_annotations,
    sample_episode,
    split_train_val,
)
from protosed.errors import AnnotationError, DataError, EpisodeError

HOP_S = 256 / 22050
PATCH_S = 17 * HOP_S


# ---------------------------------------------------------------- parsing


def test_single_row_maps_directly():
    rows = parse_annotations("Audiofilename,Starttime,Endtime,CLASS_A\na.wav,1.0,2.0,POS\n")
    assert rows == [AnnotationRow("a.wav", 1.0, 2.0, {"CLASS_A": "POS"})]


def test_start_equal_end_rejected_with_line_number():
    with pytest.raises(AnnotationError, match="line 3"):
        parse_annotations("Audiofilename,Starttime,Endtime,Q\na.wav,0,1,POS\na.wav,2.0,2.0,POS\n")


def test_two_class_columns_preserved():
    rows = parse_annotations("Audiofilename,Starttime,Endtime,A,B\nx.wav,0.5,0.7,POS,UNK\n")
    assert rows[0].labels == {"A": "POS", "B": "UNK"}


def test_missing_header_column_named():
    with pytest.raises(AnnotationError, match="Endtime"):
        parse_annotations("Audiofilename,Starttime,Q\na.wav,1,POS\n")


def test_non_numeric_time_rejected():
    with pytest.raises(AnnotationError, match="line 2"):
        parse_annotations("Audiofilename,Starttime,Endtime,Q\na.wav,abc,1,POS\n")


def test_unknown_token_rejected():
    with pytest.raises(AnnotationError, match="MAYBE"):
        parse_annotations("Audiofilename,Starttime,Endtime,Q\na.wav,0,1,MAYBE\n")


# ---------------------------------------------------------------- labelling


def _patch_at(start_frame):
    return Patch(np.full((17, 128), float(start_frame)), start_frame)


def _row(start, end, cls="A", token="POS"):
    return AnnotationRow("r.wav", start, end, {cls: token})


def test_patch_inside_event_gets_its_class():
    [lp] = label_patches([_patch_at(100)], [_row(100 * HOP_S - 0.1, 117 * HOP_S + 0.1)])
    assert lp.class_id == 1


def test_patch_far_from_events_is_background():
    [lp] = label_patches([_patch_at(0)], [_row(50.0, 51.0)])
    assert lp.class_id == 0


@pytest.mark.parametrize("frac, expected", [(0.5, 1), (0.49, 0), (0.51, 1)])
def test_half_overlap_boundary_inclusive(frac, expected):
    # a patch at frame 0 spans [0, PATCH_S], so the overlap is exactly frac * PATCH_S
    [lp] = label_patches([_patch_at(0)], [_row(0.0, frac * PATCH_S)])
    assert lp.class_id == expected


def test_competing_classes_resolved_by_overlap_then_id():
    t0 = 10 * HOP_S
    rows = [_row(t0, t0 + 0.6 * PATCH_S, "A"), _row(t0 + 0.3 * PATCH_S, t0 + 2 * PATCH_S, "B")]
    [lp] = label_patches([_patch_at(10)], rows)
    assert lp.class_id == 2  # B covers 0.7 of the patch, A 0.6
    rows = [_row(t0, t0 + PATCH_S, "A"), _row(t0, t0 + PATCH_S, "B")]
    [lp] = label_patches([_patch_at(10)], rows)
    assert lp.class_id == 1


def test_unk_only_patches_dropped():
    t0 = 10 * HOP_S
    out = label_patches([_patch_at(10), _patch_at(1000)], [_row(t0, t0 + 0.1, "A", "UNK")])
    assert [lp.source[1] for lp in out] == [1000]


@given(st.permutations(list(range(6))))
@settings(max_examples=30, deadline=None)
def test_labels_independent_of_row_order(order):
    rows = [_row(0.1 + 0.4 * i, 0.4 + 0.4 * i, "AB"[i % 2]) for i in range(6)]
    patches = [_patch_at(s) for s in range(0, 200, 8)]
    base = [lp.class_id for lp in label_patches(patches, rows)]
    permuted = [lp.class_id for lp in label_patches(patches, [rows[i] for i in order])]
    assert base == permuted


# ---------------------------------------------------------------- pools


def _pool(counts, dim=4, rng=None):
    rng = rng or np.random.default_rng(0)
    feats, ids = [], []
    for c, n in counts.items():
        feats.append(rng.normal(size=(n, dim)) + 10 * c)
        ids += [c] * n
    return PatchPool(np.concatenate(feats), ids)


def test_oversample_minority():
    out = balance_oversample(_pool({1: 3, 2: 1}), np.random.default_rng(0))
    assert out.counts() == {1: 3, 2: 3}


def test_oversample_leaves_background_and_originals():
    pool = _pool({0: 50, 1: 3, 2: 7})
    out = balance_oversample(pool, np.random.default_rng(0))
    assert out.counts() == {0: 50, 1: 7, 2: 7}
    np.testing.assert_array_equal(out.features[: len(pool)], pool.features)
    # duplicates are exact copies of existing rows of their own class
    for row, cid in zip(out.features[len(pool):], out.class_ids[len(pool):]):
        assert any(np.array_equal(row, r) for r in pool.features[pool.class_ids == cid])


def test_oversample_balanced_pool_unchanged():
    pool = _pool({1: 4, 2: 4})
    assert balance_oversample(pool, np.random.default_rng(0)).counts() == {1: 4, 2: 4}


def test_oversample_deterministic_under_seed():
    pool = _pool({1: 9, 2: 2, 3: 5})
    a = balance_oversample(pool, np.random.default_rng(42))
    b = balance_oversample(pool, np.random.default_rng(42))
    np.testing.assert_array_equal(a.features, b.features)


def test_oversample_empty_pool_errors():
    with pytest.raises(DataError):
        balance_oversample([], np.random.default_rng(0))


def test_pool_accepts_labeled_patch_lists():
    items = [LabeledPatch(np.ones(3) * i, i % 2, ("r", i)) for i in range(4)]
    pool = PatchPool.coerce(items)
    assert len(pool) == 4
    assert pool[3].class_id == 1 and pool[3].source == ("r", 3)


def test_split_counts_use_ceiling():
    train, val = split_train_val(_pool({1: 10, 2: 7}), 0.2, np.random.default_rng(0))
    assert val.counts() == {1: 2, 2: math.ceil(0.2 * 7)}
    assert train.counts() == {1: 8, 2: 5}


def test_split_is_a_partition():
    pool = _pool({0: 13, 1: 10, 2: 7})
    train, val = split_train_val(pool, 0.2, np.random.default_rng(3))
    rows = lambda p: {tuple(r) for r in p.features}
    assert rows(train) | rows(val) == rows(pool)
    assert not rows(train) & rows(val)
    assert len(train) + len(val) == len(pool)


def test_split_deterministic_under_seed():
    pool = _pool({1: 10, 2: 10})
    a = split_train_val(pool, 0.2, np.random.default_rng(5))
    b = split_train_val(pool, 0.2, np.random.default_rng(5))
    np.testing.assert_array_equal(a[1].features, b[1].features)


def test_singleton_class_stays_in_train_with_warning():
    with pytest.warns(UserWarning, match="single patch"):
        train, val = split_train_val(_pool({1: 1, 2: 5}), 0.2, np.random.default_rng(0))
    assert train.counts()[1] == 1 and 1 not in val.counts()


def test_split_fraction_validated():
    with pytest.raises(ValueError):
        split_train_val(_pool({1: 5}), 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------- episodes


def test_exhaustive_episode_uses_every_patch_once():
    pool = _pool({c: 10 for c in range(10)})
    ep = sample_episode(pool, EpisodeSpec(10, 5, 5), np.random.default_rng(0))
    used = np.concatenate([ep.support_idx, ep.query_idx])
    assert sorted(used.tolist()) == list(range(100))
    assert len(ep.support) == 50 and len(ep.query) == 50


def test_too_few_classes_errors():
    pool = _pool({c: 10 for c in range(9)})
    with pytest.raises(EpisodeError, match="need 10 classes"):
        sample_episode(pool, EpisodeSpec(10, 5, 5), np.random.default_rng(0))


def test_deficient_class_named():
    pool = _pool({0: 10, 1: 10, 2: 3})
    with pytest.raises(EpisodeError, match="2: 3"):
        sample_episode(pool, EpisodeSpec(3, 5, 5), np.random.default_rng(0))


def test_support_query_disjoint_over_many_draws():
    pool = _pool({c: 14 for c in range(6)})
    rng = np.random.default_rng(11)
    spec = EpisodeSpec(4, 5, 5)
    for _ in range(1000):
        ep = sample_episode(pool, spec, rng)
        assert not set(ep.support_idx.tolist()) & set(ep.query_idx.tolist())
        assert len(set(ep.class_map)) == 4
        # episode-local labels map onto the drawn global classes
        for idx, y in zip(ep.support_idx, ep.support_y):
            assert pool.class_ids[idx] == ep.class_map[y]
        for idx, y in zip(ep.query_idx, ep.query_y):
            assert pool.class_ids[idx] == ep.class_map[y]


def test_episode_spec_validated():
    with pytest.raises(ValueError):
        EpisodeSpec(1, 5, 5)
    with pytest.raises(ValueError):
        EpisodeSpec(2, 0, 5)


def test_patch_cache_round_trip(tmp_path):
    pool = PatchPool(np.arange(12.0).reshape(3, 4), [0, 2, 1], [("a", 0), ("a", 8), ("b", 16)])
    path = tmp_path / "pool.bin"
    corpus.write_pool(pool, path, ["bg", "x", "y"])
    head, payload = path.read_bytes().split(b"\n", 1)
    assert len(payload) == 3 * 4 * 4 + 3 * 4
    back, names = corpus.read_pool(path)
    np.testing.assert_array_equal(back.features, pool.features)
    np.testing.assert_array_equal(back.class_ids, pool.class_ids)
    assert back.sources == pool.sources and names == ["bg", "x", "y"]
