import json
import math

import numpy as np
import pytest

from protosed.corpus import EpisodeSpec, PatchPool, sample_episode
from protosed.embeddings import EmbeddingModel, EnsembleModel, embed, init_model
from protosed.errors import CheckpointError, EpisodeError
from protosed.objective import DistanceKernel, LossConfig, episode_gradients, episode_loss, project_cholesky
from protosed.trainer import (
    TrainConfig,
    checkpoint_text,
    child_rng,
    default_episodes_per_epoch,
    load_checkpoint,
    save_checkpoint,
    train,
    train_ensemble,
    validation_accuracy,
)

SPEC2 = EpisodeSpec(2, 5, 5)


def _blobs(n_per_class, n_classes=2, dim=20, spread=0.3, seed=0):
    """Gaussian blobs around well separated random centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0, 3.0, size=(n_classes, dim))
    X = np.concatenate([c + spread * rng.normal(size=(n_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(1, n_classes + 1), n_per_class)
    return PatchPool(X, y)


def _small_config(**kw):
    base = dict(kind="linear", out_dim=8, epochs=2, lr=1e-3, episode_spec=SPEC2, val_episodes=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_keeps_initial_weights():
    pool = _blobs(30)
    cfg = _small_config(lr=0.0)
    model, _, _ = train(pool, pool, cfg)
    init = init_model("linear", 8, child_rng(cfg.seed, "init"), in_dim=20)
    assert model.A.tobytes() == init.A.tobytes()


def test_same_seed_is_bit_reproducible(tmp_path):
    pool = _blobs(30)
    cfg = _small_config(kernel="cholesky")
    runs = []
    for name in ("a", "b"):
        model, kernel, report = train(pool, pool, cfg)
        save_checkpoint(model, kernel, tmp_path / f"{name}.json")
        runs.append(((tmp_path / f"{name}.json").read_bytes(), report.to_jsonl()))
    assert runs[0] == runs[1]


def test_different_seed_differs():
    pool = _blobs(30)
    a, _, _ = train(pool, pool, _small_config(seed=1))
    b, _, _ = train(pool, pool, _small_config(seed=2))
    assert not np.array_equal(a.A, b.A)


def test_separable_blobs_reach_high_accuracy():
    train_pool, val_pool = _blobs(60, seed=1), _blobs(20, seed=1)
    cfg = _small_config(epochs=15, lr=1e-3, val_episodes=100)
    _, _, report = train(train_pool, val_pool, cfg)
    assert len(report.epochs) == 15
    assert report.final_val_accuracy >= 0.95


def test_update_count_and_report_lines():
    pool = _blobs(25)  # 50 patches -> 50 // 20 = 2 episodes per epoch
    assert default_episodes_per_epoch(len(pool), SPEC2) == 2
    _, _, report = train(pool, pool, _small_config(epochs=3))
    assert report.updates == 6
    lines = report.to_jsonl().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]
    assert set(json.loads(lines[0])) == {"epoch", "mean_loss", "val_accuracy"}
    assert report.wall_seconds > 0


def test_episodes_per_epoch_floor_is_one():
    assert default_episodes_per_epoch(3, SPEC2) == 1


def test_cholesky_structure_survives_training():
    pool = _blobs(30)
    _, kernel, _ = train(pool, pool, _small_config(kernel="cholesky", lr=0.05, epochs=3))
    L = kernel.L
    assert np.all(np.diag(L) == 1.0)
    assert not np.triu(L, k=1).any()
    assert np.tril(L, k=-1).any()  # the strict lower triangle did move


def test_loss_non_increasing_for_tiny_steps():
    rng = np.random.default_rng(8)
    pool = _blobs(10, n_classes=3, dim=12, spread=2.0)
    ep = sample_episode(pool, EpisodeSpec(3, 5, 5), rng)
    model = init_model("logistic", 8, rng, in_dim=12)
    kernel = DistanceKernel.cholesky(8, rng.normal(0, 0.2, size=(8, 8)))
    prev = episode_loss(model, kernel, ep)
    for _ in range(50):
        _, g = episode_gradients(model, kernel, ep)
        model.A -= 1e-6 * g.dA
        kernel.L = project_cholesky(kernel.L - 1e-6 * g.dL)
        cur = episode_loss(model, kernel, ep)
        assert cur <= prev + 1e-12
        prev = cur


def test_empty_validation_pool_errors():
    with pytest.raises(EpisodeError):
        validation_accuracy(EmbeddingModel("linear", np.zeros((2, 3))), DistanceKernel.euclidean(), PatchPool.coerce([]))


def test_training_with_unusable_validation_pool_fails_before_work():
    pool = _blobs(20)
    tiny = PatchPool(np.zeros((3, 20)), [1, 1, 2])
    with pytest.raises(EpisodeError):
        train(pool, tiny, _small_config())


def test_identical_embeddings_give_chance_accuracy():
    pool = _blobs(20, n_classes=5)
    model = EmbeddingModel("logistic", np.zeros((4, 20)))
    acc = validation_accuracy(model, DistanceKernel.euclidean(), pool, EpisodeSpec(5, 5, 5), 100,
                              np.random.default_rng(0))
    se = math.sqrt(0.2 * 0.8 / (100 * 25))
    assert abs(acc - 0.2) <= 3 * se


def test_oracle_separable_pool_gives_perfect_accuracy():
    pool = _blobs(20, n_classes=4, spread=0.01)
    model = EmbeddingModel("linear", np.eye(20))
    assert validation_accuracy(model, DistanceKernel.euclidean(), pool, EpisodeSpec(4, 5, 5), 20) == 1.0


def test_validation_clips_n_way():
    pool = _blobs(20, n_classes=3, spread=0.01)
    model = EmbeddingModel("linear", np.eye(20))
    assert validation_accuracy(model, DistanceKernel.euclidean(), pool, EpisodeSpec(10, 5, 5), 5) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def test_ensemble_members_use_consecutive_seeds():
    pool = _blobs(30)
    cfg = _small_config(epochs=1)
    ens, reports = train_ensemble(pool, pool, cfg, member_dims=(4, 6))
    assert [m.out_dim for m, _ in ens.members] == [4, 6]
    assert all(m.kind == "logistic" for m, _ in ens.members)
    solo, _, _ = train(pool, pool, TrainConfig(kind="logistic", out_dim=6, epochs=1, lr=cfg.lr,
                                               episode_spec=SPEC2, val_episodes=10, seed=cfg.seed + 1))
    np.testing.assert_array_equal(ens.members[1][0].A, solo.A)
    assert len(reports) == 2


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("kernel", [DistanceKernel.euclidean(), DistanceKernel.rbf(0.1),
                                    DistanceKernel.cholesky(5, np.arange(25.0).reshape(5, 5) / 7)])
def test_checkpoint_save_load_save_is_byte_identical(tmp_path, kernel, rng):
    model = EmbeddingModel("logistic", rng.normal(size=(5, 9)))
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(model, kernel, p1)
    m2, k2 = load_checkpoint(p1)
    save_checkpoint(m2, k2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert k2.variant == kernel.variant


def test_checkpoint_document_shape(rng):
    doc = json.loads(checkpoint_text(EmbeddingModel("linear", rng.normal(size=(2, 3))), DistanceKernel.rbf(0.5)))
    assert doc["format_version"] == 1
    assert doc["kind"] == "linear" and doc["out_dim"] == 2 and doc["in_dim"] == 3
    assert len(doc["A"]) == 6
    assert doc["kernel"] == {"variant": "rbf", "gamma": 0.5}


def test_loaded_model_embeds_identically(tmp_path):
    rng = np.random.default_rng(21)
    model = init_model("logistic", 32, rng)
    save_checkpoint(model, DistanceKernel.euclidean(), tmp_path / "m.json")
    back, _ = load_checkpoint(tmp_path / "m.json")
    for _ in range(100):
        x = rng.normal(size=2176)
        assert embed(back, x).tobytes() == embed(model, x).tobytes()


def test_ensemble_checkpoint_round_trip(tmp_path, rng):
    ens = EnsembleModel([(EmbeddingModel("logistic", rng.normal(size=(3, 4))), DistanceKernel.euclidean()),
                         (EmbeddingModel("logistic", rng.normal(size=(5, 4))), DistanceKernel.rbf(0.01))])
    save_checkpoint(ens, None, tmp_path / "e.json")
    back, kernel = load_checkpoint(tmp_path / "e.json")
    assert kernel is None and isinstance(back, EnsembleModel)
    assert checkpoint_text(back) == (tmp_path / "e.json").read_text()


def test_truncated_checkpoint_rejected(tmp_path, rng):
    p = tmp_path / "t.json"
    save_checkpoint(EmbeddingModel("linear", rng.normal(size=(4, 4))), DistanceKernel.euclidean(), p)
    p.write_bytes(p.read_bytes()[:-20])
    with pytest.raises(CheckpointError, match="t.json"):
        load_checkpoint(p)


def test_version_mismatch_rejected(tmp_path, rng):
    p = tmp_path / "v.json"
    save_checkpoint(EmbeddingModel("linear", rng.normal(size=(2, 2))), DistanceKernel.euclidean(), p)
    doc = json.loads(p.read_text())
    doc["format_version"] = 2
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(p)


def test_missing_checkpoint_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="nothing.json"):
        load_checkpoint(tmp_path / "nothing.json")


def test_save_leaves_no_temporary(tmp_path, rng):
    save_checkpoint(EmbeddingModel("linear", rng.normal(size=(2, 2))), DistanceKernel.euclidean(), tmp_path / "c.json")
    assert [p.name for p in tmp_path.iterdir()] == ["c.json"]
