import numpy as np
import pytest

from bayes_triplet import (
    GaussianEmbedding,
    MiningCache,
    SyntheticDataset,
    TrainConfig,
    TrainingDivergedError,
    generate_ood_inputs,
    generate_synthetic_dataset,
    init_encoder,
    mine_hard_negatives,
    recall_at_k,
    refresh_cache,
    train,
    train_baseline,
)
from bayes_triplet.encoder import flatten
from bayes_triplet.trainer import (
    HISTORY_FIELDS,
    Adam,
    History,
    batch_loss_and_grads,
    embed_arrays,
    evaluate_split,
    hard_negative_positions,
)

SMALL = dict(epochs=3, embed_dim=6, hidden=(8,), var_hidden=4, cache_size=40, cache_refresh=5, batch_triplets=8)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic_dataset(n_classes=8, per_class=10, input_dim=6, seed=1)


def separable_dataset():
    rng = np.random.default_rng(0)
    centres = 5.0 * np.eye(4, 6)
    labels = np.repeat(np.arange(4), 6)
    inputs = centres[labels] + 0.01 * rng.standard_normal((24, 6))
    return SyntheticDataset(inputs, labels, np.zeros(24), np.arange(2), np.arange(2, 4))


def cache_of(means, labels):
    means = np.asarray(means, dtype=float)
    return MiningCache(np.arange(len(labels)), np.asarray(labels), means, np.full(len(labels), 0.1))


class TestDataset:
    def test_split_disjoint_and_sizes(self):
        ds = generate_synthetic_dataset(n_classes=128, per_class=40, input_dim=32)
        assert len(ds) == 5120 and ds.input_dim == 32 and ds.n_classes == 128
        assert np.intersect1d(ds.train_classes, ds.test_classes).size == 0
        assert ds.train_classes.size == ds.test_classes.size == 64

    def test_deterministic(self):
        a = generate_synthetic_dataset(n_classes=6, per_class=3, input_dim=4, seed=5)
        b = generate_synthetic_dataset(n_classes=6, per_class=3, input_dim=4, seed=5)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert a.to_csv() == b.to_csv()

    def test_zero_noise_isotropic_equals_centres(self):
        ds = generate_synthetic_dataset(n_classes=5, per_class=4, input_dim=3, noise_profile=(0, 0), noise_model="isotropic")
        for c in range(5):
            rows = ds.inputs[ds.labels == c]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_background_blend(self):
        # noise 1 gives pure background plus jitter, unrelated to the class centre
        ds = generate_synthetic_dataset(n_classes=40, per_class=20, input_dim=16, noise_profile=(1, 1))
        centre_norm = np.linalg.norm(ds.inputs, axis=1).mean()
        assert centre_norm < 0.6 * np.sqrt(16)

    def test_noise_in_profile(self):
        ds = generate_synthetic_dataset(n_classes=4, per_class=50, input_dim=2, noise_profile=(0.2, 0.7))
        assert ds.noise.min() >= 0.2 and ds.noise.max() <= 0.7

    @pytest.mark.parametrize(
        "kwargs", [dict(n_classes=3), dict(per_class=1), dict(noise_profile=(0.5, 0.1)), dict(noise_model="salt")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(**({"input_dim": 3} | kwargs))

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SyntheticDataset(np.zeros((4, 1)), np.array([0, 0, 1, 1]), np.zeros(4), np.array([0]), np.array([0, 1]))

    def test_ood_inputs(self):
        x, noise = generate_ood_inputs(50, 7, seed=2)
        assert x.shape == (50, 7) and noise.shape == (50,)
        y, _ = generate_ood_inputs(50, 7, seed=2)
        np.testing.assert_array_equal(x, y)

    def test_items_iterator(self, small_data):
        items = list(small_data.items("test"))
        assert len(items) == small_data.split_indices("test").size
        assert all(label in small_data.test_classes for _, label, _ in items)


class TestConfig:
    def test_defaults_round_trip(self):
        c = TrainConfig()
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.kind == "gauss" and c.prior == "gaussian_unit_sphere"
        assert TrainConfig(loss="bayes-vmf").prior == "uniform_sphere"

    def test_mining_margin_falls_back_to_margin(self):
        assert TrainConfig(margin=0.3).resolved_mining_margin == 0.3
        assert TrainConfig(margin=0.3, mining_margin=0.0).resolved_mining_margin == 0.0

    @pytest.mark.parametrize(
        "kwargs", [dict(loss="l2"), dict(lr=0), dict(lr_decay=1.5), dict(margin=-1), dict(epochs=0), dict(negative_reduction="max")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_history_csv(self):
        h = History()
        h.append(epoch=1, loss=0.5, nll=0.4, kl=100.0, val_r1=0.25, lr=1e-3)
        lines = h.to_csv().splitlines()
        assert lines[0] == ",".join(HISTORY_FIELDS) and lines[1].startswith("1,0.5,0.4,100.0,0.25")
        assert h.column("val_r1") == [0.25]


class TestMining:
    def test_far_negatives_give_nothing(self):
        cache = cache_of([[100.0, 0.0], [0.0, 100.0]], [1, 2])
        a = GaussianEmbedding([0.0, 0.0], 0.1)
        p = GaussianEmbedding([0.1, 0.0], 0.1)
        assert mine_hard_negatives(cache, a, p, 0, k=5, margin=0.2) == []

    def test_coincident_negative_included(self):
        cache = cache_of([[0.0, 0.0], [50.0, 0.0]], [1, 2])
        a = GaussianEmbedding([0.0, 0.0], 0.1)
        p = GaussianEmbedding([1.0, 0.0], 0.1)
        out = mine_hard_negatives(cache, a, p, 0, k=5)
        assert len(out) == 1 and np.all(out[0].negative.mean == 0.0)

    def test_same_class_never_mined(self):
        cache = cache_of([[0.0, 0.0], [0.1, 0.0]], [0, 0])
        a = GaussianEmbedding([0.0, 0.0], 0.1)
        assert mine_hard_negatives(cache, a, GaussianEmbedding([3.0, 0.0], 0.1), 0, k=5) == []

    def test_violation_and_k(self, rng):
        means = rng.standard_normal((40, 3))
        labels = rng.integers(0, 4, 40)
        cache = cache_of(means, labels)
        a, p = rng.standard_normal(3), rng.standard_normal(3)
        out = mine_hard_negatives(cache, GaussianEmbedding(a, 0.1), GaussianEmbedding(p, 0.1), 0, k=5, margin=0.3)
        assert len(out) <= 5
        d_ap = ((a - p) ** 2).sum()
        for t in out:
            assert d_ap >= ((a - t.negative.mean) ** 2).sum() - 0.3

    def test_nearest_first(self):
        cache = cache_of([[3.0], [1.0], [2.0], [0.5]], [1, 1, 0, 2])
        pos = hard_negative_positions(cache, [[0.0]], [[10.0]], [0], k=2, margin=0.0)[0]
        assert pos.tolist() == [3, 1]


class TestCache:
    def test_refresh_full(self, small_data):
        params = init_encoder("gauss", 6, 6, hidden=(8,))
        pool = small_data.split_indices("train")
        cache = refresh_cache(None, params, small_data, pool.size, seed=0)
        assert sorted(cache.ids.tolist()) == pool.tolist() and cache.staleness == 0
        assert cache.means.shape == (pool.size, 5)

    def test_capped_with_warning(self, small_data):
        params = init_encoder("gauss", 6, 6, hidden=(8,))
        with pytest.warns(RuntimeWarning, match="capped"):
            cache = refresh_cache(None, params, small_data, 10_000, seed=0)
        assert len(cache) == small_data.split_indices("train").size

    def test_seeded(self, small_data):
        params = init_encoder("gauss", 6, 6, hidden=(8,))
        a = refresh_cache(None, params, small_data, 12, seed=4)
        b = refresh_cache(None, params, small_data, 12, seed=4)
        np.testing.assert_array_equal(a.ids, b.ids)


class TestLoss:
    def test_kl_weighting(self, rng):
        params = init_encoder("gauss", 4, 5, hidden=(6,), seed=0)
        x = rng.standard_normal((3, 4))
        loss, nll, kl, _ = batch_loss_and_grads(params, x, [0], [1], [2], 0.0, 0.5)
        assert loss == pytest.approx(nll + 0.5 * kl) and kl > 0

    def test_hinge_has_no_kl(self, rng):
        params = init_encoder("hinge", 4, 5, hidden=(6,), seed=0)
        _, _, kl, _ = batch_loss_and_grads(params, rng.standard_normal((3, 4)), [0], [1], [2], 0.1, 0.5)
        assert kl == 0.0

    def test_fixed_triplet_nll_decreases(self, rng):
        params = init_encoder("gauss", 4, 5, hidden=(6,), seed=1)
        x = rng.standard_normal((3, 4))
        opt = Adam(params.weights, 1e-2)
        values = []
        for _ in range(100):
            _, nll, _, grads = batch_loss_and_grads(params, x, [0], [1], [2], 0.0, 0.0)
            values.append(nll)
            opt.step(params.weights, grads)
        assert values[-1] < values[0]


class TestTrain:
    def test_history_and_shapes(self, small_data):
        params, history = train(TrainConfig(**SMALL), small_data)
        assert history.column("epoch") == [1, 2, 3]
        lr = history.column("lr")
        assert lr[1] == pytest.approx(lr[0] * 0.99)
        assert all(np.isfinite(history.column("loss")))
        means, variances = embed_arrays(params, small_data.inputs[:4])
        assert means.shape == (4, 5) and np.all(variances > 0)

    @pytest.mark.parametrize("loss", ["bayes-gauss", "bayes-vmf", "hinge"])
    def test_deterministic(self, small_data, loss):
        cfg = TrainConfig(loss=loss, **SMALL)
        (p1, h1), (p2, h2) = train(cfg, small_data), train(cfg, small_data)
        np.testing.assert_array_equal(flatten(p1.weights), flatten(p2.weights))
        assert h1.to_csv() == h2.to_csv()

    @pytest.mark.parametrize("trainer", [train, train_baseline])
    def test_separable_reaches_perfect_recall(self, trainer):
        ds = separable_dataset()
        params, _ = trainer(TrainConfig(**(SMALL | dict(epochs=10, cache_size=12))), ds)
        assert recall_at_k(evaluate_split(params, ds, "train", k=1), 1) == 1.0

    def test_baseline_has_no_variance(self, small_data):
        params, _ = train_baseline(TrainConfig(**SMALL), small_data)
        assert params.kind == "hinge" and params.output_dim == SMALL["embed_dim"]
        _, variances = embed_arrays(params, small_data.inputs)
        assert np.all(variances == 0)

    def test_equal_output_budget(self, small_data):
        bayes, _ = train(TrainConfig(**(SMALL | dict(epochs=1))), small_data)
        hinge, _ = train_baseline(TrainConfig(**(SMALL | dict(epochs=1))), small_data)
        assert bayes.embed_dim + 1 == hinge.embed_dim == SMALL["embed_dim"]

    def test_divergence_reported(self, small_data):
        bad = SyntheticDataset(
            np.where(small_data.labels[:, None] == small_data.train_classes[0], np.nan, small_data.inputs),
            small_data.labels,
            small_data.noise,
            small_data.train_classes,
            small_data.test_classes,
        )
        # NaN inputs are the point of this test
        with pytest.raises(TrainingDivergedError) as info, np.errstate(invalid="ignore"):
            train(TrainConfig(**SMALL), bad)
        assert info.value.params is not None and info.value.history is not None

    def test_hardest_reduction_runs(self, small_data):
        _, h = train(TrainConfig(negative_reduction="hardest", **SMALL), small_data)
        assert len(h.rows) == 3
