import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibpd import analysis as A
from ibpd.model import ModelConfig, build_model, one_hot
from ibpd.tensor import no_grad


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(input_dim=12, task_classes=3, K=6, conf_hidden=(10,), task_hidden=(10,), dec_hidden=(10,), init_seed=2))


@pytest.fixture(scope="module")
def x():
    return np.random.default_rng(0).normal(size=(30, 12))


class TestRepresentations:
    def test_shapes(self, model, x):
        r = A.extract_representations(model, x, seed=1)
        assert r.y_t.shape == (30, 10)
        assert r.y_c.shape == r.Z.shape == (30, 6)
        assert r.task_pred.shape == (30,) and r.seed == 1

    def test_deterministic(self, model, x):
        a = A.extract_representations(model, x, seed=3)
        b = A.extract_representations(model, x, seed=3)
        np.testing.assert_array_equal(a.y_c, b.y_c)
        np.testing.assert_array_equal(a.Z, b.Z)

    def test_gated_columns_are_zero(self, model, x):
        r = A.extract_representations(model, x, seed=0)
        assert set(np.unique(r.Z)) <= {0.0, 1.0}
        assert np.all(r.y_c[r.Z == 0] == 0.0)

    def test_cvae_has_no_z(self, x):
        cvae = build_model(ModelConfig(input_dim=12, task_classes=3, K=6, kind="c-vae", conf_hidden=(10,), task_hidden=(10,), dec_hidden=(10,)))
        assert A.extract_representations(cvae, x).Z is None


class TestProbe:
    def test_copied_column_is_perfect(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 5, 400)
        feats = np.column_stack([rng.normal(size=400), y, rng.normal(size=400)])
        assert A.probe_accuracy(feats, y) == 1.0

    def test_noise_is_chance(self):
        rng = np.random.default_rng(1)
        y = np.arange(4000) % 10
        acc = A.probe_accuracy(rng.normal(size=(4000, 8)), y)
        assert abs(acc - 0.1) < 0.03

    def test_single_class(self):
        with pytest.raises(ValueError):
            A.probe_accuracy(np.zeros((10, 2)), np.zeros(10))

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(2)
        y = rng.integers(0, 3, 300)
        X = rng.normal(size=(300, 4)) + y[:, None]
        perm = rng.permutation(100)
        a = A.probe_accuracy(X[:200], y[:200], test_features=X[200:], test_targets=y[200:])
        b = A.probe_accuracy(X[:200], y[:200], test_features=X[200:][perm], test_targets=y[200:][perm])
        assert a == b

    def test_nonlinear_probe_solves_xor(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(600, 2))
        y = (X[:, 0] * X[:, 1] > 0).astype(int)
        linear = A.probe_accuracy(X, y)
        mlp = A.probe_accuracy(X, y, A.ProbeConfig(nonlinear=True, max_iter=600))
        assert linear < 0.7 < 0.9 < mlp

    def test_report(self):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 4, 200)
        report = A.probe({"good": np.eye(4)[y], "bad": rng.normal(size=(200, 3))}, {"task": y})
        assert report.get("good", "task") == 1.0
        assert report.chance == {"task": 0.25}
        lines = report.to_csv().splitlines()
        assert lines[0] == "representation,task" and lines[-1] == "random,0.25"


class TestReconBreakdown:
    @pytest.fixture
    def signals(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(20, 8))
        flags = np.arange(20) % 4 == 0
        x[~flags, :2] = 0.0
        return x, flags, np.array([0, 1])

    def test_perfect(self, signals):
        x, flags, idx = signals
        b = A.breakdown_from_reconstruction(x, x.copy(), flags, idx)
        assert b.as_row() == [0.0, 0.0, 0.0, 0.0]

    def test_zero_stub_on_clean_examples(self, signals):
        x, flags, idx = signals
        b = A.breakdown_from_reconstruction(x, np.zeros_like(x), flags, idx)
        assert b.artifact_non_stimulus == 0.0
        assert b.artifact_stimulus > 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        x, recon = rng.normal(size=(2, 25, 6))
        flags = rng.uniform(size=25) < 0.4
        flags[:2] = [True, False]
        b = A.breakdown_from_reconstruction(x, recon, flags, np.array([1, 4]))
        mix = b.fraction_stimulus * b.artifact_stimulus + (1 - b.fraction_stimulus) * b.artifact_non_stimulus
        assert abs(mix - b.artifact_all) < 1e-9

    def test_empty_group_absent(self, signals):
        x, _, idx = signals
        b = A.breakdown_from_reconstruction(x, x, np.zeros(20, dtype=bool), idx)
        assert b.artifact_stimulus is None and b.artifact_non_stimulus == 0.0

    def test_model_path(self, model, x):
        flags = np.arange(30) % 2 == 0
        b = A.recon_breakdown(model, x, flags, np.array([0, 5]), seed=2)
        recon = A.reconstruct(model, x, seed=2)
        assert b.whole == pytest.approx(np.mean((recon - x) ** 2), rel=1e-12)


class TestFeatureStats:
    def test_all_ones(self):
        st_ = A.active_feature_stats(np.ones((4, 7)))
        assert st_["all"].mode == 7 and st_["all"].mean == 7.0

    def test_zeros(self):
        assert A.active_feature_stats(np.zeros((4, 7)))["all"].mean == 0.0

    def test_groups(self):
        Z = np.zeros((6, 5))
        Z[:3, :2] = 1
        Z[3:, :4] = 1
        out = A.active_feature_stats(Z, np.array([0, 0, 0, 1, 1, 1], dtype=bool))
        assert (out[0].mode, out[1].mode) == (2, 4)
        assert out["all"].histogram.tolist() == [0, 0, 3, 0, 3, 0]

    def test_rejects_nonbinary(self):
        with pytest.raises(ValueError):
            A.active_feature_stats(np.full((2, 2), 0.5))


class TestTriggeringUnits:
    def test_planted_unit(self):
        rng = np.random.default_rng(0)
        flags = rng.uniform(size=500) < 0.5
        Z = (rng.uniform(size=(500, 8)) < 0.5).astype(float)
        Z[:, 3] = flags
        rep = A.find_triggering_units(Z, flags)
        assert rep.selected == [3] and rep.gap[3] == 1.0 and rep.ranking[0] == 3

    def test_random_units_not_selected(self):
        rng = np.random.default_rng(1)
        flags = rng.uniform(size=10_000) < 0.5
        rep = A.find_triggering_units(rng.uniform(size=(10_000, 50)) < 0.3, flags)
        assert rep.selected == [] and len(rep.ranking) == 50

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_family(self, seed):
        rng = np.random.default_rng(seed)
        n = 2000
        flags = np.arange(n) < n // 2
        gaps = {0: 1.0, 1: 0.95, 2: 0.5, 3: 0.3, 4: 0.0}
        Z = np.zeros((n, 5))
        for k, g in gaps.items():
            # group 1 fires with rate (1 + g) / 2, group 0 with (1 - g) / 2, exact counts
            on1, on0 = int(round((1 + g) / 2 * n / 2)), int(round((1 - g) / 2 * n / 2))
            Z[rng.permutation(n // 2)[:on0], k] = 1
            Z[n // 2 + rng.permutation(n // 2)[:on1], k] = 1
        rep = A.find_triggering_units(Z, flags)
        assert sorted(rep.selected) == [0, 1]

    def test_needs_both_groups(self):
        with pytest.raises(ValueError):
            A.find_triggering_units(np.ones((3, 2)), np.ones(3, dtype=bool))

    def test_csv(self):
        rep = A.find_triggering_units(np.array([[1, 0], [0, 0]]), np.array([True, False]))
        lines = rep.to_csv().splitlines()
        assert lines[0].startswith("rank,unit") and lines[1].split(",")[1] == "0"


class TestAblation:
    def test_empty_ops_is_reconstruction(self, model, x):
        a = A.ablate_generate(model, x, [], seed=4)
        with no_grad():
            from ibpd.model import Noise

            b = model.reconstruct(x, Noise.draw(np.random.default_rng(4), 30, 6))
        assert a.tobytes() == b.tobytes()

    def test_all_off_depends_only_on_label(self, model, x):
        y = np.arange(30) % 3
        out = A.ablate_generate(model, x, "all-off", y_t=y, seed=1)
        with no_grad():
            expected = model.decode(np.zeros((30, 6)), one_hot(y, 3)).data
        np.testing.assert_array_equal(out, expected)

    def test_forced_on_uses_a(self, model, x):
        out_on = A.ablate_generate(model, x, [(0, "on")], seed=0)
        out_off = A.ablate_generate(model, x, [(0, "off")], seed=0)
        assert not np.array_equal(out_on, out_off)

    @pytest.mark.parametrize("ops", [[(6, "off")], [(-1, "off")]])
    def test_out_of_range(self, model, x, ops):
        with pytest.raises(IndexError):
            A.ablate_generate(model, x, ops)

    def test_bad_state(self, model, x):
        with pytest.raises(ValueError):
            A.ablate_generate(model, x, [(0, "maybe")])

    def test_parse(self):
        assert A.parse_unit_ops("3,5:on", 8) == [(3, "off"), (5, "on")]
        assert A.parse_unit_ops("all-on", 2) == [(0, "on"), (1, "on")]


class TestSwap:
    def test_identical_sources(self, model, x):
        swapped = A.swap_representations(model, x, x, seed=6)
        np.testing.assert_array_equal(swapped, A.reconstruct(model, x, seed=6))

    def test_grid_shape_and_cells(self, model, x):
        grid = A.swap_grid(model, x[:10], x[10:14], seed=0)
        assert grid.shape == (4, 10, 12)
        np.testing.assert_allclose(grid[2, 7], A.swap_representations(model, x[10:14], x[:10][[7, 7, 7, 7]], seed=0)[2])


class TestColorMetrics:
    def test_white_has_zero_dominance(self):
        img = np.tile(np.random.default_rng(0).uniform(size=(1, 1, 16)), (1, 3, 1)).reshape(1, -1)
        assert A.channel_dominance(img)[0] == 0.0

    def test_single_channel(self):
        gray = np.random.default_rng(1).uniform(size=16)
        img = np.zeros((1, 3, 16))
        img[0, 2] = gray
        img = img.reshape(1, -1)
        assert A.channel_dominance(img)[0] == pytest.approx(gray.mean())
        assert A.dominant_channel(img)[0] == 2
