import numpy as np
import pytest

from survshape.dataio import cohort_from_subjects
from survshape.synthdata import CohortSpec, generate_cohort, generate_tabular
from survshape.trainer import (
    AdamState,
    ExperimentConfig,
    NonFiniteGradientError,
    SurvivalData,
    TrainConfig,
    adam_step,
    fit,
    hyperparameter_search,
    _val_c_index,
    parse_config_text,
    prepare,
    repeat_seeds,
    run_experiment,
    search_candidates,
    split_dataset,
)
from survshape.widedeep import ModelConfig, WideDeepModel

from oracles import newton_cox

TINY = dict(point_widths=(8, 16), transform_fc=(8,), global_widths=(8,))


def tiny_cohort(n=60, k=16, seed=0, **kw):
    return cohort_from_subjects(generate_cohort(CohortSpec(n_subjects=n, points_per_cloud=k, rng_seed=seed, **kw)))


def wide_fit(x, y, d, epochs=400, lr=0.02):
    model = WideDeepModel(ModelConfig(variant="wide", n_wide=x.shape[1]))
    cfg = TrainConfig(epochs=epochs, learning_rate=lr, lr_schedule="constant", weight_decay=0.0, batch_mode="full")
    _, report = fit(model, SurvivalData(y, d, x), cfg)
    return model.w_wide.data.copy(), report


class TestAdam:
    @pytest.mark.parametrize("g", [3.0, -0.02, 1e4])
    def test_first_step_is_sign(self, g):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([g])}, AdamState(), lr=0.1)
        assert p["w"][0] == pytest.approx(1.0 - 0.1 * np.sign(g), abs=1e-6)

    def test_zero_gradient(self):
        p = {"w": np.array([0.5, -2.0])}
        state = AdamState()
        for _ in range(10):
            adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"], [0.5, -2.0])

    def test_non_finite_names_parameter(self):
        with pytest.raises(NonFiniteGradientError, match="layer.weight"):
            adam_step({"layer.weight": np.zeros(2)}, {"layer.weight": np.array([np.nan, 0])}, AdamState(), lr=0.1)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(5, 3))
        p = {"w": np.zeros(3)}
        state = AdamState()
        m = v = np.zeros(3)
        w = np.zeros(3)
        for t, g in enumerate(grads, start=1):
            adam_step(p, {"w": g}, state, lr=0.01, beta1=0.8)
            m = 0.8 * m + 0.2 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-14)


class TestConfig:
    def test_step_schedule(self):
        cfg = TrainConfig()
        assert [cfg.lr_at(e) for e in (0, 39, 40, 80, 119)] == [1e-3, 1e-3, 5e-4, 2.5e-4, 2.5e-4]

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"split_fractions": (0.5, 0.3, 0.1)}, {"batch_mode": "huge"}, {"beta1": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_parse_file(self):
        cf = parse_config_text(
            "[train]\nepochs = 5\nbatch_mode = full\nsplit_fractions = 0.6,0.2,0.2\n"
            "[model]\npoint_widths = 8,16\nuse_transform = no\n"
            "[data]\npoints = 32\n"
            "[search]\nlearning_rate = 0.001, 0.01\npoint_widths = 8,16; 16,32\nstrategy = grid\n"
        )
        exp = cf.experiment
        assert exp.train.epochs == 5 and exp.train.batch_mode == "full"
        assert exp.train.split_fractions == (0.6, 0.2, 0.2)
        assert exp.point_widths == (8, 16) and exp.use_transform is False
        assert cf.points == 32
        assert cf.search_space == {"learning_rate": [0.001, 0.01], "point_widths": [(8, 16), (16, 32)]}

    @pytest.mark.parametrize("text", ["[train]\nepoch = 3\n", "[optim]\nlr = 1\n", "[train]\nepochs = many\n"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            parse_config_text(text)


class TestSplit:
    def test_sizes(self):
        tr, va, te = split_dataset(np.ones(100, dtype=int), (0.8, 0.1, 0.1), seed=0)
        assert (tr.size, va.size, te.size) == (80, 10, 10)

    def test_partition(self):
        events = np.random.default_rng(0).integers(0, 2, size=97)
        parts = split_dataset(events, seed=3)
        joined = np.concatenate(parts)
        assert np.array_equal(np.sort(joined), np.arange(97))
        assert all(events[p].sum() > 0 for p in parts)

    def test_deterministic(self):
        events = np.random.default_rng(0).integers(0, 2, size=50)
        a, b = split_dataset(events, seed=9), split_dataset(events, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_impossible(self):
        events = np.zeros(100, dtype=int)
        events[0] = 1
        with pytest.raises(ValueError, match="events in every part"):
            split_dataset(events, seed=0)

    def test_repeat_seeds(self):
        assert repeat_seeds(5, 10) == repeat_seeds(5, 10)
        assert len(set(repeat_seeds(5, 10))) == 10


class TestFit:
    def test_matches_newton_raphson(self):
        x, y, d = generate_tabular(300, (0.8, -0.5, 0.3), seed=2)
        w, _ = wide_fit(x, y, d)
        np.testing.assert_allclose(w, newton_cox(x, y, d), atol=1e-6)

    def test_recovers_truth_with_censoring(self):
        beta = np.array([0.8, -0.5, 0.3])
        x, y, d = generate_tabular(1000, beta, censoring_rate_target=0.3, seed=3)
        w, _ = wide_fit(x, y, d)
        assert np.abs(w - beta).max() < 0.15

    def test_full_batch_loss_decreases(self):
        x, y, d = generate_tabular(200, (0.5, 0.5), censoring_rate_target=0.3, seed=4)
        _, report = wide_fit(x, y, d, epochs=100, lr=0.005)
        increases = sum(b > a for a, b in zip(report.train_loss, report.train_loss[1:]))
        assert increases <= 0.05 * len(report.train_loss)
        assert report.train_loss[-1] < report.train_loss[0]

    def test_deterministic(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=3, batch_size=16), **TINY)
        a = run_experiment(cohort, "widedeep", cfg, seed=1)
        b = run_experiment(cohort, "widedeep", cfg, seed=1)
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert a.report.train_loss == b.report.train_loss

    def test_selected_epoch_is_first_argmax(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=6, batch_size=16), **TINY)
        rep = run_experiment(cohort, "wide", cfg, seed=0).report
        vals = np.array(rep.val_c_index)
        assert rep.selected_epoch == int(np.argmax(vals)) + 1
        assert len(rep.to_csv().splitlines()) == 7

    def test_best_epoch_parameters_restored(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=6, batch_size=16), **TINY)
        res = run_experiment(cohort, "wide", cfg, seed=0)
        val = prepare(cohort, res.split[1], res.encoder)
        assert _val_c_index(res.model, val) == max(res.report.val_c_index)

    def test_test_split_untouched_by_selection(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=3, batch_size=16), **TINY)
        a = run_experiment(cohort, "wide", cfg, seed=0)
        # scrambling test outcomes changes nothing that was fitted
        test_idx = a.split[2]
        scrambled = cohort.subset(np.arange(len(cohort)))
        scrambled.times[test_idx] = scrambled.times[test_idx][::-1]
        b = run_experiment(scrambled, "wide", cfg, seed=0)
        np.testing.assert_array_equal(a.model.w_wide.data, b.model.w_wide.data)

    @pytest.mark.slow
    def test_deep_only_learns_strong_shape_signal(self):
        cohort = tiny_cohort(n=400, k=64, seed=7, shape_signal_strength=2.5, tabular_coefficients=(0,) * 5)
        cfg = ExperimentConfig(
            train=TrainConfig(epochs=20, lr_decay_every=7), point_widths=(32, 64, 64), transform_fc=(64, 32), global_widths=(64, 32, 32)
        )
        assert run_experiment(cohort, "deep", cfg, seed=0).test.c_index > 0.75


class TestSearch:
    def test_grid_and_random(self):
        space = {"learning_rate": [0.1, 0.01], "beta1": [0.9, 0.5, 0.0]}
        assert len(search_candidates(space)) == 6
        rand = search_candidates(space, "random", n_samples=4, seed=1)
        assert len(rand) == 4 and rand == search_candidates(space, "random", n_samples=4, seed=1)
        with pytest.raises(ValueError):
            search_candidates({})

    def test_search_table(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=2, batch_size=16), **TINY)
        cands = search_candidates({"learning_rate": [1e-3, 1e-2], "weight_decay": [0.0, 1e-2]})
        res = hyperparameter_search(cands, cohort, cfg, "wide")
        assert len(res.table) == 4
        assert all(res.best["val_c_index"] >= row["val_c_index"] for row in res.table)
        assert res.best_config.train.learning_rate == res.best["learning_rate"]

    def test_single_candidate(self):
        cohort = tiny_cohort()
        cfg = ExperimentConfig(train=TrainConfig(epochs=1, batch_size=16), **TINY)
        res = hyperparameter_search([{"learning_rate": 0.01}], cohort, cfg, "wide")
        assert res.best["learning_rate"] == 0.01 and len(res.table) == 1

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            ExperimentConfig().with_overrides(momentum=0.5)
