"""Logistic/KNN calibrators, grid search, the run protocol, model files."""

import re
import warnings

import numpy as np
import pytest
from scipy.special import expit

from calibqa.classifiers import (
    CalibratorError,
    CalibratorModel,
    FingerprintMismatchError,
    GbtGrid,
    GbtHyperparams,
    ModelVersionError,
    RunProtocol,
    gbt_learner,
    grid_search,
    run_protocol,
    train_gbt,
    train_knn,
    train_logistic,
)
from calibqa.features import FeatureConfig, FeaturePart
from calibqa.metrics import EvalReport, aggregate_reports, calibration_accuracy, format_mean_std_pct
from calibqa.synth import SynthSpec, generate


def _logistic_objective(w, b, X, y, l2):
    z = X @ w + b
    signed = np.where(y == 1, z, -z)
    return float(np.logaddexp(0.0, -signed).sum()) + 0.5 * l2 * float(w @ w)


def fd_gradient(w, b, X, y, l2, eps=1e-6):
    """Central finite differences of the logistic objective."""
    theta = np.concatenate([w, [b]])
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += eps
        minus[i] -= eps
        f_plus = _logistic_objective(plus[:-1], plus[-1], X, y, l2)
        f_minus = _logistic_objective(minus[:-1], minus[-1], X, y, l2)
        grad[i] = (f_plus - f_minus) / (2 * eps)
    return grad


class TestLogistic:
    def test_weight_sign_matches_class_direction(self):
        x = np.linspace(-2, 2, 40).reshape(-1, 1)
        y = (x[:, 0] > 0).astype(int)
        model = train_logistic(x, y, l2=1.0)
        assert model.state.weights[0] > 0

    def test_huge_l2_shrinks_to_prior(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 3))
        y = (rng.random(200) < 0.7).astype(int)
        model = train_logistic(X, y, l2=1e6)
        assert np.abs(model.state.weights).max() < 1e-3
        proba = model.predict_proba(X)
        assert np.abs(proba - y.mean()).max() < 0.01

    def test_gradient_check_at_convergence(self):
        rng = np.random.default_rng(123)
        for trial in range(10):
            n, d = int(rng.integers(30, 100)), int(rng.integers(1, 5))
            X = rng.normal(size=(n, d))
            w_true = rng.normal(size=d)
            y = (X @ w_true + rng.normal(scale=0.5, size=n) > 0).astype(int)
            if y.min() == y.max():
                y[0] = 1 - y[0]
            l2 = float(rng.uniform(0.1, 2.0))
            model = train_logistic(X, y, l2=l2, tol=1e-8)
            state = model.state
            assert state.grad_inf_norm <= 1e-8
            fd = fd_gradient(state.weights, state.bias, X, y, l2)
            assert np.abs(fd).max() < 1e-4

    def test_predict_matches_sigmoid_formula(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 2))
        y = (X[:, 0] > 0).astype(int)
        model = train_logistic(X, y, l2=0.5)
        w, b = model.state.weights, model.state.bias
        np.testing.assert_allclose(model.predict_proba(X), expit(X @ w + b), atol=1e-9)


class TestKnn:
    def test_self_neighbor(self):
        X = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]])
        y = np.array([1, 0, 1])
        model = train_knn(X, y, k=1)
        np.testing.assert_array_equal(model.predict_proba(X), y.astype(float))

    def test_k_equals_n_gives_prior(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(20, 3))
        y = (rng.random(20) < 0.3).astype(int)
        model = train_knn(X, y, k=20)
        np.testing.assert_allclose(model.predict_proba(rng.normal(size=(5, 3))), y.mean())

    def test_k_above_n_rejected(self):
        X = np.zeros((3, 2))
        with pytest.raises(CalibratorError):
            train_knn(X, np.array([0, 1, 0]), k=4)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(77)
        X = rng.normal(size=(50, 4))
        y = (rng.random(50) < 0.5).astype(int)
        model = train_knn(X, y, k=5)
        queries = rng.normal(size=(20, 4))
        got = model.predict_proba(queries)
        for qi, q in enumerate(queries):
            # oracle: exhaustive distance sort with index tie break
            dists = [(float(((X[i] - q) ** 2).sum()), i) for i in range(50)]
            dists.sort()
            expected = np.mean([y[i] for _, i in dists[:5]])
            assert got[qi] == expected

    def test_scale_invariance_of_ranks(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(30, 3))
        y = (rng.random(30) < 0.5).astype(int)
        queries = rng.normal(size=(10, 3))
        a = train_knn(X, y, k=3).predict_proba(queries)
        b = train_knn(X * 4.0, y, k=3).predict_proba(queries * 4.0)
        np.testing.assert_array_equal(a, b)


class TestModelContainer:
    def _simple_model(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 2))
        y = (X[:, 0] > 0).astype(int)
        return train_gbt(X, y, GbtHyperparams(n_estimators=5, max_depth=2), _cfg(2)), X

    def test_proba_in_unit_interval(self):
        model, _ = self._simple_model()
        rng = np.random.default_rng(3)
        proba = model.predict_proba(rng.normal(scale=5, size=(1000, 2)))
        assert np.all(proba >= 0.0) and np.all(proba <= 1.0)

    def test_fingerprint_mismatch_refused(self):
        model, X = self._simple_model()
        from calibqa.features import FeatureMatrix

        fm = FeatureMatrix(
            values=X, labels=None, fingerprint="deadbeef",
            example_ids=["x"] * len(X), candidate_indices=np.zeros(len(X), dtype=int),
        )
        with pytest.raises(FingerprintMismatchError):
            model.predict_proba(fm)

    def test_threshold_sweep_monotone(self):
        model, X = self._simple_model()
        counts = []
        for threshold in np.linspace(0.05, 0.95, 10):
            model.decision_threshold = float(threshold)
            counts.append(int(model.classify(X).sum()))
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_save_load_bit_identical(self, tmp_path):
        model, X = self._simple_model()
        p1 = tmp_path / "m1.json"
        p2 = tmp_path / "m2.json"
        model.save(p1)
        CalibratorModel.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_refused(self, tmp_path):
        model, _ = self._simple_model()
        path = tmp_path / "m.json"
        model.save(path)
        text = path.read_text().replace("cqa-model-v1", "cqa-model-v9")
        path.write_text(text)
        with pytest.raises(ModelVersionError):
            CalibratorModel.load(path)

    def test_knn_and_logistic_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(30, 3))
        y = (X[:, 0] > 0).astype(int)
        for model in (train_knn(X, y, k=3), train_logistic(X, y, l2=1.0)):
            path = tmp_path / "m.json"
            model.save(path)
            clone = CalibratorModel.load(path)
            np.testing.assert_array_equal(clone.predict_proba(X), model.predict_proba(X))


def _cfg(dim):
    return FeatureConfig(parts=(FeaturePart.EMB_ORIGINAL,), hidden_dim=dim)


def _fm(X, y):
    from calibqa.features import FeatureMatrix

    return FeatureMatrix(
        values=np.asarray(X, dtype=np.float64),
        labels=np.asarray(y, dtype=np.int64),
        fingerprint=_cfg(X.shape[1]).fingerprint(),
        example_ids=[f"e{i}" for i in range(len(X))],
        candidate_indices=np.zeros(len(X), dtype=np.int64),
    )


class TestGridSearch:
    def _data(self, seed=0, n=120, d=3):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, d))
        y = (X[:, 0] + 0.3 * rng.normal(size=n) > 0).astype(int)
        return _fm(X[: n // 2], y[: n // 2]), _fm(X[n // 2 :], y[n // 2 :])

    def test_singleton_grid_returns_that_point(self):
        train_fm, dev_fm = self._data()
        grid = GbtGrid(colsample=(0.5,), learning_rate=(0.1,), n_estimators=(5,))
        result = grid_search(train_fm, dev_fm, grid)
        assert result.best.n_estimators == 5
        assert result.best.learning_rate == 0.1
        assert result.best.colsample_by_tree == 0.5

    def test_dominant_point_wins(self):
        # only feature 7 matters; colsample 0.1 usually never samples it,
        # colsample 1.0 always sees it and dominates on dev accuracy
        rng = np.random.default_rng(3)
        X = rng.normal(size=(200, 10))
        y = (X[:, 7] > 0).astype(int)
        train_fm, dev_fm = _fm(X[:100], y[:100]), _fm(X[100:], y[100:])
        grid = GbtGrid(colsample=(0.1, 1.0), learning_rate=(0.5,), n_estimators=(3,))
        result = grid_search(train_fm, dev_fm, grid)
        evals = {hp.colsample_by_tree: acc for hp, acc in result.evaluations}
        assert evals[1.0] > evals[0.1]
        assert result.best.colsample_by_tree == 1.0

    def test_matches_independent_sweep(self):
        train_fm, dev_fm = self._data(seed=5)
        grid = GbtGrid(colsample=(0.5, 1.0), learning_rate=(0.1, 0.5), n_estimators=(5, 25))
        result = grid_search(train_fm, dev_fm, grid)
        # oracle: re-evaluate every point from scratch
        best_acc = -1.0
        for hp in grid.points(GbtHyperparams()):
            model = train_gbt(train_fm.values, train_fm.labels, hp, _cfg(3))
            acc = calibration_accuracy(
                model.classify(dev_fm.values), dev_fm.labels.astype(bool)
            )
            best_acc = max(best_acc, acc)
        assert result.best_dev_accuracy == pytest.approx(best_acc)

    def test_tie_break_prefers_small_then_slow(self):
        train_fm, dev_fm = self._data(seed=7)
        # a grid where every point reaches the same dev accuracy: x separable
        X = np.array([[0.0]] * 20 + [[1.0]] * 20)
        y = np.array([0] * 20 + [1] * 20)
        train_fm = _fm(X, y)
        dev_fm = _fm(X, y)
        grid = GbtGrid(colsample=(1.0,), learning_rate=(0.1, 0.5), n_estimators=(5, 25))
        result = grid_search(train_fm, dev_fm, grid)
        assert result.best.n_estimators == 5
        assert result.best.learning_rate == 0.1

    def test_parallel_matches_serial(self):
        train_fm, dev_fm = self._data(seed=11)
        grid = GbtGrid(colsample=(0.5, 1.0), learning_rate=(0.1,), n_estimators=(5, 25))
        serial = grid_search(train_fm, dev_fm, grid, jobs=1)
        parallel = grid_search(train_fm, dev_fm, grid, jobs=4)
        assert serial.best == parallel.best
        assert [s for _, s in serial.evaluations] == [s for _, s in parallel.evaluations]


class TestRunProtocol:
    def test_constant_runs_have_zero_std(self):
        reports = [EvalReport(n_examples=10, calib_accuracy=0.8) for _ in range(5)]
        agg = aggregate_reports(reports)
        mean, std = agg.stats["calib_accuracy"]
        assert std == 0.0
        assert agg.formatted("calib_accuracy") == "80.0±0.0"

    def test_hand_computed_sample_std(self):
        reports = [
            EvalReport(n_examples=10, calib_accuracy=v)
            for v in (0.60, 0.62, 0.64, 0.66, 0.68)
        ]
        agg = aggregate_reports(reports)
        mean, std = agg.stats["calib_accuracy"]
        assert mean == pytest.approx(64.0)
        # sample std of {60,62,64,66,68} = sqrt(10)
        assert std == pytest.approx(np.sqrt(10.0))
        assert agg.formatted("calib_accuracy") == "64.0±3.2"

    def test_format_shape_matches_convention(self):
        assert re.fullmatch(r"\d+\.\d±\d+\.\d", format_mean_std_pct(65.81, 0.31))
        assert format_mean_std_pct(65.81, 0.31) == "65.8±0.3"

    def test_single_run_warns(self):
        with pytest.warns(UserWarning, match="std"):
            aggregate_reports([EvalReport(n_examples=5, calib_accuracy=0.5)])

    def test_protocol_seed_count_enforced(self):
        with pytest.raises(CalibratorError):
            RunProtocol(n_runs=3, seeds=(1, 2))

    def test_end_to_end_protocol(self):
        records = generate(
            SynthSpec(
                n_examples=300, m=8, score_informativeness=1.0,
                embedding_informativeness=0.5, noise_std=0.0, seed=21,
            )
        )
        cfg = FeatureConfig(parts=(FeaturePart.MAXPROB,))
        protocol = RunProtocol(n_runs=3, seeds=(1, 2, 3))
        hp = GbtHyperparams(n_estimators=20, max_depth=2)
        reports, agg = run_protocol(records, cfg, gbt_learner(hp, cfg), protocol)
        assert len(reports) == 3
        # noiseless, fully score-informative labels are learnable
        assert agg.stats["calib_accuracy"][0] > 95.0
        assert re.fullmatch(r"\d+\.\d±\d+\.\d", agg.formatted("calib_accuracy"))

    def test_protocol_parallel_matches_serial(self):
        records = generate(
            SynthSpec(n_examples=120, m=8, score_informativeness=0.8,
                      embedding_informativeness=0.2, noise_std=0.2, seed=33)
        )
        cfg = FeatureConfig(parts=(FeaturePart.MAXPROB,))
        protocol = RunProtocol(n_runs=2, seeds=(4, 5))
        hp = GbtHyperparams(n_estimators=10, max_depth=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            serial, _ = run_protocol(records, cfg, gbt_learner(hp, cfg), protocol, jobs=1)
            parallel, _ = run_protocol(records, cfg, gbt_learner(hp, cfg), protocol, jobs=2)
        for a, b in zip(serial, parallel):
            assert a.calib_accuracy == b.calib_accuracy
            assert a.auroc == b.auroc
