"""Boosted-tree training: stump oracle agreement, symmetry, determinism, loss."""

import json

import numpy as np
import pytest
from scipy.special import expit

from calibqa.gbt import (
    GbtError,
    GbtEnsemble,
    GbtHyperparams,
    logistic_loss,
    split_gain,
    train_gbt_ensemble,
)


# ---------------------------------------------------------------------------
# oracle: exhaustive stump search over all midpoint thresholds
# ---------------------------------------------------------------------------


def stump_oracle(x, y, l2, min_child_weight):
    """Best (threshold, gain) for a depth-1 tree on the first boosting round.

    Recomputes g/h from the base score directly and tries every midpoint of
    consecutive distinct sorted values with plain python loops.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64)
    p0 = y.mean()
    p = np.full(y.shape, p0)
    g = p - y
    h = p * (1.0 - p)
    values = np.unique(x)
    best_gain, best_thr = 0.0, None
    for a, b in zip(values[:-1], values[1:]):
        thr = 0.5 * (a + b)
        left = x < thr
        g_l, h_l = g[left].sum(), h[left].sum()
        g_r, h_r = g[~left].sum(), h[~left].sum()
        if h_l < min_child_weight or h_r < min_child_weight:
            continue
        gain = 0.5 * (
            g_l**2 / (h_l + l2)
            + g_r**2 / (h_r + l2)
            - (g_l + g_r) ** 2 / (h_l + h_r + l2)
        )
        if gain > best_gain:
            best_gain, best_thr = gain, thr
    return best_thr, best_gain


def _stump_hp(**kw):
    base = dict(n_estimators=1, learning_rate=1.0, max_depth=1, seed=0)
    base.update(kw)
    return GbtHyperparams(**base)


class TestStump:
    def test_two_cluster_midpoint_and_perfect_fit(self):
        X = np.array([[0.0]] * 50 + [[1.0]] * 50)
        y = np.array([0] * 50 + [1] * 50)
        hp = _stump_hp()
        ens = train_gbt_ensemble(X, y, hp)
        tree = ens.trees[0]
        oracle_thr, _ = stump_oracle(X[:, 0], y, hp.l2_leaf_reg, hp.min_child_weight)
        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(oracle_thr) == pytest.approx(0.5)
        pred = ens.predict_proba(X) >= 0.5
        assert (pred == y.astype(bool)).mean() == 1.0

    def test_oracle_agreement_on_random_datasets(self):
        rng = np.random.default_rng(2024)
        agreements = 0
        for trial in range(20):
            n = int(rng.integers(20, 120))
            x = rng.normal(size=n)
            # labels correlated with x plus noise so a stump has signal
            y = ((x + rng.normal(scale=0.7, size=n)) > 0).astype(int)
            if y.min() == y.max():
                y[0] = 1 - y[0]
            hp = _stump_hp()
            ens = train_gbt_ensemble(x.reshape(-1, 1), y, hp)
            tree = ens.trees[0]
            oracle_thr, oracle_gain = stump_oracle(x, y, hp.l2_leaf_reg, hp.min_child_weight)
            if oracle_thr is None:
                assert tree.feature[0] == -1
            else:
                assert tree.threshold[0] == pytest.approx(oracle_thr, abs=1e-12)
            agreements += 1
        assert agreements == 20


class TestTraining:
    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(80, 3))
        y = (X @ np.array([1.0, -2.0, 0.5]) + rng.normal(scale=0.5, size=80) > 0).astype(int)
        hp = GbtHyperparams(n_estimators=10, learning_rate=0.3, max_depth=3, seed=3)
        p = train_gbt_ensemble(X, y, hp).predict_proba(X)
        p_flipped = train_gbt_ensemble(X, 1 - y, hp).predict_proba(X)
        np.testing.assert_allclose(p_flipped, 1.0 - p, atol=1e-6)

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(60, 6))
        y = (X[:, 0] > 0).astype(int)
        hp = GbtHyperparams(
            n_estimators=8, max_depth=3, colsample_by_tree=0.5,
            colsample_by_level=0.8, colsample_by_node=0.8, seed=17,
        )
        a = train_gbt_ensemble(X, y, hp)
        b = train_gbt_ensemble(X, y, hp)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_train_loss_nonincreasing(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(150, 4))
        y = (X[:, 0] + 0.5 * rng.normal(size=150) > 0).astype(int)
        for lr in (0.1, 0.5, 1.0):
            hp = GbtHyperparams(n_estimators=25, learning_rate=lr, max_depth=3, seed=1)
            losses = train_gbt_ensemble(X, y, hp).train_losses
            for before, after in zip(losses, losses[1:]):
                assert after <= before + 1e-12

    def test_single_class_rejected(self):
        X = np.ones((10, 2))
        with pytest.raises(GbtError, match="single class"):
            train_gbt_ensemble(X, np.ones(10), GbtHyperparams())

    def test_nan_rejected(self):
        X = np.ones((10, 2))
        X[3, 1] = np.nan
        y = np.array([0, 1] * 5)
        with pytest.raises(GbtError, match="NaN"):
            train_gbt_ensemble(X, y, GbtHyperparams())

    def test_null_ensemble_is_base_rate(self):
        # an ensemble with zero completed rounds predicts the prior log-odds
        y = np.array([0, 0, 0, 1])
        base = float(np.log(y.mean() / (1 - y.mean())))
        ens = GbtEnsemble(base_score=base, trees=[])
        p = ens.predict_proba(np.zeros((7, 2)))
        np.testing.assert_allclose(p, expit(base))
        np.testing.assert_allclose(p, 0.25)

    def test_hyperparam_validation(self):
        with pytest.raises(GbtError):
            GbtHyperparams(n_estimators=0)
        with pytest.raises(GbtError):
            GbtHyperparams(learning_rate=0.0)
        with pytest.raises(GbtError):
            GbtHyperparams(colsample_by_tree=0.0)

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 3))
        y = (X[:, 1] > 0).astype(int)
        ens = train_gbt_ensemble(X, y, GbtHyperparams(n_estimators=5, max_depth=2))
        clone = GbtEnsemble.from_dict(json.loads(json.dumps(ens.to_dict())))
        np.testing.assert_array_equal(clone.predict_proba(X), ens.predict_proba(X))

    def test_split_gain_formula(self):
        # hand check: g_l=-1, h_l=0.5, g_r=2, h_r=1, l2=1
        expected = 0.5 * ((-1) ** 2 / 1.5 + 2**2 / 2.0 - 1**2 / 2.5)
        assert split_gain(-1.0, 0.5, 2.0, 1.0, 1.0) == pytest.approx(expected)

    def test_logistic_loss_matches_direct_formula(self):
        y = np.array([1.0, 0.0, 1.0])
        margin = np.array([0.3, -0.2, 2.0])
        direct = np.mean(
            [
                -np.log(expit(0.3)),
                -np.log(1 - expit(-0.2)),
                -np.log(expit(2.0)),
            ]
        )
        assert logistic_loss(y, margin) == pytest.approx(direct, abs=1e-12)
