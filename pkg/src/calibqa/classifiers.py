"""Binary correctness calibrators.

Gradient-boosted trees are the primary classifier; L2 logistic regression and
k-nearest neighbors cover the classifier ablation. Includes the exhaustive
hyperparameter grid search and the multi-run train/eval protocol (fresh data
partition and seed per run, mean +/- sample std aggregation).

Trained models are immutable; training distinct grid points or protocol runs
in parallel is safe because every model result is collected by index before
selection.
"""

from __future__ import annotations

import base64
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from . import metrics
from .features import FeatureConfig, FeatureMatrix, feature_matrix
from .gbt import GbtEnsemble, GbtHyperparams, train_gbt_ensemble
from .records import split_records

MODEL_FORMAT = "cqa-model-v1"


class CalibratorError(Exception):
    pass


class FingerprintMismatchError(CalibratorError):
    """Feature vectors were built with a different FeatureConfig."""


class ModelVersionError(CalibratorError):
    """Model file version is not supported."""


# ---------------------------------------------------------------------------
# learned state containers
# ---------------------------------------------------------------------------


def _encode_f64(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_f64(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


@dataclass(eq=False)
class LogisticState:
    weights: np.ndarray
    bias: float
    l2: float
    n_iters: int
    grad_inf_norm: float

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(X @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {
            "weights": _encode_f64(self.weights),
            "bias": self.bias,
            "l2": self.l2,
            "n_iters": self.n_iters,
            "grad_inf_norm": self.grad_inf_norm,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LogisticState":
        return cls(
            weights=_decode_f64(obj["weights"]),
            bias=float(obj["bias"]),
            l2=float(obj["l2"]),
            n_iters=int(obj["n_iters"]),
            grad_inf_norm=float(obj["grad_inf_norm"]),
        )


@dataclass(eq=False)
class KnnState:
    X: np.ndarray
    y: np.ndarray
    k: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0], dtype=np.float64)
        for i, row in enumerate(X):
            d2 = ((self.X - row) ** 2).sum(axis=1)
            order = np.argsort(d2, kind="stable")  # ties break on lower row index
            out[i] = self.y[order[: self.k]].mean()
        return out

    def to_dict(self) -> dict:
        return {
            "X": _encode_f64(self.X),
            "y": _encode_f64(self.y.astype(np.float64)),
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "KnnState":
        return cls(
            X=_decode_f64(obj["X"]),
            y=_decode_f64(obj["y"]).astype(np.int64),
            k=int(obj["k"]),
        )


_STATE_TYPES = {"gbt": GbtEnsemble, "logistic": LogisticState, "knn": KnnState}


@dataclass(eq=False)
class CalibratorModel:
    """A trained calibrator plus the feature config it was trained with.

    The model refuses feature matrices whose fingerprint does not match its
    own config, so stale features cannot be scored silently.
    """

    kind: str  # "gbt" | "logistic" | "knn"
    params: dict
    state: GbtEnsemble | LogisticState | KnnState
    feature_config: FeatureConfig
    decision_threshold: float = 0.5

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, FeatureMatrix):
            if X.fingerprint != self.feature_config.fingerprint():
                raise FingerprintMismatchError(
                    f"feature fingerprint {X.fingerprint} does not match the model's "
                    f"{self.feature_config.fingerprint()}"
                )
            return X.values
        return np.asarray(X, dtype=np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return self.state.predict_proba(self._matrix(X))

    def classify(self, X) -> np.ndarray:
        return self.predict_proba(X) >= self.decision_threshold

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT,
            "kind": self.kind,
            "params": self.params,
            "feature_config": self.feature_config.canonical_text(),
            "decision_threshold": self.decision_threshold,
            "state": self.state.to_dict(),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(self.to_dict(), separators=(",", ":")))
            fh.write("\n")

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibratorModel":
        version = obj.get("version")
        if version != MODEL_FORMAT:
            raise ModelVersionError(
                f"model file version {version!r} unsupported (expected {MODEL_FORMAT!r})"
            )
        kind = obj["kind"]
        if kind not in _STATE_TYPES:
            raise CalibratorError(f"unknown model kind {kind!r}")
        return cls(
            kind=kind,
            params=obj["params"],
            state=_STATE_TYPES[kind].from_dict(obj["state"]),
            feature_config=FeatureConfig.from_canonical_text(obj["feature_config"]),
            decision_threshold=float(obj["decision_threshold"]),
        )

    @classmethod
    def load(cls, path) -> "CalibratorModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# training entry points
# ---------------------------------------------------------------------------


def _check_training_inputs(X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] == 0:
        raise CalibratorError("X must be a nonempty 2-D matrix")
    if X.shape[0] != y.shape[0]:
        raise CalibratorError("X and y row counts differ")
    if not np.all(np.isfinite(X)):
        raise CalibratorError("X contains NaN or infinite entries")
    if not np.all((y == 0) | (y == 1)):
        raise CalibratorError("y must be binary {0, 1}")
    if y.min() == y.max():
        raise CalibratorError("training labels contain a single class")


def train_gbt(
    X,
    y,
    hp: GbtHyperparams,
    feature_config: FeatureConfig,
    decision_threshold: float = 0.5,
) -> CalibratorModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    _check_training_inputs(X, y)
    ensemble = train_gbt_ensemble(X, y, hp)
    return CalibratorModel(
        kind="gbt",
        params=hp.to_dict(),
        state=ensemble,
        feature_config=feature_config,
        decision_threshold=decision_threshold,
    )


def _logistic_loss_grad(w, b, X, y, l2):
    z = X @ w + b
    signed = np.where(y == 1, z, -z)
    loss = float(np.logaddexp(0.0, -signed).sum()) + 0.5 * l2 * float(w @ w)
    residual = expit(z) - y
    grad_w = X.T @ residual + l2 * w
    grad_b = float(residual.sum())
    return loss, grad_w, grad_b


def train_logistic(
    X,
    y,
    l2: float = 1.0,
    max_iters: int = 100,
    tol: float = 1e-6,
    feature_config: FeatureConfig | None = None,
    decision_threshold: float = 0.5,
) -> CalibratorModel:
    """Newton iterations on the L2-regularized (weights only) logistic loss.

    Stops when the gradient infinity-norm drops to tol or after max_iters.
    Fully deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_training_inputs(X, y)
    if l2 < 0:
        raise CalibratorError("l2 must be nonnegative")
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    loss, grad_w, grad_b = _logistic_loss_grad(w, b, X, y, l2)
    iters = 0
    for iters in range(1, max_iters + 1):
        grad_norm = max(float(np.abs(grad_w).max(initial=0.0)), abs(grad_b))
        if grad_norm <= tol:
            iters -= 1
            break
        p = expit(X @ w + b)
        weight = p * (1.0 - p)
        hess = np.empty((d + 1, d + 1))
        hess[:d, :d] = (X.T * weight) @ X + l2 * np.eye(d)
        xw = X.T @ weight
        hess[:d, d] = xw
        hess[d, :d] = xw
        hess[d, d] = float(weight.sum())
        hess[np.diag_indices_from(hess)] += 1e-10
        full_grad = np.concatenate([grad_w, [grad_b]])
        step = np.linalg.solve(hess, full_grad)
        descent = float(full_grad @ step)
        t = 1.0
        for _ in range(60):
            w_new = w - t * step[:d]
            b_new = b - t * step[d]
            loss_new, gw_new, gb_new = _logistic_loss_grad(w_new, b_new, X, y, l2)
            if loss_new <= loss - 1e-4 * t * descent:
                break
            t *= 0.5
        w, b, loss, grad_w, grad_b = w_new, b_new, loss_new, gw_new, gb_new
    grad_norm = max(float(np.abs(grad_w).max(initial=0.0)), abs(grad_b))
    state = LogisticState(weights=w, bias=b, l2=l2, n_iters=iters, grad_inf_norm=grad_norm)
    if feature_config is None:
        feature_config = _placeholder_config(d)
    return CalibratorModel(
        kind="logistic",
        params={"l2": l2, "max_iters": max_iters, "tol": tol},
        state=state,
        feature_config=feature_config,
        decision_threshold=decision_threshold,
    )


def train_knn(
    X,
    y,
    k: int = 5,
    feature_config: FeatureConfig | None = None,
    decision_threshold: float = 0.5,
) -> CalibratorModel:
    """Store the training set; prediction is the positive fraction among the
    k nearest rows by Euclidean distance (ties to the lower row index)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    _check_training_inputs(X, y)
    if k < 1:
        raise CalibratorError("k must be >= 1")
    if k > X.shape[0]:
        raise CalibratorError(f"k={k} exceeds the {X.shape[0]} stored rows")
    if feature_config is None:
        feature_config = _placeholder_config(X.shape[1])
    return CalibratorModel(
        kind="knn",
        params={"k": k},
        state=KnnState(X=X.copy(), y=y.copy(), k=k),
        feature_config=feature_config,
        decision_threshold=decision_threshold,
    )


def _placeholder_config(dim: int) -> FeatureConfig:
    # raw-matrix training (tests, oracles) still needs a config for the
    # fingerprint contract; hidden_dim records the expected width
    from .features import FeaturePart, Pooling

    return FeatureConfig(
        parts=(FeaturePart.EMB_ORIGINAL,), pooling=Pooling.MEAN, hidden_dim=dim
    )


def predict_proba(model: CalibratorModel, X) -> np.ndarray:
    return model.predict_proba(X)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbtGrid:
    """Default search space; colsample sets all three colsample fields."""

    colsample: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    learning_rate: tuple[float, ...] = (0.01, 0.1, 0.2, 0.5)
    n_estimators: tuple[int, ...] = (5, 25, 50, 100)

    def points(self, base: GbtHyperparams) -> list[GbtHyperparams]:
        out = []
        for ne in sorted(self.n_estimators):
            for lr in sorted(self.learning_rate):
                for cs in sorted(self.colsample):
                    out.append(
                        replace(
                            base,
                            n_estimators=ne,
                            learning_rate=lr,
                            colsample_by_tree=cs,
                            colsample_by_level=cs,
                            colsample_by_node=cs,
                        )
                    )
        return out


@dataclass
class GridSearchResult:
    best: GbtHyperparams
    best_dev_accuracy: float
    evaluations: list[tuple[GbtHyperparams, float]]


def grid_search(
    train_fm: FeatureMatrix,
    dev_fm: FeatureMatrix,
    grid: GbtGrid | None = None,
    base: GbtHyperparams | None = None,
    feature_config: FeatureConfig | None = None,
    threshold: float = 0.5,
    jobs: int = 1,
) -> GridSearchResult:
    """Exhaustive sweep scored by dev calibration accuracy.

    Ties go to the smaller n_estimators, then the smaller learning rate
    (points are evaluated in that order and kept on strict improvement only).
    """
    grid = grid or GbtGrid()
    base = base or GbtHyperparams()
    if feature_config is None:
        feature_config = _placeholder_config(train_fm.values.shape[1])
    points = grid.points(base)
    if not points:
        raise CalibratorError("empty hyperparameter grid")

    def evaluate(hp: GbtHyperparams) -> float:
        model = train_gbt(train_fm.values, train_fm.labels, hp, feature_config, threshold)
        pred = model.classify(dev_fm.values)
        return metrics.calibration_accuracy(pred, dev_fm.labels.astype(bool))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(evaluate, points))
    else:
        scores = [evaluate(hp) for hp in points]

    best_i = 0
    for i in range(1, len(points)):
        if scores[i] > scores[best_i]:
            best_i = i
    return GridSearchResult(
        best=points[best_i],
        best_dev_accuracy=scores[best_i],
        evaluations=list(zip(points, scores)),
    )


# ---------------------------------------------------------------------------
# multi-run protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunProtocol:
    n_runs: int = 5
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    resplit_each_run: bool = True

    def __post_init__(self):
        if self.n_runs < 1:
            raise CalibratorError("n_runs must be >= 1")
        if len(self.seeds) != self.n_runs:
            raise CalibratorError("protocol needs exactly one seed per run")


Learner = Callable[[FeatureMatrix, FeatureMatrix, int], CalibratorModel]


def gbt_learner(
    hp: GbtHyperparams,
    feature_config: FeatureConfig,
    threshold: float = 0.5,
    grid: GbtGrid | None = None,
) -> Learner:
    """Standard learner: optionally grid-search on dev, then fit on train."""

    def learn(train_fm: FeatureMatrix, dev_fm: FeatureMatrix, seed: int) -> CalibratorModel:
        hp_run = replace(hp, seed=seed)
        if grid is not None:
            result = grid_search(
                train_fm, dev_fm, grid, base=hp_run,
                feature_config=feature_config, threshold=threshold,
            )
            hp_run = result.best
        return train_gbt(train_fm.values, train_fm.labels, hp_run, feature_config, threshold)

    return learn


def run_protocol(
    records,
    feature_config: FeatureConfig,
    learner: Learner,
    protocol: RunProtocol,
    fractions: tuple[float, float, float] = (0.4, 0.1, 0.5),
    threshold: float = 0.5,
    jobs: int = 1,
) -> tuple[list[metrics.EvalReport], metrics.AggregateReport]:
    """Split/train/evaluate once per protocol run and aggregate mean +/- std."""
    records = list(records)

    def one_run(seed: int) -> metrics.EvalReport:
        split_seed = seed if protocol.resplit_each_run else protocol.seeds[0]
        train, dev, test = split_records(records, fractions, seed=split_seed)
        train_fm = feature_matrix(train, feature_config)
        dev_fm = feature_matrix(dev, feature_config) if dev else train_fm
        test_fm = feature_matrix(test, feature_config)
        model = learner(train_fm, dev_fm, seed)
        proba = model.predict_proba(test_fm)
        return metrics.evaluate_scores(proba, test_fm.labels.astype(bool), threshold)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one_run, protocol.seeds))
    else:
        reports = [one_run(seed) for seed in protocol.seeds]
    if protocol.n_runs < 2:
        warnings.warn("protocol with fewer than 2 runs: std reported as 0.0", stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        aggregate = metrics.aggregate_reports(reports)
    return reports, aggregate
