"""Evaluation quantities for calibrators and selective QA.

Calibration accuracy, ROC-AUC (Mann-Whitney with tie credit), the
risk-coverage curve and its area, coverage at a fixed accuracy threshold,
sentence BLEU, and a 2-D linear-discriminant projection for embedding plots.
All functions are pure.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.stats import rankdata


class MetricError(Exception):
    pass


class UndefinedMetricError(MetricError):
    """Raised when a metric needs both classes but got one."""


@dataclass(frozen=True)
class RiskCoveragePoint:
    coverage: float  # fraction of examples answered
    risk: float  # error rate among them


@dataclass
class EvalReport:
    """Per-run evaluation results. Reals are fractions in [0, 1]; rendering
    multiplies by 100."""

    n_examples: int
    calib_accuracy: float | None = None
    auroc: float | None = None
    cov_at_acc80: float | None = None
    rc_area: float | None = None
    qa_top1_em: float | None = None
    qa_top5_em: float | None = None
    curve: list[RiskCoveragePoint] = field(default_factory=list)

    METRIC_NAMES = (
        "calib_accuracy",
        "auroc",
        "cov_at_acc80",
        "rc_area",
        "qa_top1_em",
        "qa_top5_em",
    )

    def to_dict(self) -> dict:
        obj: dict = {"n_examples": self.n_examples}
        for name in self.METRIC_NAMES:
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
        obj["curve"] = [[p.coverage, p.risk] for p in self.curve]
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        report = cls(n_examples=int(obj["n_examples"]))
        for name in cls.METRIC_NAMES:
            if name in obj:
                setattr(report, name, float(obj[name]))
        report.curve = [RiskCoveragePoint(float(c), float(r)) for c, r in obj.get("curve", [])]
        return report

    def curve_csv(self) -> str:
        lines = ["coverage,risk"]
        lines.extend(f"{p.coverage!r},{p.risk!r}" for p in self.curve)
        return "\n".join(lines) + "\n"


@dataclass
class AggregateReport:
    """Across-run mean and sample std per metric, in percentage points."""

    n_runs: int
    stats: dict[str, tuple[float, float]]  # name -> (mean_pct, std_pct)

    def formatted(self, name: str) -> str:
        mean, std = self.stats[name]
        return format_mean_std_pct(mean, std)

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "stats": {
                name: {"mean": mean, "std": std, "display": format_mean_std_pct(mean, std)}
                for name, (mean, std) in self.stats.items()
            },
        }


def format_mean_std_pct(mean_pct: float, std_pct: float) -> str:
    return f"{mean_pct:.1f}±{std_pct:.1f}"


def aggregate_reports(reports: list[EvalReport]) -> AggregateReport:
    """Mean and sample standard deviation of each metric present in all runs."""
    if not reports:
        raise MetricError("no reports to aggregate")
    if len(reports) < 2:
        warnings.warn("aggregating fewer than 2 runs: std reported as 0.0", stacklevel=2)
    stats: dict[str, tuple[float, float]] = {}
    for name in EvalReport.METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            continue
        pct = np.asarray(values, dtype=np.float64) * 100.0
        std = float(pct.std(ddof=1)) if len(pct) > 1 else 0.0
        stats[name] = (float(pct.mean()), std)
    return AggregateReport(n_runs=len(reports), stats=stats)


# ---------------------------------------------------------------------------
# calibrator metrics
# ---------------------------------------------------------------------------


def calibration_accuracy(pred_correct, actual_correct) -> float:
    """Fraction of examples where the calibrator's verdict matches reality."""
    pred = np.asarray(pred_correct, dtype=bool)
    actual = np.asarray(actual_correct, dtype=bool)
    if pred.shape != actual.shape:
        raise MetricError("pred_correct and actual_correct lengths differ")
    if pred.size == 0:
        raise MetricError("calibration_accuracy of an empty set is undefined")
    return float((pred == actual).mean())


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _prefix_order(scores: np.ndarray) -> np.ndarray:
    # descending by score; stable, so ties keep input order
    return np.argsort(-scores, kind="stable")


def risk_coverage_curve(scores, correct) -> list[RiskCoveragePoint]:
    """Risk at each coverage prefix when answering in descending score order."""
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if scores.size == 0:
        raise MetricError("risk_coverage_curve of an empty set is undefined")
    order = _prefix_order(scores)
    n = scores.size
    wrong_prefix = np.cumsum(~correct[order])
    return [
        RiskCoveragePoint(coverage=(k + 1) / n, risk=float(wrong_prefix[k]) / (k + 1))
        for k in range(n)
    ]


def risk_coverage_area(scores, correct) -> float:
    """Mean prefix risk: the Riemann-sum area under the risk-coverage curve."""
    curve = risk_coverage_curve(scores, correct)
    return float(np.mean([p.risk for p in curve]))


def coverage_at_accuracy(scores, correct, threshold: float = 0.8) -> float:
    """Largest coverage whose prefix accuracy stays at or above the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if scores.size == 0:
        raise MetricError("coverage_at_accuracy of an empty set is undefined")
    order = _prefix_order(scores)
    n = scores.size
    right_prefix = np.cumsum(correct[order])
    best = 0.0
    for k in range(n):
        if right_prefix[k] / (k + 1) >= threshold:
            best = (k + 1) / n
    return best


def evaluate_scores(
    proba,
    labels,
    threshold: float = 0.5,
    acc_threshold: float = 0.8,
) -> EvalReport:
    """Standard calibrator report from confidence scores and true correctness."""
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    report = EvalReport(n_examples=int(proba.size))
    report.calib_accuracy = calibration_accuracy(proba >= threshold, labels)
    try:
        report.auroc = auroc(proba, labels)
    except UndefinedMetricError:
        report.auroc = None
    report.curve = risk_coverage_curve(proba, labels)
    report.rc_area = float(np.mean([p.risk for p in report.curve]))
    report.cov_at_acc80 = coverage_at_accuracy(proba, labels, acc_threshold)
    return report


# ---------------------------------------------------------------------------
# sentence BLEU
# ---------------------------------------------------------------------------

_BLEU_EPS = 1e-9


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(reference: str, hypothesis: str, max_order: int = 4) -> float:
    """BLEU-4 with clipped precisions, brevity penalty and add-epsilon smoothing.

    Whitespace tokenization; zero clipped counts (and empty n-gram orders) are
    smoothed to a tiny epsilon so short or disjoint sentences score near 0
    instead of exactly 0 by annihilation.
    """
    ref = reference.split()
    hyp = hypothesis.split()
    if not hyp:
        warnings.warn("sentence_bleu: empty hypothesis scores 0.0", stacklevel=2)
        return 0.0
    if not ref:
        raise MetricError("sentence_bleu needs a nonempty reference")
    log_sum = 0.0
    for n in range(1, max_order + 1):
        total = max(len(hyp) - n + 1, 0)
        if total == 0:
            clipped, total = _BLEU_EPS, 1
        else:
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            clipped = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            if clipped == 0:
                clipped = _BLEU_EPS
        log_sum += math.log(clipped / total)
    geo_mean = math.exp(log_sum / max_order)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * geo_mean


# ---------------------------------------------------------------------------
# linear discriminant projection
# ---------------------------------------------------------------------------


def lda_project(X, labels) -> np.ndarray:
    """Project rows onto the top-2 discriminant directions.

    Solves the generalized eigenproblem S_b v = lambda (S_w + eps I) v with
    eps = 1e-6 * trace(S_w) / m for stability. Deterministic sign convention:
    the first nonzero component of each direction is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] < 3:
        raise MetricError("lda_project needs at least 3 points")
    n, m = X.shape
    if m < 2:
        raise MetricError("lda_project needs at least 2 feature dimensions")
    classes = np.unique(labels)
    if classes.size < 2:
        raise UndefinedMetricError("lda_project needs at least 2 classes")
    if classes.size > m + 1:
        raise MetricError("class count exceeds feature dimension + 1")

    overall_mean = X.mean(axis=0)
    s_w = np.zeros((m, m))
    s_b = np.zeros((m, m))
    for cls in classes:
        rows = X[labels == cls]
        mu = rows.mean(axis=0)
        centered = rows - mu
        s_w += centered.T @ centered
        diff = (mu - overall_mean).reshape(-1, 1)
        s_b += rows.shape[0] * (diff @ diff.T)

    eps = 1e-6 * np.trace(s_w) / m
    if eps <= 0.0:
        eps = 1e-12
    eigvals, eigvecs = eigh(s_b, s_w + eps * np.eye(m))
    ordered = eigvecs[:, ::-1]  # largest eigenvalues first
    rank = min(2, classes.size - 1)
    directions = np.array(ordered[:, :rank])
    if rank < 2:
        # the between-class scatter has rank 1 here, so the second axis is
        # degenerate; complete with the dominant within-class variance
        # direction inside the complement (basis-independent, so duplicated
        # data projects identically)
        rest = ordered[:, rank:]
        proj_sw = rest.T @ s_w @ rest
        gram = rest.T @ rest
        _, coeffs = eigh(proj_sw, gram)
        directions = np.hstack([directions, rest @ coeffs[:, -1:]])
    for j in range(directions.shape[1]):
        col = directions[:, j]
        col = col / np.linalg.norm(col)
        nonzero = np.nonzero(np.abs(col) > 1e-12)[0]
        if nonzero.size and col[nonzero[0]] < 0:
            col = -col
        directions[:, j] = col
    return X @ directions
