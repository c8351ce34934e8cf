"""Answer-candidate reranking with a trained calibrator.

The calibrator rescores the top-N candidates of open-retrieval extractive
records and overrides the base model's ordering; candidates beyond the top-N
block are never promoted and keep the model's order below it. Exact-match
correctness of the reranked top-1/top-5 answers is the end metric, reported
next to the raw-model, normalized-score and unnormalized-score baselines.

Per-record reranking is independent; the model is read-only shared state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .classifiers import CalibratorModel
from .features import FeatureConfig, FeaturePart, Pooling, build_features
from .records import ExampleRecord, TaskKind, prediction_correct


class RerankError(Exception):
    pass


@dataclass
class RerankResult:
    example_id: str
    reordered: list[tuple[int, float]]  # (candidate_index, score), scores nonincreasing
    top1_correct: bool
    top5_correct: bool

    def to_line(self) -> str:
        obj = {
            "id": self.example_id,
            "reordered": [[i, s] for i, s in self.reordered],
            "top1_correct": self.top1_correct,
            "top5_correct": self.top5_correct,
        }
        return json.dumps(obj, separators=(",", ":"))


@dataclass
class RerankEvalReport:
    """Aggregate EM of the reranked ordering next to the three baselines."""

    n_examples: int
    top1_em: float
    top5_em: float
    baseline_top1_em: float
    baseline_top5_em: float
    norm_top1_em: float
    norm_top5_em: float
    unnorm_top1_em: float
    unnorm_top5_em: float

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "reranked": {"top1_em": self.top1_em, "top5_em": self.top5_em},
            "model_order": {
                "top1_em": self.baseline_top1_em,
                "top5_em": self.baseline_top5_em,
            },
            "normalized_scores": {"top1_em": self.norm_top1_em, "top5_em": self.norm_top5_em},
            "unnormalized_scores": {
                "top1_em": self.unnorm_top1_em,
                "top5_em": self.unnorm_top5_em,
            },
        }

    def table(self) -> str:
        rows = [
            ("model order", self.baseline_top1_em, self.baseline_top5_em),
            ("unnormalized scores", self.unnorm_top1_em, self.unnorm_top5_em),
            ("normalized scores", self.norm_top1_em, self.norm_top5_em),
            ("reranked", self.top1_em, self.top5_em),
        ]
        lines = [f"{'ordering':<22}{'top1_em':>10}{'top5_em':>10}"]
        for name, t1, t5 in rows:
            lines.append(f"{name:<22}{100 * t1:>10.1f}{100 * t5:>10.1f}")
        return "\n".join(lines) + "\n"


def _topk_correct(record: ExampleRecord, ordered_indices: Sequence[int], k: int,
                  em_strict: bool = False) -> bool:
    return any(
        prediction_correct(record.candidates[i].text, record.gold_answers, strict=em_strict)
        for i in ordered_indices[:k]
    )


def _sorted_block(scores: np.ndarray) -> list[int]:
    # descending by score; stable, so ties keep the model-score order
    return list(np.argsort(-scores, kind="stable"))


def rerank_example(
    record: ExampleRecord,
    model: CalibratorModel,
    top_n: int = 1000,
    em_strict: bool = False,
) -> RerankResult:
    """Reorder one record's candidates by calibrator score.

    Only the first top_n candidates are scored; the rest stay below them in
    model order with a score of -inf (present in the permutation, never
    promoted).
    """
    if record.task_kind is not TaskKind.OPEN_EXTRACTIVE:
        raise RerankError(
            f"record '{record.id}' is {record.task_kind.value}, reranking applies "
            "to open_extractive records"
        )
    if top_n < 1:
        raise RerankError("top_n must be >= 1")
    n = len(record.candidates)
    block = min(top_n, n)
    rows = [
        build_features(record, i, model.feature_config).values for i in range(block)
    ]
    scores = model.predict_proba(np.vstack(rows))
    reordered = [(int(i), float(scores[i])) for i in _sorted_block(scores)]
    reordered.extend((i, float("-inf")) for i in range(block, n))
    ordered_indices = [i for i, _ in reordered]
    return RerankResult(
        example_id=record.id,
        reordered=reordered,
        top1_correct=_topk_correct(record, ordered_indices, 1, em_strict),
        top5_correct=_topk_correct(record, ordered_indices, 5, em_strict),
    )


def _em_over(records, order_fn: Callable[[ExampleRecord], Sequence[int]],
             em_strict: bool = False) -> tuple[float, float]:
    top1 = top5 = 0
    count = 0
    for record in records:
        order = order_fn(record)
        top1 += _topk_correct(record, order, 1, em_strict)
        top5 += _topk_correct(record, order, 5, em_strict)
        count += 1
    return top1 / count, top5 / count


def _norm_score_order(record: ExampleRecord) -> list[int]:
    cfg = FeatureConfig(parts=(FeaturePart.NORM_SCORES,), pooling=Pooling.MEAN, hidden_dim=1)
    prods = np.array(
        [
            float(np.prod(build_features(record, i, cfg).values))
            for i in range(len(record.candidates))
        ]
    )
    return _sorted_block(prods)


def _unnorm_score_order(record: ExampleRecord) -> list[int]:
    prods = np.array(
        [c.passage_score * c.model_score for c in record.candidates], dtype=np.float64
    )
    return _sorted_block(prods)


def rerank_eval(
    records: Iterable[ExampleRecord],
    model: CalibratorModel,
    top_n: int = 1000,
    em_strict: bool = False,
) -> tuple[RerankEvalReport, list[RerankResult]]:
    """Rerank a record collection and report EM against the baselines."""
    records = list(records)
    if not records:
        raise RerankError("rerank_eval needs a nonempty record collection")
    results = [rerank_example(r, model, top_n, em_strict) for r in records]
    n = len(records)
    top1 = sum(r.top1_correct for r in results) / n
    top5 = sum(r.top5_correct for r in results) / n
    base1, base5 = _em_over(records, lambda r: range(len(r.candidates)), em_strict)
    norm1, norm5 = _em_over(records, _norm_score_order, em_strict)
    unnorm1, unnorm5 = _em_over(records, _unnorm_score_order, em_strict)
    report = RerankEvalReport(
        n_examples=n,
        top1_em=top1,
        top5_em=top5,
        baseline_top1_em=base1,
        baseline_top5_em=base5,
        norm_top1_em=norm1,
        norm_top5_em=norm5,
        unnorm_top1_em=unnorm1,
        unnorm_top5_em=unnorm5,
    )
    return report, results


def write_rerank_results(results: Iterable[RerankResult], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for result in results:
            fh.write(result.to_line())
            fh.write("\n")
            count += 1
    return count
