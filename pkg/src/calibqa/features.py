"""Feature assembly for correctness calibrators.

A FeatureConfig names an ordered list of feature parts; build_features
concatenates them into one numeric vector per (record, candidate). Embedding
parts are mean-pooled token representations of the original or backtranslated
inputs; the 17-feature baseline combines the candidate-set softmax with
precomputed dropout statistics and length counts.

All functions here are pure over immutable records and safe to run in
parallel across records.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .records import Candidate, Embedding, ExampleRecord

CONFIG_FORMAT = "cqa-features-v1"


class FeatureError(Exception):
    """Base class for feature assembly errors."""


class MissingFeatureError(FeatureError):
    """A config part needs a source the record does not carry."""

    def __init__(self, part: str, record_id: str, detail: str):
        self.part = part
        self.record_id = record_id
        super().__init__(f"part '{part}' unavailable for record '{record_id}': {detail}")


class FeaturePart(str, Enum):
    MAXPROB = "maxprob"
    KAMATH17 = "kamath17"
    EMB_ORIGINAL = "emb_original"
    EMB_QUESTION_BT = "emb_question_bt"
    EMB_CONTEXT_BT = "emb_context_bt"
    EMB_CLS = "emb_cls"
    LIKELIHOOD = "likelihood"
    NORM_SCORES = "norm_scores"
    UNNORM_SCORES = "unnorm_scores"
    SPAN_EMBEDDING = "span_embedding"
    # raw (unsoftmaxed) max candidate score, kept separate from maxprob so the
    # bounded probability stays the default
    MAX_RAW_SCORE = "max_raw_score"


class Pooling(str, Enum):
    MEAN = "mean"
    CLS = "cls"


_EMBEDDING_PARTS = {
    FeaturePart.EMB_ORIGINAL,
    FeaturePart.EMB_QUESTION_BT,
    FeaturePart.EMB_CONTEXT_BT,
    FeaturePart.EMB_CLS,
    FeaturePart.SPAN_EMBEDDING,
}


@dataclass(frozen=True)
class FeatureConfig:
    """Declarative feature-set selection.

    parts: ordered, duplicate-free selection of feature parts.
    pooling: how embedding parts collapse token matrices (mean pooling or the
        CLS-token vector).
    hidden_dim: embedding dimension m the records must carry.
    """

    parts: tuple[FeaturePart, ...]
    pooling: Pooling = Pooling.MEAN
    hidden_dim: int = 0

    def __post_init__(self):
        if not self.parts:
            raise FeatureError("feature config needs at least one part")
        if len(set(self.parts)) != len(self.parts):
            raise FeatureError("duplicate feature parts")
        if any(p in _EMBEDDING_PARTS for p in self.parts) and self.hidden_dim < 1:
            raise FeatureError("embedding parts require a positive hidden_dim")

    def part_dim(self, part: FeaturePart) -> int:
        if part in _EMBEDDING_PARTS:
            return self.hidden_dim
        return {
            FeaturePart.MAXPROB: 1,
            FeaturePart.KAMATH17: 17,
            FeaturePart.LIKELIHOOD: 1,
            FeaturePart.NORM_SCORES: 2,
            FeaturePart.UNNORM_SCORES: 2,
            FeaturePart.MAX_RAW_SCORE: 1,
        }[part]

    def dimension(self) -> int:
        return sum(self.part_dim(p) for p in self.parts)

    def canonical_text(self) -> str:
        """Canonical serialized form, embedded in model files."""
        parts = ",".join(p.value for p in self.parts)
        return (
            f"{CONFIG_FORMAT};parts={parts};pooling={self.pooling.value};"
            f"hidden_dim={self.hidden_dim}"
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_canonical_text(cls, text: str) -> "FeatureConfig":
        fields = text.split(";")
        if not fields or fields[0] != CONFIG_FORMAT:
            raise FeatureError(f"unsupported feature config encoding: {text!r}")
        kv = dict(f.split("=", 1) for f in fields[1:])
        parts = tuple(FeaturePart(p) for p in kv["parts"].split(","))
        return cls(
            parts=parts,
            pooling=Pooling(kv["pooling"]),
            hidden_dim=int(kv["hidden_dim"]),
        )

    @classmethod
    def from_part_names(
        cls, names, pooling: str = "mean", hidden_dim: int = 0
    ) -> "FeatureConfig":
        return cls(
            parts=tuple(FeaturePart(n.strip()) for n in names),
            pooling=Pooling(pooling),
            hidden_dim=hidden_dim,
        )


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    config_fingerprint: str
    example_id: str
    candidate_index: int


@dataclass(eq=False)
class FeatureMatrix:
    """Stacked feature vectors plus row bookkeeping for scoring/reranking."""

    values: np.ndarray  # (rows, dim) float64
    labels: np.ndarray | None  # (rows,) int {0,1} or None when unlabeled
    fingerprint: str
    example_ids: list[str]
    candidate_indices: np.ndarray  # (rows,) int

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def pool_mean(tokens: np.ndarray) -> np.ndarray:
    """Column means of a token matrix: one m-vector per n x m input."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise FeatureError("pool_mean needs a nonempty n x m matrix")
    if not np.all(np.isfinite(tokens)):
        raise FeatureError("pool_mean input contains non-finite entries")
    return tokens.mean(axis=0)


def candidate_softmax(scores) -> np.ndarray:
    """Softmax over a record's candidate model scores (numerically stable)."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _pooled(emb: Embedding) -> np.ndarray:
    if emb.kind == "pooled":
        return np.asarray(emb.values, dtype=np.float64)
    return pool_mean(emb.values)


# ---------------------------------------------------------------------------
# part builders
# ---------------------------------------------------------------------------


def _sorted_probs(record: ExampleRecord) -> np.ndarray:
    probs = candidate_softmax([c.model_score for c in record.candidates])
    return np.sort(probs)[::-1]


def _maxprob(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    return _sorted_probs(record)[:1]


def _max_raw_score(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    return np.array([max(c.model_score for c in record.candidates)], dtype=np.float64)


def _kamath17(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if record.aux is None:
        raise MissingFeatureError(FeaturePart.KAMATH17.value, record.id, "no aux signals")
    probs = _sorted_probs(record)
    second_to_fifth = np.zeros(4)
    tail = probs[1:5]
    second_to_fifth[: tail.shape[0]] = tail
    return np.concatenate(
        [
            probs[:1],
            second_to_fifth,
            np.asarray(record.aux.dropout_mean_top5, dtype=np.float64),
            np.asarray(record.aux.dropout_var_top5, dtype=np.float64),
            [float(record.aux.context_length)],
            [float(record.aux.prediction_length)],
        ]
    )


def _embedding_part(name: str, part: FeaturePart):
    def build(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
        if config.pooling is Pooling.CLS:
            if part is not FeaturePart.EMB_ORIGINAL:
                raise MissingFeatureError(
                    part.value, record.id, "cls pooling only applies to the original input"
                )
            if record.embeddings.cls is None:
                raise MissingFeatureError(part.value, record.id, "no cls vector")
            return np.asarray(record.embeddings.cls, dtype=np.float64)
        emb = getattr(record.embeddings, name)
        if emb is None:
            raise MissingFeatureError(part.value, record.id, f"no {name} embedding")
        return _pooled(emb)

    return build


def _emb_cls(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if record.embeddings.cls is None:
        raise MissingFeatureError(FeaturePart.EMB_CLS.value, record.id, "no cls vector")
    return np.asarray(record.embeddings.cls, dtype=np.float64)


def _likelihood(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if cand.log_likelihood is None:
        raise MissingFeatureError(FeaturePart.LIKELIHOOD.value, record.id, "no log_likelihood")
    return np.array([np.exp(cand.log_likelihood)], dtype=np.float64)


def _passage_group(record: ExampleRecord, cand: Candidate) -> list[Candidate]:
    """Up to ten spans of the candidate's passage, ranked by model score."""
    group = [c for c in record.candidates if c.passage_id == cand.passage_id]
    group = group[:10]
    if cand not in group:
        group.append(cand)
    return group


def _norm_scores(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if cand.passage_id is None or cand.passage_score is None:
        raise MissingFeatureError(
            FeaturePart.NORM_SCORES.value, record.id, "candidate carries no passage scores"
        )
    passage_scores: dict[int, float] = {}
    for c in record.candidates:
        if c.passage_id is not None and c.passage_id not in passage_scores:
            passage_scores[c.passage_id] = c.passage_score
    pids = list(passage_scores)
    p_soft = candidate_softmax([passage_scores[p] for p in pids])
    p_norm = float(p_soft[pids.index(cand.passage_id)])
    group = _passage_group(record, cand)
    s_soft = candidate_softmax([c.model_score for c in group])
    s_norm = float(s_soft[group.index(cand)])
    return np.array([p_norm, s_norm], dtype=np.float64)


def _unnorm_scores(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if cand.passage_score is None:
        raise MissingFeatureError(
            FeaturePart.UNNORM_SCORES.value, record.id, "candidate carries no passage score"
        )
    return np.array([cand.passage_score, cand.model_score], dtype=np.float64)


def _span_embedding(record: ExampleRecord, cand: Candidate, config: FeatureConfig) -> np.ndarray:
    if cand.span_embedding is None:
        raise MissingFeatureError(
            FeaturePart.SPAN_EMBEDDING.value, record.id, "candidate carries no span embedding"
        )
    return np.asarray(cand.span_embedding, dtype=np.float64)


_BUILDERS = {
    FeaturePart.MAXPROB: _maxprob,
    FeaturePart.MAX_RAW_SCORE: _max_raw_score,
    FeaturePart.KAMATH17: _kamath17,
    FeaturePart.EMB_ORIGINAL: _embedding_part("original", FeaturePart.EMB_ORIGINAL),
    FeaturePart.EMB_QUESTION_BT: _embedding_part("question_bt", FeaturePart.EMB_QUESTION_BT),
    FeaturePart.EMB_CONTEXT_BT: _embedding_part("context_bt", FeaturePart.EMB_CONTEXT_BT),
    FeaturePart.EMB_CLS: _emb_cls,
    FeaturePart.LIKELIHOOD: _likelihood,
    FeaturePart.NORM_SCORES: _norm_scores,
    FeaturePart.UNNORM_SCORES: _unnorm_scores,
    FeaturePart.SPAN_EMBEDDING: _span_embedding,
}


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def build_features(
    record: ExampleRecord, candidate_index: int, config: FeatureConfig
) -> FeatureVector:
    """Assemble the configured feature vector for one candidate of a record."""
    if not 0 <= candidate_index < len(record.candidates):
        raise FeatureError(
            f"candidate_index {candidate_index} out of range for record '{record.id}'"
        )
    cand = record.candidates[candidate_index]
    blocks = []
    for part in config.parts:
        block = _BUILDERS[part](record, cand, config)
        expected = config.part_dim(part)
        if block.shape != (expected,):
            raise FeatureError(
                f"part '{part.value}' produced {block.shape[0]} values, expected "
                f"{expected} (record '{record.id}')"
            )
        blocks.append(block)
    values = np.concatenate(blocks)
    if not np.all(np.isfinite(values)):
        raise FeatureError(f"non-finite feature values for record '{record.id}'")
    return FeatureVector(
        values=values,
        config_fingerprint=config.fingerprint(),
        example_id=record.id,
        candidate_index=candidate_index,
    )


def feature_matrix(
    records, config: FeatureConfig, per_candidate: bool = False, with_labels: bool = True
) -> FeatureMatrix:
    """Build the design matrix over a record collection.

    per_candidate=False scores candidate 0 (the model's top answer), one row
    per record; per_candidate=True emits one row per (record, candidate) for
    reranking. Labels come from is_correct and must be present on every scored
    candidate unless with_labels=False.
    """
    rows: list[np.ndarray] = []
    labels: list[int] = []
    example_ids: list[str] = []
    cand_indices: list[int] = []
    missing: list[str] = []
    fingerprint = config.fingerprint()
    for record in records:
        indices = range(len(record.candidates)) if per_candidate else (0,)
        for ci in indices:
            fv = build_features(record, ci, config)
            rows.append(fv.values)
            example_ids.append(record.id)
            cand_indices.append(ci)
            if with_labels:
                flag = record.candidates[ci].is_correct
                if flag is None:
                    missing.append(record.id)
                else:
                    labels.append(int(flag))
    if with_labels and missing:
        raise FeatureError(
            "records missing is_correct labels: " + ", ".join(sorted(set(missing)))
        )
    if not rows:
        raise FeatureError("no records to featurize")
    return FeatureMatrix(
        values=np.vstack(rows),
        labels=np.asarray(labels, dtype=np.int64) if with_labels else None,
        fingerprint=fingerprint,
        example_ids=example_ids,
        candidate_indices=np.asarray(cand_indices, dtype=np.int64),
    )
