"""Line-delimited record format for QA model outputs.

One record per line, JSON-encoded, version-tagged. Embedding matrices are
base64-encoded little-endian float32, row-major, so files stay diffable but
compact. Readers are streaming and stateless; records are immutable after
validation and safe to share across threads.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import re
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

FORMAT_VERSION = "cqa-v1"

_RECORD_KEYS = (
    "version",
    "id",
    "task_kind",
    "question",
    "context",
    "gold_answers",
    "candidates",
    "embeddings",
    "aux",
    "split_tag",
)
_CANDIDATE_KEYS = (
    "text",
    "model_score",
    "start_logit",
    "end_logit",
    "passage_id",
    "passage_score",
    "log_likelihood",
    "span_embedding",
    "is_correct",
)
_BUNDLE_KEYS = ("original", "question_bt", "context_bt", "cls", "hidden_dim")
_AUX_KEYS = (
    "top5_softmax",
    "dropout_mean_top5",
    "dropout_var_top5",
    "context_length",
    "prediction_length",
)


class InterchangeError(Exception):
    """Base class for record format errors."""


class ParseError(InterchangeError):
    """A line could not be decoded as a record at all."""


class ValidationError(InterchangeError):
    """A decoded record violates an invariant.

    Carries the offending record id and field name when known.
    """

    def __init__(self, message: str, record_id: str | None = None, field_name: str | None = None):
        self.record_id = record_id
        self.field_name = field_name
        prefix = ""
        if record_id is not None:
            prefix += f"record '{record_id}': "
        if field_name is not None:
            prefix += f"field '{field_name}': "
        super().__init__(prefix + message)


class TaskKind(str, Enum):
    READING_COMPREHENSION = "reading_comprehension"
    OPEN_EXTRACTIVE = "open_extractive"
    OPEN_GENERATIVE = "open_generative"


class SplitTag(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


# ---------------------------------------------------------------------------
# answer normalization / exact match
# ---------------------------------------------------------------------------

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """SQuAD-style answer normalization.

    Lowercase, drop ASCII punctuation, drop standalone articles, collapse
    whitespace runs.
    """
    text = text.lower()
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Iterable[str], strict: bool = False) -> bool:
    """True iff the prediction equals any gold answer.

    Default comparison applies :func:`normalize_answer` to both sides;
    ``strict=True`` selects raw byte equality instead.
    """
    if strict:
        return any(prediction == g for g in golds)
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(g) for g in golds)


def prediction_correct(prediction: str, golds: Iterable[str], strict: bool = False) -> bool:
    """Correctness rule including unanswerable examples.

    With no gold answers the example is unanswerable and a prediction is
    correct iff it is (normalized-)empty; otherwise exact match applies.
    """
    golds = list(golds)
    if not golds:
        if strict:
            return prediction == ""
        return normalize_answer(prediction) == ""
    return exact_match(prediction, golds, strict=strict)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Embedding:
    """A token matrix (n x m) or a pre-pooled m-vector."""

    kind: str  # "tokens" | "pooled"
    values: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return int(self.values.shape[-1])

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0]) if self.values.ndim == 2 else 1


@dataclass(frozen=True, eq=False)
class EmbeddingBundle:
    original: Embedding
    question_bt: Embedding | None = None
    context_bt: Embedding | None = None
    cls: np.ndarray | None = None
    hidden_dim: int = 0


@dataclass(frozen=True, eq=False)
class Candidate:
    text: str
    model_score: float
    start_logit: float | None = None
    end_logit: float | None = None
    passage_id: int | None = None
    passage_score: float | None = None
    log_likelihood: float | None = None
    span_embedding: np.ndarray | None = None
    is_correct: bool | None = None


@dataclass(frozen=True)
class AuxSignals:
    top5_softmax: tuple[float, ...]
    dropout_mean_top5: tuple[float, ...]
    dropout_var_top5: tuple[float, ...]
    context_length: int
    prediction_length: int


@dataclass(frozen=True, eq=False)
class ExampleRecord:
    """One QA evaluation example with candidates, embeddings and gold answers."""

    id: str
    task_kind: TaskKind
    question: str
    context: str | None
    gold_answers: tuple[str, ...]
    candidates: tuple[Candidate, ...]
    embeddings: EmbeddingBundle
    aux: AuxSignals | None = None
    split_tag: SplitTag | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, record_id: str, field_name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite values", record_id, field_name)


def validate_record(record: ExampleRecord, em_strict: bool = False) -> None:
    """Raise :class:`ValidationError` if the record violates any invariant."""
    rid = record.id
    if not rid:
        raise ValidationError("empty id", rid, "id")
    if not isinstance(record.task_kind, TaskKind):
        raise ValidationError(f"unknown task_kind {record.task_kind!r}", rid, "task_kind")

    if record.task_kind is TaskKind.OPEN_GENERATIVE:
        if record.context is not None:
            raise ValidationError("context must be absent for open_generative", rid, "context")
    elif record.context is None:
        raise ValidationError(
            f"context required for {record.task_kind.value}", rid, "context"
        )

    if not record.candidates:
        raise ValidationError("empty candidates", rid, "candidates")

    m = record.embeddings.hidden_dim
    if m < 1:
        raise ValidationError("hidden_dim must be positive", rid, "embeddings.hidden_dim")
    for name in ("original", "question_bt", "context_bt"):
        emb: Embedding | None = getattr(record.embeddings, name)
        if emb is None:
            if name == "original":
                raise ValidationError("original embedding required", rid, "embeddings.original")
            continue
        if emb.kind not in ("tokens", "pooled"):
            raise ValidationError(f"unknown embedding kind {emb.kind!r}", rid, f"embeddings.{name}")
        if emb.kind == "tokens" and (emb.values.ndim != 2 or emb.values.shape[0] < 1):
            raise ValidationError("token matrix needs at least one row", rid, f"embeddings.{name}")
        if emb.hidden_dim != m:
            raise ValidationError(
                f"hidden dim {emb.hidden_dim} != declared {m}", rid, f"embeddings.{name}"
            )
        _check_finite(emb.values, rid, f"embeddings.{name}")
    if record.embeddings.cls is not None:
        cls = record.embeddings.cls
        if cls.ndim != 1 or cls.shape[0] != m:
            raise ValidationError(f"cls vector must have length {m}", rid, "embeddings.cls")
        _check_finite(cls, rid, "embeddings.cls")

    prev = math.inf
    for i, cand in enumerate(record.candidates):
        where = f"candidates[{i}]"
        if not math.isfinite(cand.model_score):
            raise ValidationError("non-finite model_score", rid, where)
        if cand.model_score > prev:
            raise ValidationError(
                "candidates not ordered by descending model_score", rid, where
            )
        prev = cand.model_score
        if record.task_kind is TaskKind.OPEN_EXTRACTIVE:
            for fname in ("passage_id", "passage_score", "start_logit", "end_logit"):
                if getattr(cand, fname) is None:
                    raise ValidationError(f"missing {fname}", rid, where)
        elif record.task_kind is TaskKind.OPEN_GENERATIVE:
            if cand.log_likelihood is None:
                raise ValidationError("missing log_likelihood", rid, where)
        else:
            for fname in ("start_logit", "end_logit"):
                if getattr(cand, fname) is None:
                    raise ValidationError(f"missing {fname}", rid, where)
        if cand.span_embedding is not None:
            if cand.span_embedding.ndim != 1 or cand.span_embedding.shape[0] != m:
                raise ValidationError(
                    f"span_embedding must have length {m}", rid, where
                )
            _check_finite(cand.span_embedding, rid, where)
        if cand.is_correct is not None:
            derived = prediction_correct(cand.text, record.gold_answers, strict=em_strict)
            if cand.is_correct != derived:
                raise ValidationError(
                    f"is_correct={cand.is_correct} disagrees with exact-match recomputation",
                    rid,
                    where,
                )

    if record.aux is not None:
        aux = record.aux
        for fname in ("top5_softmax", "dropout_mean_top5", "dropout_var_top5"):
            vals = getattr(aux, fname)
            if len(vals) != 5:
                raise ValidationError(f"{fname} must hold exactly 5 values", rid, f"aux.{fname}")
            if any(not math.isfinite(v) for v in vals):
                raise ValidationError("non-finite values", rid, f"aux.{fname}")
        for j, v in enumerate(aux.top5_softmax):
            if not 0.0 <= v <= 1.0:
                raise ValidationError("top5_softmax values must lie in [0,1]", rid, "aux.top5_softmax")
            if j > 0 and v > aux.top5_softmax[j - 1]:
                raise ValidationError("top5_softmax must be nonincreasing", rid, "aux.top5_softmax")
        if aux.context_length < 0 or aux.prediction_length < 0:
            raise ValidationError("lengths must be nonnegative", rid, "aux")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _encode_embedding(emb: Embedding) -> dict:
    values = np.ascontiguousarray(emb.values, dtype="<f4")
    if emb.kind == "tokens":
        n, m = values.shape
    else:
        values = values.reshape(-1)
        n, m = 1, values.shape[0]
    return {
        "kind": emb.kind,
        "n": int(n),
        "m": int(m),
        "data": base64.b64encode(values.tobytes()).decode("ascii"),
    }


def _encode_vector(vec: np.ndarray) -> dict:
    return _encode_embedding(Embedding(kind="pooled", values=vec))


def _decode_embedding(obj: dict, record_id: str, field_name: str) -> Embedding:
    try:
        kind = obj["kind"]
        n = int(obj["n"])
        m = int(obj["m"])
        raw = base64.b64decode(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad embedding encoding: {exc}", record_id, field_name)
    if kind not in ("tokens", "pooled"):
        raise ValidationError(f"unknown embedding kind {kind!r}", record_id, field_name)
    if len(raw) != n * m * 4:
        raise ValidationError(
            f"embedding payload holds {len(raw)} bytes, expected {n * m * 4}",
            record_id,
            field_name,
        )
    values = np.frombuffer(raw, dtype="<f4")
    if kind == "tokens":
        values = values.reshape(n, m)
    else:
        if n != 1:
            raise ValidationError("pooled embedding must have n=1", record_id, field_name)
        values = values.reshape(m)
    return Embedding(kind=kind, values=values.astype(np.float32))


def _decode_vector(obj: dict, record_id: str, field_name: str) -> np.ndarray:
    emb = _decode_embedding(obj, record_id, field_name)
    return emb.values.reshape(-1)


def record_to_obj(record: ExampleRecord) -> dict:
    """Canonical JSON object form: fixed key order, optional fields omitted."""
    obj: dict = {
        "version": FORMAT_VERSION,
        "id": record.id,
        "task_kind": record.task_kind.value,
        "question": record.question,
    }
    if record.context is not None:
        obj["context"] = record.context
    obj["gold_answers"] = list(record.gold_answers)
    cands = []
    for cand in record.candidates:
        cobj: dict = {"text": cand.text, "model_score": cand.model_score}
        for fname in ("start_logit", "end_logit", "passage_id", "passage_score", "log_likelihood"):
            value = getattr(cand, fname)
            if value is not None:
                cobj[fname] = value
        if cand.span_embedding is not None:
            cobj["span_embedding"] = _encode_vector(cand.span_embedding)
        if cand.is_correct is not None:
            cobj["is_correct"] = cand.is_correct
        cands.append(cobj)
    obj["candidates"] = cands
    bundle: dict = {"original": _encode_embedding(record.embeddings.original)}
    if record.embeddings.question_bt is not None:
        bundle["question_bt"] = _encode_embedding(record.embeddings.question_bt)
    if record.embeddings.context_bt is not None:
        bundle["context_bt"] = _encode_embedding(record.embeddings.context_bt)
    if record.embeddings.cls is not None:
        bundle["cls"] = _encode_vector(record.embeddings.cls)
    bundle["hidden_dim"] = record.embeddings.hidden_dim
    obj["embeddings"] = bundle
    if record.aux is not None:
        obj["aux"] = {
            "top5_softmax": list(record.aux.top5_softmax),
            "dropout_mean_top5": list(record.aux.dropout_mean_top5),
            "dropout_var_top5": list(record.aux.dropout_var_top5),
            "context_length": record.aux.context_length,
            "prediction_length": record.aux.prediction_length,
        }
    if record.split_tag is not None:
        obj["split_tag"] = record.split_tag.value
    for key in sorted(record.extras):
        obj[key] = record.extras[key]
    return obj


def record_to_line(record: ExampleRecord) -> str:
    return json.dumps(record_to_obj(record), ensure_ascii=False, separators=(",", ":"))


def record_from_obj(obj: dict, strict: bool = False, em_strict: bool = False) -> ExampleRecord:
    if not isinstance(obj, dict):
        raise ParseError("record line is not an object")
    version = obj.get("version")
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported version {version!r} (expected {FORMAT_VERSION!r})",
            obj.get("id"),
            "version",
        )
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise ValidationError("missing or empty id", rid, "id")

    extras = {k: obj[k] for k in obj if k not in _RECORD_KEYS}
    if strict and extras:
        raise ValidationError(
            f"unknown keys under --strict: {sorted(extras)}", rid, "record"
        )

    try:
        task_kind = TaskKind(obj["task_kind"])
    except (KeyError, ValueError):
        raise ValidationError(f"bad task_kind {obj.get('task_kind')!r}", rid, "task_kind")

    question = obj.get("question")
    if not isinstance(question, str):
        raise ValidationError("question must be a string", rid, "question")
    context = obj.get("context")
    if context is not None and not isinstance(context, str):
        raise ValidationError("context must be a string when present", rid, "context")
    golds = obj.get("gold_answers")
    if not isinstance(golds, list) or any(not isinstance(g, str) for g in golds):
        raise ValidationError("gold_answers must be a list of strings", rid, "gold_answers")

    raw_cands = obj.get("candidates")
    if not isinstance(raw_cands, list):
        raise ValidationError("candidates must be a list", rid, "candidates")
    candidates = []
    for i, cobj in enumerate(raw_cands):
        where = f"candidates[{i}]"
        if not isinstance(cobj, dict):
            raise ValidationError("candidate must be an object", rid, where)
        unknown = [k for k in cobj if k not in _CANDIDATE_KEYS]
        if strict and unknown:
            raise ValidationError(f"unknown keys under --strict: {sorted(unknown)}", rid, where)
        try:
            text = cobj["text"]
            score = float(cobj["model_score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad candidate: {exc}", rid, where)
        span_emb = None
        if "span_embedding" in cobj:
            span_emb = _decode_vector(cobj["span_embedding"], rid, where)
        candidates.append(
            Candidate(
                text=text,
                model_score=score,
                start_logit=_opt_float(cobj, "start_logit", rid, where),
                end_logit=_opt_float(cobj, "end_logit", rid, where),
                passage_id=_opt_int(cobj, "passage_id", rid, where),
                passage_score=_opt_float(cobj, "passage_score", rid, where),
                log_likelihood=_opt_float(cobj, "log_likelihood", rid, where),
                span_embedding=span_emb,
                is_correct=cobj.get("is_correct"),
            )
        )

    bobj = obj.get("embeddings")
    if not isinstance(bobj, dict) or "original" not in bobj or "hidden_dim" not in bobj:
        raise ValidationError("embeddings must carry original and hidden_dim", rid, "embeddings")
    unknown = [k for k in bobj if k not in _BUNDLE_KEYS]
    if strict and unknown:
        raise ValidationError(f"unknown keys under --strict: {sorted(unknown)}", rid, "embeddings")
    bundle = EmbeddingBundle(
        original=_decode_embedding(bobj["original"], rid, "embeddings.original"),
        question_bt=(
            _decode_embedding(bobj["question_bt"], rid, "embeddings.question_bt")
            if bobj.get("question_bt") is not None
            else None
        ),
        context_bt=(
            _decode_embedding(bobj["context_bt"], rid, "embeddings.context_bt")
            if bobj.get("context_bt") is not None
            else None
        ),
        cls=(
            _decode_vector(bobj["cls"], rid, "embeddings.cls")
            if bobj.get("cls") is not None
            else None
        ),
        hidden_dim=int(bobj["hidden_dim"]),
    )

    aux = None
    if obj.get("aux") is not None:
        aobj = obj["aux"]
        if not isinstance(aobj, dict):
            raise ValidationError("aux must be an object", rid, "aux")
        unknown = [k for k in aobj if k not in _AUX_KEYS]
        if strict and unknown:
            raise ValidationError(f"unknown keys under --strict: {sorted(unknown)}", rid, "aux")
        try:
            aux = AuxSignals(
                top5_softmax=tuple(float(v) for v in aobj["top5_softmax"]),
                dropout_mean_top5=tuple(float(v) for v in aobj["dropout_mean_top5"]),
                dropout_var_top5=tuple(float(v) for v in aobj["dropout_var_top5"]),
                context_length=int(aobj["context_length"]),
                prediction_length=int(aobj["prediction_length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad aux block: {exc}", rid, "aux")

    split_tag = None
    if obj.get("split_tag") is not None:
        try:
            split_tag = SplitTag(obj["split_tag"])
        except ValueError:
            raise ValidationError(f"bad split_tag {obj['split_tag']!r}", rid, "split_tag")

    record = ExampleRecord(
        id=rid,
        task_kind=task_kind,
        question=question,
        context=context,
        gold_answers=tuple(golds),
        candidates=tuple(candidates),
        embeddings=bundle,
        aux=aux,
        split_tag=split_tag,
        extras=extras,
    )
    validate_record(record, em_strict=em_strict)
    return record


def _opt_float(obj: dict, key: str, rid: str, where: str) -> float | None:
    value = obj.get(key)
    if value is None:
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{key} must be a number", rid, where)


def _opt_int(obj: dict, key: str, rid: str, where: str) -> int | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(f"{key} must be an integer", rid, where)
    return value


# ---------------------------------------------------------------------------
# file operations
# ---------------------------------------------------------------------------


def read_records(
    path, strict: bool = False, em_strict: bool = False
) -> Iterator[ExampleRecord]:
    """Stream validated records from a file, in file order.

    Raises :class:`ParseError` / :class:`ValidationError` with the offending
    line number. Enforces unique ids and a consistent hidden dimension across
    the file.
    """
    seen_ids: set[str] = set()
    hidden_dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed record: {exc}")
            try:
                record = record_from_obj(obj, strict=strict, em_strict=em_strict)
            except ValidationError as exc:
                raise ValidationError(
                    f"line {lineno}: {exc}", exc.record_id, exc.field_name
                ) from exc
            if record.id in seen_ids:
                raise ValidationError(
                    f"line {lineno}: duplicate id", record.id, "id"
                )
            seen_ids.add(record.id)
            if hidden_dim is None:
                hidden_dim = record.embeddings.hidden_dim
            elif record.embeddings.hidden_dim != hidden_dim:
                raise ValidationError(
                    f"line {lineno}: hidden_dim {record.embeddings.hidden_dim} "
                    f"differs from {hidden_dim} earlier in the file",
                    record.id,
                    "embeddings.hidden_dim",
                )
            yield record


def collect_file_errors(path, strict: bool = False, em_strict: bool = False) -> list[str]:
    """Validate a whole file, returning one message per bad line (for `validate`)."""
    errors: list[str] = []
    seen_ids: set[str] = set()
    hidden_dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: parse error: {exc}")
                continue
            try:
                record = record_from_obj(obj, strict=strict, em_strict=em_strict)
            except InterchangeError as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            if record.id in seen_ids:
                errors.append(f"line {lineno}: duplicate id '{record.id}'")
                continue
            seen_ids.add(record.id)
            if hidden_dim is None:
                hidden_dim = record.embeddings.hidden_dim
            elif record.embeddings.hidden_dim != hidden_dim:
                errors.append(
                    f"line {lineno}: hidden_dim {record.embeddings.hidden_dim} "
                    f"differs from {hidden_dim} earlier in the file"
                )
    return errors


def write_records(records: Iterable[ExampleRecord], path) -> int:
    """Write records in canonical line format. Returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(record_to_line(record))
            fh.write("\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _shuffle_key(seed: int, record_id: str) -> str:
    return hashlib.sha256(f"{seed}|{record_id}".encode("utf-8")).hexdigest()


def split_records(
    records: Iterable[ExampleRecord],
    fractions: tuple[float, float, float] = (0.4, 0.1, 0.5),
    seed: int = 0,
) -> tuple[list[ExampleRecord], list[ExampleRecord], list[ExampleRecord]]:
    """Deterministic train/dev/test partition.

    Records are shuffled by a hash of (seed, id), so the partition does not
    depend on storage order. Sizes are floor(f*N) with the remainder assigned
    train, then dev, then test. Output records carry the matching split_tag.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot split an empty record collection")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative reals")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate record ids; splitting needs unique ids")

    shuffled = sorted(records, key=lambda r: _shuffle_key(seed, r.id))
    n = len(shuffled)
    sizes = [int(math.floor(f * n)) for f in fractions]
    remainder = n - sum(sizes)
    for i in range(remainder):
        sizes[i % 3] += 1

    out: list[list[ExampleRecord]] = []
    start = 0
    for size, tag in zip(sizes, (SplitTag.TRAIN, SplitTag.DEV, SplitTag.TEST)):
        part = [replace(r, split_tag=tag) for r in shuffled[start : start + size]]
        out.append(part)
        start += size
    return out[0], out[1], out[2]
