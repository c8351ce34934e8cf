"""Standalone writer for the cqa-v1 record format.

Mirrors the toolkit's line format byte-for-byte (fixed key order, base64
little-endian float32 embeddings) without importing the toolkit: the file
format is the only contract between the two packages.
"""

from __future__ import annotations

import base64
import json
import re
import string

import numpy as np

FORMAT_VERSION = "cqa-v1"

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """The toolkit's exact-match normalization (SQuAD convention)."""
    text = text.lower()
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds) -> bool:
    golds = list(golds)
    if not golds:
        return normalize_answer(prediction) == ""
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(g) for g in golds)


def encode_array(values: np.ndarray, kind: str) -> dict:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if kind == "tokens":
        n, m = arr.shape
    else:
        arr = arr.reshape(-1)
        n, m = 1, arr.shape[0]
    return {
        "kind": kind,
        "n": int(n),
        "m": int(m),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def candidate_obj(
    text: str,
    model_score: float,
    start_logit: float | None = None,
    end_logit: float | None = None,
    passage_id: int | None = None,
    passage_score: float | None = None,
    log_likelihood: float | None = None,
    span_embedding: np.ndarray | None = None,
    is_correct: bool | None = None,
) -> dict:
    obj: dict = {"text": text, "model_score": float(model_score)}
    if start_logit is not None:
        obj["start_logit"] = float(start_logit)
    if end_logit is not None:
        obj["end_logit"] = float(end_logit)
    if passage_id is not None:
        obj["passage_id"] = int(passage_id)
    if passage_score is not None:
        obj["passage_score"] = float(passage_score)
    if log_likelihood is not None:
        obj["log_likelihood"] = float(log_likelihood)
    if span_embedding is not None:
        obj["span_embedding"] = encode_array(span_embedding, "pooled")
    if is_correct is not None:
        obj["is_correct"] = bool(is_correct)
    return obj


def record_line(
    rid: str,
    task_kind: str,
    question: str,
    context: str | None,
    gold_answers: list[str],
    candidates: list[dict],
    original: dict,
    hidden_dim: int,
    question_bt: dict | None = None,
    context_bt: dict | None = None,
    cls_vec: dict | None = None,
    aux: dict | None = None,
) -> str:
    obj: dict = {
        "version": FORMAT_VERSION,
        "id": rid,
        "task_kind": task_kind,
        "question": question,
    }
    if context is not None:
        obj["context"] = context
    obj["gold_answers"] = gold_answers
    obj["candidates"] = candidates
    bundle: dict = {"original": original}
    if question_bt is not None:
        bundle["question_bt"] = question_bt
    if context_bt is not None:
        bundle["context_bt"] = context_bt
    if cls_vec is not None:
        bundle["cls"] = cls_vec
    bundle["hidden_dim"] = int(hidden_dim)
    obj["embeddings"] = bundle
    if aux is not None:
        obj["aux"] = aux
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def aux_obj(
    top5_softmax,
    dropout_mean_top5,
    dropout_var_top5,
    context_length: int,
    prediction_length: int,
) -> dict:
    return {
        "top5_softmax": [float(v) for v in top5_softmax],
        "dropout_mean_top5": [float(v) for v in dropout_mean_top5],
        "dropout_var_top5": [float(v) for v in dropout_var_top5],
        "context_length": int(context_length),
        "prediction_length": int(prediction_length),
    }
