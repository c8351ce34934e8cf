"""Dataset loading: flat rc/open JSON plus SQuAD-style JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .config import AdapterError


@dataclass
class QaExample:
    id: str
    question: str
    context: str | None  # None for open-retrieval examples
    answers: list[str]


@dataclass
class Dataset:
    examples: list[QaExample]
    corpus: list[str]  # retrieval passages (open setting only)


def load_dataset(path: str, kind: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if kind == "rc_json":
        return _load_rc(obj)
    if kind == "squad_json":
        return _load_squad(obj)
    if kind == "open_json":
        return _load_open(obj)
    raise AdapterError(f"unknown dataset kind {kind!r}")


def _load_rc(obj) -> Dataset:
    examples = [
        QaExample(
            id=str(e["id"]),
            question=e["question"],
            context=e["context"],
            answers=list(e.get("answers", [])),
        )
        for e in obj["examples"]
    ]
    return Dataset(examples=examples, corpus=[])


def _load_squad(obj) -> Dataset:
    examples = []
    for article in obj["data"]:
        for paragraph in article["paragraphs"]:
            context = paragraph["context"]
            for qa in paragraph["qas"]:
                answers = [a["text"] for a in qa.get("answers", [])]
                examples.append(
                    QaExample(
                        id=str(qa["id"]),
                        question=qa["question"],
                        context=context,
                        answers=answers,
                    )
                )
    return Dataset(examples=examples, corpus=[])


def _load_open(obj) -> Dataset:
    examples = [
        QaExample(
            id=str(e["id"]),
            question=e["question"],
            context=None,
            answers=list(e.get("answers", [])),
        )
        for e in obj["examples"]
    ]
    corpus = list(obj.get("corpus", []))
    if not corpus:
        raise AdapterError("open_json dataset needs a nonempty corpus")
    return Dataset(examples=examples, corpus=corpus)
