import numpy as np
import pytest

from calibqa.records import (
    AuxSignals,
    Candidate,
    Embedding,
    EmbeddingBundle,
    ExampleRecord,
    TaskKind,
)


def make_record(
    rid="ex-1",
    task_kind=TaskKind.READING_COMPREHENSION,
    question="what is it",
    context="it is the answer",
    gold_answers=("the answer",),
    candidate_specs=None,
    m=4,
    with_aux=True,
    with_bt=True,
    seed=0,
):
    """Small, always-valid record with hand-controllable candidates.

    candidate_specs: list of dicts overriding Candidate fields; model scores
    default to a descending ladder.
    """
    rng = np.random.default_rng(seed)
    if candidate_specs is None:
        candidate_specs = [
            {"text": "the answer", "is_correct": True},
            {"text": "a decoy", "is_correct": False},
        ]
    candidates = []
    for i, spec in enumerate(candidate_specs):
        base = {
            "text": f"candidate {i}",
            "model_score": float(len(candidate_specs) - i),
            "start_logit": 0.5,
            "end_logit": 0.5,
        }
        if task_kind is TaskKind.OPEN_EXTRACTIVE:
            base.update({"passage_id": i // 2, "passage_score": 1.0})
        if task_kind is TaskKind.OPEN_GENERATIVE:
            base.update({"log_likelihood": -1.0 - i, "model_score": -1.0 - i})
            base.pop("start_logit")
            base.pop("end_logit")
        base.update(spec)
        candidates.append(Candidate(**base))
    tokens = rng.normal(size=(3, m)).astype(np.float32)
    bundle = EmbeddingBundle(
        original=Embedding(kind="tokens", values=tokens),
        question_bt=Embedding(
            kind="tokens", values=rng.normal(size=(3, m)).astype(np.float32)
        )
        if with_bt
        else None,
        context_bt=Embedding(
            kind="tokens", values=rng.normal(size=(3, m)).astype(np.float32)
        )
        if with_bt
        else None,
        cls=rng.normal(size=m).astype(np.float32),
        hidden_dim=m,
    )
    aux = None
    if with_aux:
        aux = AuxSignals(
            top5_softmax=(0.5, 0.2, 0.1, 0.1, 0.1),
            dropout_mean_top5=(0.5, 0.2, 0.1, 0.1, 0.1),
            dropout_var_top5=(0.05, 0.04, 0.03, 0.02, 0.01),
            context_length=8,
            prediction_length=2,
        )
    return ExampleRecord(
        id=rid,
        task_kind=task_kind,
        question=question,
        context=None if task_kind is TaskKind.OPEN_GENERATIVE else context,
        gold_answers=tuple(gold_answers),
        candidates=tuple(candidates),
        embeddings=bundle,
        aux=aux,
    )


@pytest.fixture
def record_factory():
    return make_record
