"""Synthetic record generator with controllable difficulty.

Correctness labels come from a logistic model over an 8-dim latent vector;
embeddings expose that latent (rotated into m dims) at a configurable
informativeness, and the candidate score margin exposes it at a separate,
independently configurable informativeness. Gold/distractor strings are
synthesized so exact-match recomputation always agrees with the planted
labels, and every record passes interchange validation.

Generation is deterministic: one counter-based RNG stream per example, so
records are reproducible independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .records import (
    AuxSignals,
    Candidate,
    Embedding,
    EmbeddingBundle,
    ExampleRecord,
    TaskKind,
    validate_record,
)

LATENT_DIM = 8
LABEL_SHARPNESS = 3.0  # slope of the label logistic in the latent margin
SCORE_SCALE = 1.5  # how strongly the top-score gap tracks the latent margin
SCORE_NOISE = 0.8  # noise_std multiplier on the top-score gap
BT_DRIFT = 0.15  # latent drift of backtranslated inputs vs the original
GOLD_SIGNAL = 1.2  # latent offset marking the gold candidate's span embedding
SPAN_LATENT_MIX = 0.6  # how much of the example latent leaks into span embeddings


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_examples: int
    m: int = 16
    score_informativeness: float = 0.5
    embedding_informativeness: float = 0.5
    candidates_per_example: int = 5
    passages_per_example: int = 1
    noise_std: float = 0.5
    seed: int = 0
    task_kind: TaskKind = TaskKind.READING_COMPREHENSION
    label_margin: float = 0.0  # empty band around the label boundary

    def __post_init__(self):
        if self.n_examples < 1:
            raise SynthError("n_examples must be >= 1")
        if self.m < 1:
            raise SynthError("m must be >= 1")
        for name in ("score_informativeness", "embedding_informativeness"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SynthError(f"{name} must lie in [0, 1]")
        if self.candidates_per_example < 1:
            raise SynthError("candidates_per_example must be >= 1")
        if self.passages_per_example < 1:
            raise SynthError("passages_per_example must be >= 1")
        if self.noise_std < 0:
            raise SynthError("noise_std must be nonnegative")
        if not 0.0 <= self.label_margin < 1.0:
            raise SynthError("label_margin must lie in [0, 1)")


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _global_params(spec: SynthSpec):
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 0])
    basis = rng.standard_normal((max(spec.m, LATENT_DIM), LATENT_DIM))
    q, _ = np.linalg.qr(basis)
    rotation = q[: spec.m, :LATENT_DIM]  # m x 8, orthonormal columns when m >= 8
    label_w = rng.standard_normal(LATENT_DIM)
    label_w /= np.linalg.norm(label_w)
    gold_dir = rng.standard_normal(LATENT_DIM)
    gold_dir /= np.linalg.norm(gold_dir)
    return rotation, label_w, gold_dir


def _token_matrix(
    rng: np.random.Generator,
    rotation: np.ndarray,
    latent: np.ndarray,
    n_rows: int,
    emb_inf: float,
    noise_std: float,
) -> np.ndarray:
    signal = emb_inf * (rotation @ latent)
    noise = noise_std * rng.standard_normal((n_rows, rotation.shape[0]))
    return (signal[None, :] + noise).astype(np.float32)


def generate(spec: SynthSpec) -> list[ExampleRecord]:
    """Generate validated records; same spec always yields identical records."""
    rotation, label_w, gold_dir = _global_params(spec)
    k = spec.candidates_per_example
    records = []
    for i in range(spec.n_examples):
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 1, i])
        latent = rng.standard_normal(LATENT_DIM)
        margin = float(label_w @ latent)
        while abs(margin) < spec.label_margin:
            latent = rng.standard_normal(LATENT_DIM)
            margin = float(label_w @ latent)
        if spec.noise_std == 0.0:
            top_correct = margin > 0.0
        else:
            top_correct = rng.random() < expit(LABEL_SHARPNESS * margin)

        # descending score ladder; only the top gap carries the label signal
        top_gap = _softplus(
            SCORE_SCALE * spec.score_informativeness * margin
            + SCORE_NOISE * spec.noise_std * rng.standard_normal()
        )
        lower_gaps = 0.5 + 0.2 * spec.noise_std * rng.random(max(k - 2, 0))
        scores = np.empty(k)
        scores[0] = top_gap
        if k > 1:
            scores[1] = 0.0
            scores[2:] = -np.cumsum(lower_gaps)

        if top_correct:
            gold_pos = 0
        elif k > 1:
            gold_pos = 1 + int(rng.integers(k - 1))
        else:
            gold_pos = -1  # gold answer not among the candidates

        gold_text = f"entity {i} gold"
        texts = [
            gold_text if j == gold_pos else f"entity {i} alt {j}" for j in range(k)
        ]

        task = spec.task_kind
        if task is TaskKind.OPEN_GENERATIVE:
            # express scores as total log-likelihoods (strictly negative)
            scores = scores - scores[0] - 0.1 - 0.05 * np.arange(k)

        spans_per_passage = -(-k // spec.passages_per_example)  # ceil
        passage_ids = [j // spans_per_passage for j in range(k)]
        passage_scores = {}
        for pid in sorted(set(passage_ids)):
            member_scores = [scores[j] for j in range(k) if passage_ids[j] == pid]
            passage_scores[pid] = float(
                max(member_scores) + 0.1 * rng.standard_normal()
            )

        candidates = []
        for j in range(k):
            text = texts[j]
            is_gold = j == gold_pos
            common = dict(
                text=text,
                model_score=float(scores[j]),
                is_correct=is_gold,
            )
            if task is TaskKind.OPEN_GENERATIVE:
                candidates.append(Candidate(log_likelihood=float(scores[j]), **common))
                continue
            delta = 0.1 * rng.standard_normal()
            common.update(
                start_logit=float(scores[j] * 0.5 + delta),
                end_logit=float(scores[j] * 0.5 - delta),
            )
            if task is TaskKind.OPEN_EXTRACTIVE:
                span_latent = SPAN_LATENT_MIX * latent + GOLD_SIGNAL * gold_dir * (
                    1.0 if is_gold else 0.0
                )
                span_emb = (
                    spec.embedding_informativeness * (rotation @ span_latent)
                    + spec.noise_std * rng.standard_normal(spec.m)
                ).astype(np.float32)
                common.update(
                    passage_id=passage_ids[j],
                    passage_score=passage_scores[passage_ids[j]],
                    span_embedding=span_emb,
                )
            candidates.append(Candidate(**common))

        n_q = 4 + i % 3
        n_c = 8 + (i * 7) % 5
        question = f"what is item {i}"
        if task is TaskKind.OPEN_GENERATIVE:
            context = None
            n_rows = n_q
            context_length = 0
        else:
            context = f"item {i} concerns {gold_text} and related matters"
            n_rows = n_q + n_c
            context_length = n_c
        original = _token_matrix(
            rng, rotation, latent, n_rows, spec.embedding_informativeness, spec.noise_std
        )
        bt_q_latent = latent + BT_DRIFT * rng.standard_normal(LATENT_DIM)
        bt_c_latent = latent + BT_DRIFT * rng.standard_normal(LATENT_DIM)
        question_bt = _token_matrix(
            rng, rotation, bt_q_latent, n_rows, spec.embedding_informativeness, spec.noise_std
        )
        context_bt = _token_matrix(
            rng, rotation, bt_c_latent, n_rows, spec.embedding_informativeness, spec.noise_std
        )
        cls_vec = _token_matrix(
            rng, rotation, latent, 1, spec.embedding_informativeness, spec.noise_std
        )[0]

        probs = np.exp(scores - scores.max())
        probs /= probs.sum()
        top5 = np.zeros(5)
        srt = np.sort(probs)[::-1][:5]
        top5[: srt.shape[0]] = srt
        jitter = 0.03 * rng.random(5)
        drop_mean = np.sort(np.clip(top5 + jitter, 0.0, 1.0))[::-1]
        drop_var = np.sort(0.02 * rng.random(5))[::-1]
        aux = AuxSignals(
            top5_softmax=tuple(float(v) for v in top5),
            dropout_mean_top5=tuple(float(v) for v in drop_mean),
            dropout_var_top5=tuple(float(v) for v in drop_var),
            context_length=context_length,
            prediction_length=len(candidates[0].text.split()),
        )

        record = ExampleRecord(
            id=f"synth-{spec.seed}-{i:06d}",
            task_kind=task,
            question=question,
            context=context,
            gold_answers=(gold_text,),
            candidates=tuple(candidates),
            embeddings=EmbeddingBundle(
                original=Embedding(kind="tokens", values=original),
                question_bt=Embedding(kind="tokens", values=question_bt),
                context_bt=Embedding(kind="tokens", values=context_bt),
                cls=cls_vec,
                hidden_dim=spec.m,
            ),
            aux=aux,
        )
        validate_record(record)
        records.append(record)
    return records
