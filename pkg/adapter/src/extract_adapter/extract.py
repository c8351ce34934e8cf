"""Dataset -> interchange records.

Runs the base QA model over every example, enumerates answer candidates with
their scores and span embeddings, collects final-layer hidden states for the
original (and optionally backtranslated) inputs, estimates dropout mean and
variance over K stochastic forward passes, and writes validated cqa-v1 lines.

Failures are per-example: the id is logged and skipped; callers treat more
than 1% skips as a failed run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .backtranslate import Backtranslator
from .config import AdapterConfig, AdapterError
from .datasets import QaExample, load_dataset
from .interchange import aux_obj, candidate_obj, encode_array, exact_match, record_line
from .models import (
    TfIdfRetriever,
    build_generative_model,
    build_span_model,
    encode_pair,
    pad_batch,
    top_spans,
)
from .vocab import EOS, Vocab

logger = logging.getLogger(__name__)


@dataclass
class ExtractResult:
    n_written: int
    skipped_ids: list[str] = field(default_factory=list)

    @property
    def skip_fraction(self) -> float:
        total = self.n_written + len(self.skipped_ids)
        return len(self.skipped_ids) / total if total else 0.0


@dataclass
class _CandidateDraft:
    text: str
    model_score: float
    start_logit: float | None = None
    end_logit: float | None = None
    passage_id: int | None = None
    passage_score: float | None = None
    log_likelihood: float | None = None
    span_embedding: np.ndarray | None = None
    # positions needed for dropout re-scoring
    batch_row: int = 0
    start_pos: int = -1
    end_pos: int = -1
    token_ids: list[int] | None = None


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _top5(values: np.ndarray) -> np.ndarray:
    out = np.zeros(5)
    srt = np.sort(values)[::-1][:5]
    out[: srt.shape[0]] = srt
    return out


def _dropout_stats(score_passes: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Top-5 mean probabilities across dropout passes plus their variances."""
    dists = np.stack([_softmax(s) for s in score_passes])
    mean = dists.mean(axis=0)
    var = dists.var(axis=0)
    order = np.argsort(-mean, kind="stable")[:5]
    mean_top = np.zeros(5)
    var_top = np.zeros(5)
    mean_top[: order.shape[0]] = mean[order]
    var_top[: order.shape[0]] = var[order]
    return mean_top, var_top


def _matrix(hidden: np.ndarray, pooled: bool) -> dict:
    if pooled:
        return encode_array(hidden.mean(axis=0), "pooled")
    return encode_array(hidden, "tokens")


class Extractor:
    def __init__(self, config: AdapterConfig):
        self.config = config
        self.dataset = load_dataset(config.dataset, config.dataset_kind)
        texts = [e.question for e in self.dataset.examples]
        texts += [e.context for e in self.dataset.examples if e.context]
        texts += self.dataset.corpus
        self.vocab = Vocab.build(texts)
        if config.task == "open_generative":
            self.model = build_generative_model(
                config.model, self.vocab, config.hidden_dim, config.seed
            )
        else:
            self.model = build_span_model(
                config.model, self.vocab, config.hidden_dim, config.seed
            )
        self.retriever = (
            TfIdfRetriever(self.dataset.corpus) if config.task == "open_extractive" else None
        )
        self.backtranslator = (
            Backtranslator(config.pivot, config.beam_size) if config.backtranslate else None
        )

    # -- span-model forward passes -------------------------------------------

    def _span_forward(self, sequences: list[list[int]], train_mode: bool, seed: int):
        ids, mask = pad_batch(sequences)
        if train_mode:
            torch.manual_seed(seed)
            self.model.train()
        else:
            self.model.eval()
        with torch.no_grad():
            out = self.model(ids, mask)
        self.model.eval()
        return out

    def _bt_hidden(self, question: str, context: str | None):
        """Hidden matrices for (q', c) and (q, c'), when backtranslation is on."""
        if self.backtranslator is None:
            return None, None
        q_bt, _ = self.backtranslator.backtranslate([question])
        seqs = [
            encode_pair(self.vocab, q_bt[0], context, self.config.max_context_tokens)[0]
        ]
        c_bt_seq = None
        if context is not None:
            c_bt, _ = self.backtranslator.backtranslate([context])
            c_bt_seq = encode_pair(
                self.vocab, question, c_bt[0], self.config.max_context_tokens
            )[0]
            seqs.append(c_bt_seq)
        out = self._span_forward(seqs, train_mode=False, seed=0)
        hidden = out.hidden.numpy()
        q_mat = hidden[0, : len(seqs[0])]
        c_mat = hidden[1, : len(c_bt_seq)] if c_bt_seq is not None else None
        return q_mat, c_mat

    # -- reading comprehension -----------------------------------------------

    def _extract_rc(self, example: QaExample) -> str:
        cfg = self.config
        seq, ctx_start, ctx_len = encode_pair(
            self.vocab, example.question, example.context, cfg.max_context_tokens
        )
        if ctx_len == 0:
            raise AdapterError("empty context after tokenization")
        out = self._span_forward([seq], train_mode=False, seed=0)
        hidden = out.hidden[0, : len(seq)].numpy()
        start = out.start_logits[0, : len(seq)].numpy()
        end = out.end_logits[0, : len(seq)].numpy()
        spans = top_spans(start, end, ctx_start, ctx_len, cfg.top_candidates, cfg.max_span_len)
        if not spans:
            raise AdapterError("no candidate spans")
        tokens = example.context.split()[: cfg.max_context_tokens]
        drafts = []
        for i, j, score in spans:
            text = " ".join(tokens[i - ctx_start : j - ctx_start + 1])
            drafts.append(
                _CandidateDraft(
                    text=text,
                    model_score=score,
                    start_logit=float(start[i]),
                    end_logit=float(end[j]),
                    span_embedding=(hidden[i] + hidden[j]) / 2.0,
                    start_pos=i,
                    end_pos=j,
                )
            )
        drafts.sort(key=lambda d: -d.model_score)

        passes = []
        for k in range(cfg.k_dropout):
            out_k = self._span_forward([seq], train_mode=True, seed=cfg.seed * 1000 + k + 1)
            s_k = out_k.start_logits[0].numpy()
            e_k = out_k.end_logits[0].numpy()
            passes.append(
                np.array([s_k[d.start_pos] + e_k[d.end_pos] for d in drafts])
            )
        return self._emit(
            example,
            task="reading_comprehension",
            context=example.context,
            drafts=drafts,
            original=hidden,
            cls_vec=hidden[0],
            score_passes=passes,
            context_length=ctx_len,
        )

    # -- open-retrieval extractive --------------------------------------------

    def _extract_open_extractive(self, example: QaExample) -> str:
        cfg = self.config
        ranked = self.retriever.top(example.question, cfg.top_passages)
        if not ranked:
            raise AdapterError("retriever returned no passages")
        seqs = []
        metas = []
        for passage_idx, passage_score in ranked:
            seq, ctx_start, ctx_len = encode_pair(
                self.vocab,
                example.question,
                self.dataset.corpus[passage_idx],
                cfg.max_context_tokens,
            )
            seqs.append(seq)
            metas.append((passage_idx, passage_score, ctx_start, ctx_len, len(seq)))
        out = self._span_forward(seqs, train_mode=False, seed=0)
        drafts: list[_CandidateDraft] = []
        for row, (passage_idx, passage_score, ctx_start, ctx_len, seq_len) in enumerate(metas):
            start = out.start_logits[row, :seq_len].numpy()
            end = out.end_logits[row, :seq_len].numpy()
            hidden = out.hidden[row, :seq_len].numpy()
            tokens = self.dataset.corpus[passage_idx].split()[: cfg.max_context_tokens]
            for i, j, score in top_spans(
                start, end, ctx_start, ctx_len, cfg.top_spans, cfg.max_span_len
            ):
                drafts.append(
                    _CandidateDraft(
                        text=" ".join(tokens[i - ctx_start : j - ctx_start + 1]),
                        model_score=score,
                        start_logit=float(start[i]),
                        end_logit=float(end[j]),
                        passage_id=passage_idx,
                        passage_score=passage_score,
                        span_embedding=(hidden[i] + hidden[j]) / 2.0,
                        batch_row=row,
                        start_pos=i,
                        end_pos=j,
                    )
                )
        if not drafts:
            raise AdapterError("no candidate spans")
        drafts.sort(key=lambda d: -d.model_score)

        best_row = max(range(len(metas)), key=lambda r: metas[r][1])
        best_passage = self.dataset.corpus[metas[best_row][0]]
        hidden_best = out.hidden[best_row, : metas[best_row][4]].numpy()

        passes = []
        for k in range(cfg.k_dropout):
            out_k = self._span_forward(seqs, train_mode=True, seed=cfg.seed * 1000 + k + 1)
            s_k = out_k.start_logits.numpy()
            e_k = out_k.end_logits.numpy()
            passes.append(
                np.array(
                    [s_k[d.batch_row, d.start_pos] + e_k[d.batch_row, d.end_pos] for d in drafts]
                )
            )
        return self._emit(
            example,
            task="open_extractive",
            context=best_passage,
            drafts=drafts,
            original=hidden_best,
            cls_vec=hidden_best[0],
            score_passes=passes,
            context_length=metas[best_row][3],
            bt_context=best_passage,
        )

    # -- open-retrieval generative --------------------------------------------

    def _gen_scores(self, input_ids: torch.Tensor, sequences: torch.Tensor,
                    train_mode: bool, seed: int) -> np.ndarray:
        """Total log-likelihood of each generated sequence (teacher forcing)."""
        sequences = sequences.contiguous()
        if train_mode:
            torch.manual_seed(seed)
            self.model.train()
        else:
            self.model.eval()
        with torch.no_grad():
            batch_in = input_ids.expand(sequences.shape[0], -1).contiguous()
            logits = self.model(input_ids=batch_in, labels=sequences).logits
        self.model.eval()
        logprobs = torch.log_softmax(logits, dim=-1)
        gathered = logprobs.gather(-1, sequences.unsqueeze(-1)).squeeze(-1)
        mask = sequences != 0  # pad id
        return (gathered * mask).sum(dim=1).numpy()

    def _extract_generative(self, example: QaExample) -> str:
        cfg = self.config
        ids = torch.tensor([self.vocab.encode(example.question) + [EOS]], dtype=torch.long)
        torch.manual_seed(cfg.seed)
        self.model.eval()
        with torch.no_grad():
            generated = self.model.generate(
                ids,
                num_beams=max(cfg.beam_size, cfg.top_candidates),
                num_return_sequences=cfg.top_candidates,
                max_new_tokens=cfg.max_span_len,
                early_stopping=True,
            )
            encoder_out = self.model.get_encoder()(input_ids=ids)
        hidden = encoder_out.last_hidden_state[0].numpy()
        sequences = generated[:, 1:]  # drop the decoder start token
        scores = self._gen_scores(ids, sequences, train_mode=False, seed=0)
        by_text: dict[str, tuple[float, int]] = {}
        for row in range(sequences.shape[0]):
            text = self.vocab.decode(sequences[row].tolist())
            score = float(scores[row])
            if text not in by_text or score > by_text[text][0]:
                by_text[text] = (score, row)
        drafts = [
            _CandidateDraft(text=text, model_score=score, log_likelihood=score, batch_row=row)
            for text, (score, row) in by_text.items()
        ]
        drafts.sort(key=lambda d: -d.model_score)
        kept_rows = torch.tensor([d.batch_row for d in drafts], dtype=torch.long)
        kept_sequences = sequences[kept_rows]

        passes = []
        for k in range(cfg.k_dropout):
            passes.append(
                self._gen_scores(
                    ids, kept_sequences, train_mode=True, seed=cfg.seed * 1000 + k + 1
                )
            )
        return self._emit(
            example,
            task="open_generative",
            context=None,
            drafts=drafts,
            original=hidden,
            cls_vec=None,
            score_passes=passes,
            context_length=0,
        )

    # -- record assembly -------------------------------------------------------

    def _emit(
        self,
        example: QaExample,
        task: str,
        context: str | None,
        drafts: list[_CandidateDraft],
        original: np.ndarray,
        cls_vec: np.ndarray | None,
        score_passes: list[np.ndarray],
        context_length: int,
        bt_context: str | None = None,
    ) -> str:
        cfg = self.config
        eval_scores = np.array([d.model_score for d in drafts])
        mean_top, var_top = _dropout_stats(score_passes)
        aux = aux_obj(
            top5_softmax=_top5(_softmax(eval_scores)),
            dropout_mean_top5=mean_top,
            dropout_var_top5=var_top,
            context_length=context_length,
            prediction_length=len(drafts[0].text.split()),
        )
        candidates = [
            candidate_obj(
                text=d.text,
                model_score=d.model_score,
                start_logit=d.start_logit,
                end_logit=d.end_logit,
                passage_id=d.passage_id,
                passage_score=d.passage_score,
                log_likelihood=d.log_likelihood,
                span_embedding=d.span_embedding,
                is_correct=exact_match(d.text, example.answers),
            )
            for d in drafts
        ]
        q_mat = c_mat = None
        if self.backtranslator is not None and task != "open_generative":
            q_mat, c_mat = self._bt_hidden(example.question, bt_context or context)
        elif self.backtranslator is not None:
            q_bt, _ = self.backtranslator.backtranslate([example.question])
            ids = torch.tensor([self.vocab.encode(q_bt[0]) + [EOS]], dtype=torch.long)
            self.model.eval()
            with torch.no_grad():
                q_mat = self.model.get_encoder()(input_ids=ids).last_hidden_state[0].numpy()
        return record_line(
            rid=example.id,
            task_kind=task,
            question=example.question,
            context=context,
            gold_answers=list(example.answers),
            candidates=candidates,
            original=_matrix(original, cfg.emit_pooled),
            hidden_dim=original.shape[1],
            question_bt=_matrix(q_mat, cfg.emit_pooled) if q_mat is not None else None,
            context_bt=_matrix(c_mat, cfg.emit_pooled) if c_mat is not None else None,
            cls_vec=encode_array(cls_vec, "pooled") if cls_vec is not None else None,
            aux=aux,
        )

    # -- driver -----------------------------------------------------------------

    def run(self) -> ExtractResult:
        cfg = self.config
        handlers = {
            "reading_comprehension": self._extract_rc,
            "open_extractive": self._extract_open_extractive,
            "open_generative": self._extract_generative,
        }
        handler = handlers[cfg.task]
        written = 0
        skipped: list[str] = []
        with open(cfg.output, "w", encoding="utf-8", newline="\n") as fh:
            for example in self.dataset.examples:
                try:
                    line = handler(example)
                except Exception as exc:  # noqa: BLE001 - per-example skip
                    logger.warning("skipping example %s: %s", example.id, exc)
                    skipped.append(example.id)
                    continue
                fh.write(line)
                fh.write("\n")
                written += 1
        meta = {
            "model": cfg.model,
            "task": cfg.task,
            "k_dropout": cfg.k_dropout,
            "pivot": cfg.pivot,
            "beam_size": cfg.beam_size,
            "max_context_tokens": cfg.max_context_tokens,
            "top_passages": cfg.top_passages,
            "top_spans": cfg.top_spans,
            "seed": cfg.seed,
            "backtranslate": cfg.backtranslate,
            "n_written": written,
            "skipped_ids": skipped,
        }
        with open(cfg.output + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")
        return ExtractResult(n_written=written, skipped_ids=skipped)


def extract(config: AdapterConfig) -> ExtractResult:
    return Extractor(config).run()
