"""Base QA models for extraction.

Toy identifiers build small randomly initialized networks from configs only,
so extraction runs hermetically: "toy-span" is a transformer encoder with
start/end span heads, "toy-t5" a tiny seq2seq built from a T5 config. Any
other identifier is treated as a transformers checkpoint and loaded through
AutoModel (requires the weights to be available locally or downloadable).

All models expose final-layer hidden states; span scores are the sum of the
start and end logits, generative scores the total log-likelihood of the
generated answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import AdapterError
from .vocab import CLS, EOS, PAD, SEP, Vocab


@dataclass
class SpanBatchOutput:
    hidden: torch.Tensor  # (batch, seq, m)
    start_logits: torch.Tensor  # (batch, seq)
    end_logits: torch.Tensor  # (batch, seq)


class ToySpanModel(nn.Module):
    """Span prediction: embeddings -> transformer encoder -> start/end heads."""

    def __init__(self, vocab_size: int, hidden_dim: int = 32, n_layers: int = 2,
                 n_heads: int = 4, dropout: float = 0.1, max_len: int = 1024,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.hidden_dim = hidden_dim
        self.token_emb = nn.Embedding(vocab_size, hidden_dim, padding_idx=PAD)
        self.pos_emb = nn.Embedding(max_len, hidden_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=hidden_dim, nhead=n_heads, dim_feedforward=2 * hidden_dim,
            dropout=dropout, batch_first=True,
        )
        # nested-tensor fast path varies with batch composition; keep the
        # plain path so hidden states are stable
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=n_layers, enable_nested_tensor=False
        )
        self.start_head = nn.Linear(hidden_dim, 1)
        self.end_head = nn.Linear(hidden_dim, 1)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> SpanBatchOutput:
        positions = torch.arange(ids.shape[1], device=ids.device).unsqueeze(0)
        x = self.token_emb(ids) + self.pos_emb(positions)
        hidden = self.encoder(x, src_key_padding_mask=pad_mask)
        start = self.start_head(hidden).squeeze(-1).masked_fill(pad_mask, -1e9)
        end = self.end_head(hidden).squeeze(-1).masked_fill(pad_mask, -1e9)
        return SpanBatchOutput(hidden=hidden, start_logits=start, end_logits=end)


def build_span_model(identifier: str, vocab: Vocab, hidden_dim: int, seed: int):
    if identifier == "toy-span":
        model = ToySpanModel(len(vocab), hidden_dim=hidden_dim, seed=seed)
        model.eval()
        return model
    raise AdapterError(
        f"unsupported span model {identifier!r}; pretrained checkpoints need their "
        "own tokenizer and are loaded via the generative path only"
    )


def build_generative_model(identifier: str, vocab: Vocab, hidden_dim: int, seed: int):
    from transformers import T5Config, T5ForConditionalGeneration

    if identifier == "toy-t5":
        torch.manual_seed(seed)
        config = T5Config(
            vocab_size=len(vocab),
            d_model=hidden_dim,
            d_ff=2 * hidden_dim,
            d_kv=max(hidden_dim // 4, 4),
            num_layers=2,
            num_heads=4,
            dropout_rate=0.1,
            decoder_start_token_id=PAD,
            pad_token_id=PAD,
            eos_token_id=EOS,
        )
        model = T5ForConditionalGeneration(config)
        model.eval()
        return model
    try:
        from transformers import AutoModelForSeq2SeqLM

        model = AutoModelForSeq2SeqLM.from_pretrained(identifier)
        model.eval()
        return model
    except Exception as exc:  # noqa: BLE001 - surface the cause verbatim
        raise AdapterError(f"cannot load model {identifier!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# encoding helpers
# ---------------------------------------------------------------------------


def encode_pair(vocab: Vocab, question: str, context: str | None,
                max_context_tokens: int) -> tuple[list[int], int, int]:
    """[CLS] question [SEP] context ids; returns (ids, ctx_start, ctx_len)."""
    q_ids = vocab.encode(question)
    ids = [CLS] + q_ids + [SEP]
    ctx_start = len(ids)
    ctx_len = 0
    if context is not None:
        c_ids = vocab.encode(context)[:max_context_tokens]
        ids = ids + c_ids
        ctx_len = len(c_ids)
    return ids, ctx_start, ctx_len


def pad_batch(sequences: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), PAD, dtype=torch.long)
    mask = torch.ones((len(sequences), width), dtype=torch.bool)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, : len(seq)] = False
    return ids, mask


def top_spans(start_logits: np.ndarray, end_logits: np.ndarray, ctx_start: int,
              ctx_len: int, top_k: int, max_span_len: int) -> list[tuple[int, int, float]]:
    """Best (start, end, score) spans within the context region.

    score = start_logit + end_logit; spans are token-index pairs relative to
    the full input sequence, end inclusive, length-capped.
    """
    if ctx_len == 0:
        return []
    s = start_logits[ctx_start : ctx_start + ctx_len]
    e = end_logits[ctx_start : ctx_start + ctx_len]
    scores = s[:, None] + e[None, :]
    ii, jj = np.meshgrid(np.arange(ctx_len), np.arange(ctx_len), indexing="ij")
    valid = (jj >= ii) & (jj < ii + max_span_len)
    flat = np.where(valid.ravel(), scores.ravel(), -np.inf)
    k = min(top_k, int(valid.sum()))
    top = np.argpartition(-flat, k - 1)[:k]
    top = top[np.argsort(-flat[top], kind="stable")]
    out = []
    for idx in top:
        i, j = divmod(int(idx), ctx_len)
        out.append((ctx_start + i, ctx_start + j, float(flat[idx])))
    return out


class TfIdfRetriever:
    """Term-overlap retriever: cosine over log-scaled term-frequency vectors."""

    def __init__(self, passages: list[str]):
        self.passages = passages
        self.vocab: dict[str, int] = {}
        rows = []
        for passage in passages:
            counts: dict[int, float] = {}
            for token in passage.lower().split():
                tid = self.vocab.setdefault(token, len(self.vocab))
                counts[tid] = counts.get(tid, 0.0) + 1.0
            rows.append(counts)
        self.rows = rows

    def score(self, query: str) -> np.ndarray:
        q_counts: dict[int, float] = {}
        for token in query.lower().split():
            tid = self.vocab.get(token)
            if tid is not None:
                q_counts[tid] = q_counts.get(tid, 0.0) + 1.0
        q_norm = math.sqrt(sum(v * v for v in q_counts.values())) or 1.0
        scores = np.zeros(len(self.rows))
        for i, row in enumerate(self.rows):
            dot = sum(v * row.get(t, 0.0) for t, v in q_counts.items())
            norm = math.sqrt(sum(v * v for v in row.values())) or 1.0
            scores[i] = dot / (q_norm * norm)
        return scores

    def top(self, query: str, k: int) -> list[tuple[int, float]]:
        scores = self.score(query)
        order = np.argsort(-scores, kind="stable")[:k]
        return [(int(i), float(scores[i])) for i in order]
