"""qa-extract: run a QA model over a dataset and emit calibqa records."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import AdapterConfig, AdapterError
from .extract import extract

MAX_SKIP_FRACTION = 0.01


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qa-extract", description=__doc__)
    p.add_argument("--model", required=True, help="toy-span, toy-t5, or a checkpoint id")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-kind", default="rc_json",
                   choices=["rc_json", "squad_json", "open_json"])
    p.add_argument("--task", default="reading_comprehension",
                   choices=["reading_comprehension", "open_extractive", "open_generative"])
    p.add_argument("--out", required=True)
    p.add_argument("--k-dropout", type=int, default=10)
    p.add_argument("--pivot", default="fr", choices=["fr", "de"])
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--max-context-tokens", type=int, default=512)
    p.add_argument("--top-passages", type=int, default=100)
    p.add_argument("--top-spans", type=int, default=10)
    p.add_argument("--top-candidates", type=int, default=5)
    p.add_argument("--max-span-len", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backtranslate", action="store_true")
    p.add_argument("--pooled", action="store_true",
                   help="store mean-pooled vectors instead of token matrices")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = AdapterConfig(
            model=args.model,
            dataset=args.dataset,
            dataset_kind=args.dataset_kind,
            output=args.out,
            task=args.task,
            k_dropout=args.k_dropout,
            pivot=args.pivot,
            beam_size=args.beam_size,
            max_context_tokens=args.max_context_tokens,
            top_passages=args.top_passages,
            top_spans=args.top_spans,
            top_candidates=args.top_candidates,
            max_span_len=args.max_span_len,
            hidden_dim=args.hidden_dim,
            seed=args.seed,
            backtranslate=args.backtranslate,
            emit_pooled=args.pooled,
        )
        result = extract(config)
    except (AdapterError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.n_written} records to {args.out}")
    if result.skipped_ids:
        print(f"skipped {len(result.skipped_ids)} examples", file=sys.stderr)
    if result.skip_fraction > MAX_SKIP_FRACTION:
        print(
            f"error: skip fraction {result.skip_fraction:.1%} exceeds "
            f"{MAX_SKIP_FRACTION:.0%}",
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
