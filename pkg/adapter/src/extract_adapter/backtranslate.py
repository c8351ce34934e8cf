"""Round-trip translation through a pivot language.

Uses MarianMT checkpoints (en->pivot, pivot->en) with beam search when the
models can be loaded. Any failure, at load time or per text, falls back to
returning the text unchanged with a flag, so extraction always completes.
"""

from __future__ import annotations

import logging

logger = logging.getLogger(__name__)

_MARIAN_NAMES = {
    "fr": ("Helsinki-NLP/opus-mt-en-fr", "Helsinki-NLP/opus-mt-fr-en"),
    "de": ("Helsinki-NLP/opus-mt-en-de", "Helsinki-NLP/opus-mt-de-en"),
}


class Backtranslator:
    def __init__(self, pivot: str = "fr", beam_size: int = 4):
        self.pivot = pivot
        self.beam_size = beam_size
        self.forward = None
        self.backward = None
        self.identity_mode = False
        try:
            from transformers import MarianMTModel, MarianTokenizer

            fwd_name, bwd_name = _MARIAN_NAMES[pivot]
            self.forward = (
                MarianTokenizer.from_pretrained(fwd_name),
                MarianMTModel.from_pretrained(fwd_name),
            )
            self.backward = (
                MarianTokenizer.from_pretrained(bwd_name),
                MarianMTModel.from_pretrained(bwd_name),
            )
        except Exception as exc:  # noqa: BLE001 - any load failure means fallback
            logger.warning(
                "MT models for pivot %s unavailable (%s); using identity fallback",
                pivot,
                exc,
            )
            self.identity_mode = True

    def _translate(self, pair, text: str) -> str:
        tokenizer, model = pair
        batch = tokenizer([text], return_tensors="pt", truncation=True)
        generated = model.generate(**batch, num_beams=self.beam_size, max_new_tokens=512)
        return tokenizer.decode(generated[0], skip_special_tokens=True)

    def backtranslate(self, texts) -> tuple[list[str], list[bool]]:
        """Round-trip each text; returns (paraphrases, identity_flags)."""
        out: list[str] = []
        flags: list[bool] = []
        for text in texts:
            if text == "":
                out.append("")
                flags.append(True)
                continue
            if self.identity_mode:
                out.append(text)
                flags.append(True)
                continue
            try:
                pivoted = self._translate(self.forward, text)
                back = self._translate(self.backward, pivoted)
                out.append(back)
                flags.append(False)
            except Exception as exc:  # noqa: BLE001 - per-text fallback
                logger.warning("backtranslation failed (%s); keeping original", exc)
                out.append(text)
                flags.append(True)
        return out, flags
