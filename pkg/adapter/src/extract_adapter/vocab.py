"""Whitespace tokenizer over a dataset-derived vocabulary.

Toy models need invertible ids (generative decoding reconstructs answer text),
so the vocabulary is built from the dataset corpus instead of shipping a
pretrained tokenizer. Ids 0..3 are reserved specials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAD, EOS, CLS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "</s>", "<cls>", "<sep>")


@dataclass
class Vocab:
    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, texts) -> "Vocab":
        vocab = cls()
        for special in SPECIALS:
            vocab._add(special)
        for text in texts:
            for token in text.split():
                vocab._add(token)
        return vocab

    def _add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        # out-of-vocabulary tokens map to SEP-adjacent unknown? build() covers
        # the dataset, so unknowns only appear for backtranslated text; fold
        # them to EOS to keep ids in range
        return [self.token_to_id.get(tok, EOS) for tok in text.split()]

    def decode(self, ids) -> str:
        tokens = [
            self.id_to_token[i]
            for i in ids
            if 0 <= i < len(self.id_to_token) and i > SEP
        ]
        return " ".join(tokens)
