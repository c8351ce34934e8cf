import json
import os

import numpy as np
import pytest

# fail fast instead of retrying hub downloads when MT models are requested
os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")


@pytest.fixture
def rc_dataset(tmp_path):
    data = {
        "examples": [
            {
                "id": "q1",
                "question": "what color is the sky",
                "context": "the sky is blue most days and gray on others",
                "answers": ["blue"],
            },
            {
                "id": "q2",
                "question": "who wrote the book",
                "context": "the book was written by ada about engines",
                "answers": ["ada"],
            },
            {
                "id": "q3",
                "question": "when did it happen",
                "context": "it happened in spring after the long thaw",
                "answers": ["in spring"],
            },
        ]
    }
    path = tmp_path / "rc.json"
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def open_dataset(tmp_path):
    rng = np.random.default_rng(0)
    words = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
        "iota", "kappa", "river", "mountain", "city", "music", "engine",
        "garden", "stone", "cloud", "valley", "harbor",
    ]
    corpus = []
    for i in range(104):
        n = int(rng.integers(8, 16))
        tokens = [words[int(rng.integers(len(words)))] for _ in range(n)]
        tokens.insert(int(rng.integers(n)), f"fact{i}")
        corpus.append(" ".join(tokens))
    data = {
        "corpus": corpus,
        "examples": [
            {"id": "oq1", "question": "where is fact7 located", "answers": ["fact7"]},
            {"id": "oq2", "question": "tell me about fact33 and the river", "answers": ["fact33"]},
        ],
    }
    path = tmp_path / "open.json"
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def squad_dataset(tmp_path):
    data = {
        "data": [
            {
                "title": "toy",
                "paragraphs": [
                    {
                        "context": "the sky is blue most days and gray on others",
                        "qas": [
                            {
                                "id": "sq1",
                                "question": "what color is the sky",
                                "answers": [{"text": "blue", "answer_start": 11}],
                            }
                        ],
                    }
                ],
            }
        ]
    }
    path = tmp_path / "squad.json"
    path.write_text(json.dumps(data))
    return path
