"""Adapter conformance: emitted files satisfy the toolkit's record contract."""

import json
import subprocess
import sys

import numpy as np
import pytest

from extract_adapter.backtranslate import Backtranslator
from extract_adapter.cli import main
from extract_adapter.config import AdapterConfig, AdapterError
from extract_adapter.vocab import Vocab


def run_cli(*argv):
    return main([str(a) for a in argv])


def validate_with_toolkit(path, strict=True):
    cmd = [sys.executable, "-m", "calibqa.cli", "validate", str(path)]
    if strict:
        cmd.append("--strict")
    return subprocess.run(cmd, capture_output=True, text=True)


def read_lines(path):
    return [json.loads(line) for line in open(path, encoding="utf-8")]


class TestRcExtraction:
    def test_three_examples_three_validated_records(self, rc_dataset, tmp_path):
        out = tmp_path / "rc.jsonl"
        code = run_cli(
            "--model", "toy-span", "--dataset", rc_dataset, "--dataset-kind", "rc_json",
            "--task", "reading_comprehension", "--out", out,
            "--k-dropout", 3, "--hidden-dim", 16, "--seed", 3,
        )
        assert code == 0
        result = validate_with_toolkit(out)
        assert result.returncode == 0, result.stdout + result.stderr
        assert "OK (3 records)" in result.stdout

    def test_candidates_descend_and_carry_span_fields(self, rc_dataset, tmp_path):
        out = tmp_path / "rc.jsonl"
        run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                "--k-dropout", 2, "--hidden-dim", 16, "--seed", 3)
        for obj in read_lines(out):
            scores = [c["model_score"] for c in obj["candidates"]]
            assert scores == sorted(scores, reverse=True)
            for cand in obj["candidates"]:
                assert cand["model_score"] == pytest.approx(
                    cand["start_logit"] + cand["end_logit"], abs=1e-5
                )
                assert "span_embedding" in cand

    def test_hidden_dim_constant_per_file(self, rc_dataset, tmp_path):
        out = tmp_path / "rc.jsonl"
        run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                "--k-dropout", 2, "--hidden-dim", 24, "--seed", 1)
        dims = {obj["embeddings"]["hidden_dim"] for obj in read_lines(out)}
        assert dims == {24}

    def test_squad_format_loads(self, squad_dataset, tmp_path):
        out = tmp_path / "sq.jsonl"
        code = run_cli("--model", "toy-span", "--dataset", squad_dataset,
                       "--dataset-kind", "squad_json", "--out", out,
                       "--k-dropout", 2, "--hidden-dim", 16, "--seed", 1)
        assert code == 0
        assert validate_with_toolkit(out).returncode == 0

    def test_aux_block_shape(self, rc_dataset, tmp_path):
        out = tmp_path / "rc.jsonl"
        run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                "--k-dropout", 4, "--hidden-dim", 16, "--seed", 3)
        for obj in read_lines(out):
            aux = obj["aux"]
            assert len(aux["top5_softmax"]) == 5
            assert len(aux["dropout_mean_top5"]) == 5
            assert len(aux["dropout_var_top5"]) == 5
            top5 = aux["top5_softmax"]
            assert all(a >= b for a, b in zip(top5, top5[1:]))
            assert aux["context_length"] > 0
            assert aux["prediction_length"] >= 1

    def test_metadata_sidecar_records_k(self, rc_dataset, tmp_path):
        out = tmp_path / "rc.jsonl"
        run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                "--k-dropout", 7, "--hidden-dim", 16, "--seed", 3)
        meta = json.loads((tmp_path / "rc.jsonl.meta.json").read_text())
        assert meta["k_dropout"] == 7
        assert meta["n_written"] == 3


class TestPooledConformance:
    def test_pooled_matches_toolkit_pool_mean(self, rc_dataset, tmp_path):
        from calibqa.features import pool_mean
        from calibqa.records import read_records

        tokens_out = tmp_path / "tokens.jsonl"
        pooled_out = tmp_path / "pooled.jsonl"
        common = ["--model", "toy-span", "--dataset", str(rc_dataset),
                  "--k-dropout", "2", "--hidden-dim", "16", "--seed", "3"]
        assert run_cli(*common, "--out", tokens_out) == 0
        assert run_cli(*common, "--out", pooled_out, "--pooled") == 0
        token_records = list(read_records(tokens_out))
        pooled_records = list(read_records(pooled_out))
        for tr, pr in zip(token_records, pooled_records):
            for name in ("original", "question_bt", "context_bt"):
                t_emb = getattr(tr.embeddings, name)
                p_emb = getattr(pr.embeddings, name)
                if t_emb is None:
                    assert p_emb is None
                    continue
                assert t_emb.kind == "tokens"
                assert p_emb.kind == "pooled"
                np.testing.assert_allclose(
                    p_emb.values, pool_mean(t_emb.values), atol=1e-5
                )


class TestOpenExtractive:
    def test_hundred_passages_ten_spans_each(self, open_dataset, tmp_path):
        out = tmp_path / "open.jsonl"
        code = run_cli(
            "--model", "toy-span", "--dataset", open_dataset, "--dataset-kind",
            "open_json", "--task", "open_extractive", "--out", out,
            "--k-dropout", 2, "--hidden-dim", 16, "--seed", 3,
            "--top-passages", 100, "--top-spans", 10,
        )
        assert code == 0
        result = validate_with_toolkit(out)
        assert result.returncode == 0, result.stdout + result.stderr
        for obj in read_lines(out):
            assert len(obj["candidates"]) == 1000
            by_passage = {}
            for cand in obj["candidates"]:
                assert "passage_id" in cand and "passage_score" in cand
                by_passage.setdefault(cand["passage_id"], 0)
                by_passage[cand["passage_id"]] += 1
            assert len(by_passage) == 100
            assert set(by_passage.values()) == {10}
            assert "context" in obj  # top retrieved passage


class TestGenerative:
    def test_generative_records_validate(self, open_dataset, tmp_path):
        out = tmp_path / "gen.jsonl"
        code = run_cli(
            "--model", "toy-t5", "--dataset", open_dataset, "--dataset-kind",
            "open_json", "--task", "open_generative", "--out", out,
            "--k-dropout", 2, "--hidden-dim", 16, "--seed", 3,
            "--top-candidates", 4, "--beam-size", 4,
        )
        assert code == 0
        result = validate_with_toolkit(out)
        assert result.returncode == 0, result.stdout + result.stderr
        for obj in read_lines(out):
            assert "context" not in obj
            for cand in obj["candidates"]:
                assert "log_likelihood" in cand
                assert cand["log_likelihood"] <= 0.0
                assert cand["model_score"] == cand["log_likelihood"]


class TestBacktranslation:
    def test_empty_string_flagged_identity(self):
        bt = Backtranslator(pivot="fr")
        texts, flags = bt.backtranslate([""])
        assert texts == [""]
        assert flags == [True]

    def test_identity_fallback_scores_bleu_one(self):
        from calibqa.metrics import sentence_bleu

        bt = Backtranslator(pivot="de")
        originals = [
            "the sky is blue most days and gray on others",
            "the book was written by ada about engines",
        ]
        outputs, flags = bt.backtranslate(originals)
        if not bt.identity_mode:
            pytest.skip("real MT models available; identity path not exercised")
        assert all(flags)
        scores = [sentence_bleu(a, b) for a, b in zip(originals, outputs)]
        assert all(s == pytest.approx(1.0) for s in scores)
        # the paper-level expectation (average > 0.55) holds trivially here;
        # with real MT models it must be rechecked on natural corpora
        assert float(np.mean(scores)) > 0.55

    def test_backtranslated_embeddings_present(self, rc_dataset, tmp_path):
        out = tmp_path / "bt.jsonl"
        code = run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                       "--k-dropout", 2, "--hidden-dim", 16, "--seed", 3,
                       "--backtranslate", "--pivot", "fr")
        assert code == 0
        assert validate_with_toolkit(out).returncode == 0
        for obj in read_lines(out):
            assert "question_bt" in obj["embeddings"]
            assert "context_bt" in obj["embeddings"]


class TestFailureHandling:
    def test_bad_examples_skipped_and_skip_budget_enforced(self, tmp_path):
        data = {
            "examples": [
                {"id": "ok", "question": "what is it", "context": "it is a stone", "answers": []},
                {"id": "broken", "question": "what is it", "context": "", "answers": []},
            ]
        }
        path = tmp_path / "d.json"
        path.write_text(json.dumps(data))
        out = tmp_path / "out.jsonl"
        code = run_cli("--model", "toy-span", "--dataset", path, "--out", out,
                       "--k-dropout", 2, "--hidden-dim", 16, "--seed", 1)
        # 1 of 2 skipped -> 50% > 1% budget
        assert code == 1
        meta = json.loads((tmp_path / "out.jsonl.meta.json").read_text())
        assert meta["skipped_ids"] == ["broken"]
        assert validate_with_toolkit(out).returncode == 0

    def test_unknown_model_rejected(self, rc_dataset, tmp_path):
        code = run_cli("--model", "no-such-model", "--dataset", rc_dataset,
                       "--out", tmp_path / "x.jsonl", "--hidden-dim", 16)
        assert code == 1

    def test_config_validation(self):
        with pytest.raises(AdapterError):
            AdapterConfig(model="toy-span", dataset="x", dataset_kind="rc_json",
                          output="y", k_dropout=0)
        with pytest.raises(AdapterError):
            AdapterConfig(model="toy-span", dataset="x", dataset_kind="rc_json",
                          output="y", pivot="es")


class TestVocab:
    def test_round_trip_tokens(self):
        vocab = Vocab.build(["alpha beta gamma", "delta alpha"])
        ids = vocab.encode("alpha gamma delta")
        assert vocab.decode(ids) == "alpha gamma delta"

    def test_specials_not_decoded(self):
        vocab = Vocab.build(["alpha"])
        assert vocab.decode([0, 1, 2, 3, vocab.token_to_id["alpha"]]) == "alpha"

    def test_determinism(self, rc_dataset, tmp_path):
        out1 = tmp_path / "a.jsonl"
        out2 = tmp_path / "b.jsonl"
        for out in (out1, out2):
            run_cli("--model", "toy-span", "--dataset", rc_dataset, "--out", out,
                    "--k-dropout", 2, "--hidden-dim", 16, "--seed", 5)
        assert out1.read_bytes() == out2.read_bytes()
