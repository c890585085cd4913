import hashlib
import json
import os

import pytest

from conftest import FIXTURES, fixture_path
from deskbert.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, OUTPUT_ENV, run


def digest_tree(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            h.update(name.encode() + fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert run(["pretrain", "--steps", "8", "--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


def test_pretrain_is_reproducible(tmp_path, pretrained):
    assert run(["pretrain", "--steps", "8", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_bytes() == (pretrained / "metrics.csv").read_bytes()
    cfg = json.loads((tmp_path / "run_config.json").read_text())
    assert cfg["seed"] == 7 and cfg["pretrain_config"]["total_steps"] == 8


def test_resume_matches_uninterrupted_log(tmp_path, pretrained):
    assert run(["pretrain", "--steps", "8", "--stop-after", "5", "--seed", "7", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert len((tmp_path / "a" / "metrics.csv").read_text().splitlines()) == 6
    assert run(["pretrain", "--steps", "8", "--seed", "7", "--out", str(tmp_path / "a"),
                "--resume", str(tmp_path / "a" / "checkpoint")]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (pretrained / "metrics.csv").read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "steps": 4, "overrides": {"batch_size": 8}}))
    assert run(["pretrain", "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "o")]) == EXIT_OK
    rc = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert rc["seed"] == 3 and rc["pretrain_config"]["total_steps"] == 2 and rc["pretrain_config"]["batch_size"] == 8


def test_unknown_config_keys_are_usage_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sede": 3}))
    assert run(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    cfg.write_text(json.dumps({"overrides": {"learning_rate": 1.0}}))
    assert run(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_flag_prints_usage(capsys):
    assert run(["pretrain", "--bogus"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert run([]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"overrides": {"peak_lr": 1e30, "clip_norm": None}}))
    assert run(["pretrain", "--config", str(cfg), "--steps", "30", "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    corpus = tmp_path / "c.txt"
    corpus.write_text("Lan đọc sách .\nMinh ăn phở .\n", encoding="utf-8")
    assert run(["train-tokenizer", "--corpus", str(corpus), "--vocab-size", "60"]) == EXIT_OK
    assert (tmp_path / "env" / "vocab.txt").exists() and (tmp_path / "env" / "run_config.json").exists()


def test_corpus_stats_on_fixture(capsys):
    before = digest_tree(FIXTURES)
    assert run(["corpus-stats", "--data", fixture_path("toy_viquad.jsonl")]) == EXIT_OK
    assert "articles 2  passages 4  questions 6" in capsys.readouterr().out
    assert run(["corpus-stats", "--data", fixture_path("toy_viquad.jsonl"), "--split", "train"]) == EXIT_DATA
    assert digest_tree(FIXTURES) == before


def test_corpus_stats_on_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert run(["corpus-stats", "--data", str(tmp_path / "e.jsonl")]) == EXIT_DATA


def test_index_and_oracle_evaluation(tmp_path, capsys):
    idx = tmp_path / "i.bin"
    assert run(["build-index", "--passages", fixture_path("toy_viquad.passages.jsonl"), "--output", str(idx)]) == EXIT_OK
    report = tmp_path / "r.json"
    assert run(["odqa-eval", "--questions", fixture_path("toy_viquad.jsonl"), "--index", str(idx),
                "--oracle-reader", "--report", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert list(data) == ["1", "5", "10", "20"]
    assert all(v["f1"] == v["recall"] and v["n"] == 6 for v in data.values())
    assert "recall" in capsys.readouterr().out
    assert run(["odqa-eval", "--questions", fixture_path("toy_viquad.jsonl"), "--index", str(idx)]) == EXIT_USAGE


def test_finetune_commands_from_pretrained_checkpoint(tmp_path, pretrained):
    vocab = str(pretrained / "vocab.txt")
    ckpt = str(pretrained / "checkpoint")
    for cmd, train in (("finetune-pos", "toy_pos.conll"), ("finetune-ner", "toy_ner.conll"),
                       ("finetune-mrc", "toy_viquad.jsonl")):
        out = tmp_path / cmd
        rc = run([cmd, "--vocab", vocab, "--train", fixture_path(train), "--checkpoint", ckpt,
                  "--epochs", "2", "--lr", "1e-3", "--out", str(out)])
        assert rc == EXIT_OK, cmd
        report = json.loads((out / "report.json").read_text())
        assert "train" in report and (out / "model" / "manifest.txt").exists()
    idx = tmp_path / "i.bin"
    run(["build-index", "--passages", fixture_path("toy_viquad.passages.jsonl"), "--output", str(idx)])
    assert run(["odqa-eval", "--questions", fixture_path("toy_viquad.jsonl"), "--index", str(idx),
                "--reader", str(tmp_path / "finetune-mrc" / "model"), "--grid", "1,2"]) == EXIT_OK


def test_vocab_checkpoint_mismatch_is_data_error(tmp_path, pretrained):
    corpus = tmp_path / "c.txt"
    corpus.write_text("Lan đọc sách .\n", encoding="utf-8")
    run(["train-tokenizer", "--corpus", str(corpus), "--vocab-size", "30", "--out", str(tmp_path)])
    rc = run(["finetune-pos", "--vocab", str(tmp_path / "vocab.txt"), "--train", fixture_path("toy_pos.conll"),
              "--checkpoint", str(pretrained / "checkpoint"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA


def test_checkpoint_inspect(capsys, pretrained):
    assert run(["checkpoint-inspect", str(pretrained / "checkpoint")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "disc.embed.delta" in out and 'kind: "pretrain"' in out
    assert run(["checkpoint-inspect", "/nonexistent"]) == EXIT_DATA
