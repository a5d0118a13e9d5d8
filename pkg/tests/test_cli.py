import json
import random

import pytest

from subwordlm import cli, sched


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = random.Random(0)
    words = ["".join(rng.choice("abcdefgh") for _ in range(rng.randint(2, 6))) for _ in range(80)]
    with open(d / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for i in range(40):
            text = " ".join(rng.choice(words) for _ in range(rng.randint(30, 60)))
            fh.write(json.dumps({"category": "ab"[i % 2], "text": text}) + "\n")
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_pipeline(workdir, capsys):
    d = workdir
    assert run("stats", d / "corpus.jsonl", "--out", d) == 0
    assert (d / "stats.csv").read_text().startswith("category,samples,total_words,unique_words")
    assert run("split", d / "corpus.jsonl", "--out", d, "--fraction", "0.25", "--seed", "3") == 0
    assert run("train-tokenizer", d / "train.jsonl", "--out", d, "--target-vocab-size", "60") == 0
    assert "#config_hash\t" in (d / "vocab.tsv").read_text(encoding="utf-8")
    for split in ("train", "heldout"):
        assert run("tokenize", d / f"{split}.jsonl", "--vocab", d / "vocab.tsv", "--out", d) == 0
    assert run("train-ngram", d / "train.ids", d / "heldout.ids", "--vocab", d / "vocab.tsv", "--out", d) == 0
    cfg = d / "tiny.cfg"
    cfg.write_text("# tiny model\nembed_dim = 8\nhidden_dim = 10\nnum_layers = 1\nbptt_len = 10\n"
                   "batch_size = 4\nepochs = 2\nlr = 0.01\ntie_weights = false\n", encoding="utf-8")
    assert run("train-neural", d / "train.ids", d / "heldout.ids", "--vocab", d / "vocab.tsv",
               "--config", cfg, "--out", d / "nn", "--seed", "1") == 0
    side = json.loads((d / "nn" / "train-neural.config.json").read_text())
    assert side["config"]["embed_dim"] == 8 and side["config"]["tie_weights"] is False
    assert set(side["sub_seeds"]) >= {"init", "masks", "split", "sampling"}
    capsys.readouterr()
    assert run("eval", d / "heldout.ids", "--vocab", d / "vocab.tsv", "--checkpoint", d / "nn" / "final.ckpt",
               "--out", d / "nn") == 0
    rows = (d / "nn" / "eval.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split(",")[-1] == side["config_hash"]
    assert run("eval", d / "heldout.ids", "--vocab", d / "vocab.tsv", "--ngram-counts", d / "ngram_counts.tsv",
               "--ngram-weights", d / "ngram_weights.tsv", "--out", d) == 0
    capsys.readouterr()
    assert run("generate", "--checkpoint", d / "nn" / "final.ckpt", "--vocab", d / "vocab.tsv",
               "--prompt", "abc", "--max-tokens", "5", "--strategy", "greedy") == 0
    first = capsys.readouterr().out
    assert run("generate", "--checkpoint", d / "nn" / "final.ckpt", "--vocab", d / "vocab.tsv",
               "--prompt", "abc", "--max-tokens", "5", "--strategy", "greedy") == 0
    assert capsys.readouterr().out == first
    assert run("lr-find", d / "train.ids", "--vocab", d / "vocab.tsv", "--config", cfg, "--steps", "20",
               "--lr-lo", "1e-4", "--out", d / "lr") in (0, 1)


def test_rerun_is_byte_identical(workdir):
    d = workdir
    args = ["--embed-dim", "6", "--hidden-dim", "6", "--num-layers", "1", "--bptt-len", "8", "--batch-size", "2",
            "--epochs", "1", "--tie-weights", "false"]
    for name in ("r1", "r2"):
        assert run("train-neural", d / "train.ids", d / "heldout.ids", "--vocab", d / "vocab.tsv",
                   "--out", d / name, *args) == 0
    for f in ("final.ckpt", "best.ckpt", "train_log.csv", "train-neural.config.json"):
        assert (d / "r1" / f).read_bytes() == (d / "r2" / f).read_bytes()


def test_presets_resolve():
    sub = cli.resolve_config("train-neural", "subword", None, {})
    assert (sub["epochs"], sub["lr"], sub["bptt_len"], sub["batch_size"]) == (20, 1e-3, 70, 32)
    word = cli.resolve_config("train-neural", "word-baseline", None, {})
    assert word["vocab_size"] == 60000
    assert sched.TrainConfig(phases=word["phases"]).epoch_lrs() == [1e-2] * 4 + [1e-3] * 3
    simple = cli.resolve_config("train-neural", "simple-lstm", None, {"epochs": "3"})
    assert simple["hidden_dim"] == 200 and simple["epochs"] == 3


def test_resolution_order(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 5\nlr = 0.5\n")
    r = cli.resolve_config("train-neural", "subword", str(cfg), {"lr": "0.25"})
    assert (r["epochs"], r["lr"]) == (5, 0.25)


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus_key = 1\n")
    assert run("stats", "x.jsonl", "--config", cfg) == 1
    err = capsys.readouterr().err.strip()
    assert "unknown key 'bogus_key'" in err and len(err.splitlines()) == 1


def test_missing_file_diagnostic(tmp_path, capsys):
    assert run("stats", tmp_path / "missing.jsonl", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "missing.jsonl" in err and len(err.strip().splitlines()) == 1


def test_bad_value(capsys):
    assert run("train-neural", "a", "b", "--vocab", "v", "--epochs", "many") == 1
    assert "--epochs" in capsys.readouterr().err


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in cli.COMMAND_KEYS[command]:
        assert "--" + key.name.replace("_", "-") in out
        assert f"default: {key.fmt(key.default)}" in " ".join(out.split())
