"""``subwordlm`` command-line interface.

Every setting of a command is a named key. Values are resolved as
built-in defaults, then ``--preset`` (train-neural), then the ``--config``
key=value file, then command-line flags. The resolved settings, their hash
and the derived sub-seeds are written next to the outputs as
``<command>.config.json``.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import corpus as corpus_mod
from . import evaluate, neural, ngram, sched, subword
from ._util import config_hash, sub_seed

SEED_NAMES = ("init", "masks", "bptt", "split", "sampling")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# typed keys


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_phases(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    out = []
    for part in s.split(","):
        n, _, lr = part.partition(":")
        out.append((int(n), float(lr)))
    return tuple(out)


def _fmt_phases(v) -> str:
    return ",".join(f"{n}:{lr!r}" for n, lr in v)


def _parse_floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    help: str = ""
    parse: Callable[[str], Any] | None = None
    fmt: Callable[[Any], str] = str

    def convert(self, raw: Any) -> Any:
        if not isinstance(raw, str):
            return raw
        if self.parse is not None:
            return self.parse(raw)
        if isinstance(self.default, bool):
            return _parse_bool(raw)
        if isinstance(self.default, int):
            return int(raw)
        if isinstance(self.default, float):
            return float(raw)
        return raw


def _dataclass_keys(cls, skip=(), help_map=None) -> list[Key]:
    keys = []
    obj = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(obj, f.name)
        if f.name == "phases":
            keys.append(Key(f.name, default, "epochs:lr pairs, comma separated; overrides epochs/lr",
                            _parse_phases, _fmt_phases))
        else:
            keys.append(Key(f.name, default, (help_map or {}).get(f.name, "")))
    return keys


TOKENIZER_KEYS = [
    Key("target_vocab_size", 30000, "vocabulary size including <s>, </s>, <unk>"),
    Key("seed_vocab_size", 0, "seed vocabulary size; 0 means 10 x target"),
    Key("prune_fraction", 0.2, "fraction of pieces removed per pruning round"),
    Key("max_piece_length", 16, "longest piece in characters"),
    Key("min_token_frequency", 3, "minimum frequency for characters and final pieces"),
    Key("mode", "subword", "subword or word"),
    Key("em_max_iterations", 10, "EM iterations per round"),
    Key("em_tolerance", 1e-6, "relative log-likelihood gain that ends a round"),
    Key("format", "jsonl", "input corpus format: jsonl or directory"),
]

MODEL_KEYS = _dataclass_keys(neural.NeuralLMConfig, help_map={
    "vocab_size": "upper bound; the model uses the vocabulary file's size",
    "dropout_multiplier": "scales every *_drop_p",
    "variable_bptt": "randomize window lengths around bptt_len",
})
TRAIN_KEYS = _dataclass_keys(sched.TrainConfig, help_map={
    "optimizer": "adam, sgd or ntasgd",
    "schedule": "constant or sgdr (cosine, restarted every epoch)",
    "clip_norm": "global gradient-norm clip; 0 disables",
})

COMMAND_KEYS: dict[str, list[Key]] = {
    "stats": [Key("format", "jsonl", "input corpus format: jsonl or directory")],
    "split": [
        Key("fraction", 0.2, "held-out fraction"),
        Key("stratify", False, "hold out the fraction within each category"),
        Key("format", "jsonl", "input corpus format: jsonl or directory"),
    ],
    "train-tokenizer": TOKENIZER_KEYS,
    "tokenize": [Key("format", "jsonl", "input format: jsonl, directory or text (one document per line)")],
    "train-ngram": [
        Key("order", 2, "highest n-gram order counted (1-3)"),
        Key("buckets", (1.0, 10.0, 100.0), "context-frequency bucket boundaries", _parse_floats,
            lambda v: ",".join(repr(x) for x in v)),
        Key("q_mode", "context", "bucket on context or pair frequency"),
        Key("max_iter", 500, "EM iterations per bucket"),
    ],
    "train-neural": MODEL_KEYS + TRAIN_KEYS,
    "lr-find": MODEL_KEYS + [
        Key("lr_lo", 1e-5, "first learning rate"),
        Key("lr_hi", 1.0, "last learning rate"),
        Key("steps", 100, "number of multiplicative steps"),
        Key("clip_norm", 0.25, "global gradient-norm clip"),
    ],
    "eval": [
        Key("name", "", "model name in the report (default: checkpoint or n-gram)"),
        Key("eval_batch_size", 10, "parallel lanes for neural evaluation"),
    ],
    "generate": [
        Key("max_tokens", 100, "tokens to generate"),
        Key("strategy", "sample", "greedy or sample"),
        Key("temperature", 0.8, "softmax temperature when sampling"),
    ],
}


def read_config_file(path: str | Path, keys: dict[str, Key]) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        name = name.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if name not in keys:
            raise ConfigError(f"{path}:{lineno}: unknown key {name!r}")
        try:
            out[name] = keys[name].convert(value.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {name}: {exc}") from None
    return out


def resolve_config(command: str, preset: str | None, config_file: str | None, flags: dict[str, Any]) -> dict:
    keys = {k.name: k for k in COMMAND_KEYS[command]}
    cfg = {k.name: k.default for k in COMMAND_KEYS[command]}
    if preset:
        if preset not in sched.PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(sched.PRESETS)}")
        cfg.update({k: v for k, v in sched.PRESETS[preset].items() if k in keys})
    if config_file:
        cfg.update(read_config_file(config_file, keys))
    for name, raw in flags.items():
        try:
            cfg[name] = keys[name].convert(raw)
        except ValueError as exc:
            raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
    return cfg


def _jsonable(cfg: dict) -> dict:
    return {k: list(map(list, v)) if k == "phases" else (list(v) if isinstance(v, tuple) else v)
            for k, v in cfg.items()}


# --------------------------------------------------------------------------
# run context


@dataclass
class Run:
    command: str
    config: dict
    seed: int
    out: Path
    inputs: dict

    @property
    def hash(self) -> str:
        return config_hash({"command": self.command, "config": _jsonable(self.config), "seed": self.seed})

    def sub_seed(self, name: str) -> int:
        return sub_seed(self.seed, name)

    def write_sidecar(self, outputs: list[str]) -> None:
        record = {
            "command": self.command,
            "config": _jsonable(self.config),
            "config_hash": self.hash,
            "seed": self.seed,
            "sub_seeds": {n: self.sub_seed(n) for n in SEED_NAMES},
            "inputs": self.inputs,
            # relative to the output directory so reruns elsewhere compare equal
            "outputs": [_relative(o, self.out) for o in outputs],
        }
        path = self.out / f"{self.command}.config.json"
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _relative(path: str, base: Path) -> str:
    p = Path(path)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def _load_texts(path: str, fmt: str) -> corpus_mod.Corpus:
    if fmt == "text":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"{path}: no such file")
        lines = [ln for ln in p.read_text(encoding="utf-8").splitlines() if corpus_mod.normalize_text(ln)]
        if not lines:
            raise corpus_mod.CorpusError(f"{path}: zero usable documents")
        return corpus_mod.Corpus.from_texts(lines)
    return corpus_mod.ingest_corpus(path, fmt)


def _model_config(cfg: dict, vocab: subword.SubwordVocab) -> neural.NeuralLMConfig:
    names = {f.name for f in fields(neural.NeuralLMConfig)}
    d = {k: v for k, v in cfg.items() if k in names}
    if len(vocab) > d["vocab_size"]:
        raise ConfigError(f"vocabulary has {len(vocab)} entries but vocab_size is {d['vocab_size']}")
    d["vocab_size"] = len(vocab)
    return neural.NeuralLMConfig(**d)


# --------------------------------------------------------------------------
# commands


def cmd_stats(run: Run, args) -> list[str]:
    c = corpus_mod.ingest_corpus(args.corpus, run.config["format"])
    text = corpus_mod.stats_to_csv(corpus_mod.corpus_stats(c))
    path = run.out / "stats.csv"
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return [str(path)]


def cmd_split(run: Run, args) -> list[str]:
    c = corpus_mod.ingest_corpus(args.corpus, run.config["format"])
    train, held = corpus_mod.split_holdout(c, run.config["fraction"], run.sub_seed("split"),
                                           stratify=run.config["stratify"])
    paths = [run.out / "train.jsonl", run.out / "heldout.jsonl"]
    corpus_mod.write_jsonl(train, paths[0])
    corpus_mod.write_jsonl(held, paths[1])
    print(f"train: {len(train)} documents, heldout: {len(held)} documents")
    return [str(p) for p in paths]


def cmd_train_tokenizer(run: Run, args) -> list[str]:
    cfg = run.config
    c = corpus_mod.ingest_corpus(args.corpus, cfg["format"])
    tcfg = subword.TokenizerConfig(
        target_vocab_size=cfg["target_vocab_size"],
        seed_vocab_size=cfg["seed_vocab_size"] or None,
        prune_fraction=cfg["prune_fraction"],
        max_piece_length=cfg["max_piece_length"],
        min_token_frequency=cfg["min_token_frequency"],
        mode=cfg["mode"],
        em_max_iterations=cfg["em_max_iterations"],
        em_tolerance=cfg["em_tolerance"],
    )
    history: list[subword.EMRecord] = []
    vocab = subword.train_tokenizer(c, tcfg, history)
    vocab.meta["config_hash"] = run.hash
    path = run.out / "vocab.tsv"
    vocab.save(path)
    outputs = [str(path)]
    if history:
        hpath = run.out / "em_history.csv"
        rows = ["round,iteration,log_likelihood,vocab_size"]
        rows += [f"{r.round},{r.iteration},{r.log_likelihood!r},{r.vocab_size}" for r in history]
        hpath.write_text("\n".join(rows) + "\n", encoding="utf-8")
        outputs.append(str(hpath))
    print(f"{len(vocab)} entries -> {path}")
    return outputs


def cmd_tokenize(run: Run, args) -> list[str]:
    vocab = subword.SubwordVocab.load(args.vocab)
    c = _load_texts(args.input, run.config["format"])
    ids = subword.encode_corpus(c, vocab)
    name = args.output or (Path(args.input).stem + ".ids")
    path = run.out / name
    subword.write_ids(path, ids)
    print(f"{ids.size} tokens -> {path}")
    return [str(path)]


def _vocab_size(args, *streams) -> int:
    if args.vocab:
        return len(subword.SubwordVocab.load(args.vocab))
    return int(max(int(s.max()) for s in streams)) + 1


def cmd_train_ngram(run: Run, args) -> list[str]:
    cfg = run.config
    train_ids = subword.read_ids(args.train_ids)
    held = subword.read_ids(args.heldout_ids)
    V = _vocab_size(args, train_ids, held)
    if cfg["order"] < 2:
        raise ConfigError("order must be >= 2 for the interpolated bigram")
    counts = ngram.count_ngrams(train_ids, cfg["order"])
    weights = ngram.fit_weights(counts, held, V, cfg["buckets"], cfg["q_mode"], cfg["max_iter"])
    header = {"config_hash": run.hash, "vocab_size": str(V)}
    cpath, wpath = run.out / "ngram_counts.tsv", run.out / "ngram_weights.tsv"
    counts.save(cpath, header)
    weights.save(wpath, header)
    held_ppl = ngram.ngram_perplexity(counts, weights, held, V)
    print(f"held-out perplexity {held_ppl:.4f} -> {cpath}, {wpath}")
    return [str(cpath), str(wpath)]


def cmd_train_neural(run: Run, args) -> list[str]:
    cfg = run.config
    vocab = subword.SubwordVocab.load(args.vocab)
    mcfg = _model_config(cfg, vocab)
    tnames = {f.name for f in fields(sched.TrainConfig)}
    tcfg = sched.TrainConfig(**{k: v for k, v in cfg.items() if k in tnames})
    train_ids = subword.read_ids(args.train_ids)
    valid_ids = subword.read_ids(args.valid_ids)
    meta = {"vocab_fingerprint": vocab.fingerprint(), "granularity": vocab.mode,
            "preset": args.preset or "", "config_hash": run.hash}
    result = sched.train(mcfg, train_ids, valid_ids, tcfg, run.seed, run.out, meta=meta,
                         progress=lambda s: print(s, file=sys.stderr))
    print(f"best val_loss {result.best_val_loss:.4f} at epoch {result.best_epoch}")
    return [str(run.out / n) for n in ("best.ckpt", "final.ckpt", "train_log.csv", "epoch_log.csv")]


def cmd_lr_find(run: Run, args) -> list[str]:
    cfg = run.config
    vocab = subword.SubwordVocab.load(args.vocab)
    mcfg = _model_config(cfg, vocab)
    train_ids = subword.read_ids(args.train_ids)
    step = sched.neural_step_fn(mcfg, train_ids, run.seed, clip_norm=cfg["clip_norm"])
    res = sched.lr_range_test(step, cfg["lr_lo"], cfg["lr_hi"], cfg["steps"])
    path = run.out / "lr_find.csv"
    res.to_csv(path)
    print(f"suggested lr {res.suggestion!r}")
    return [str(path)]


def cmd_eval(run: Run, args) -> list[str]:
    vocab = subword.SubwordVocab.load(args.vocab)
    test_ids = subword.read_ids(args.test_ids)
    if args.checkpoint:
        model = neural.load_checkpoint(args.checkpoint)
        name = run.config["name"] or Path(args.checkpoint).stem
        report = evaluate.neural_perplexity(model, vocab, test_ids, name, run.config["eval_batch_size"])
    elif args.ngram_counts and args.ngram_weights:
        counts = ngram.NgramCounts.load(args.ngram_counts)
        weights = ngram.InterpolationWeights.load(args.ngram_weights)
        name = run.config["name"] or "interpolated-bigram"
        report = evaluate.ngram_report(counts, weights, vocab, test_ids, name, run.seed, run.hash)
    else:
        raise ConfigError("eval needs --checkpoint or both --ngram-counts and --ngram-weights")
    path = run.out / "eval.csv"
    evaluate.write_reports_csv([report], path)
    sys.stdout.write(evaluate.compare_models([report]).to_text())
    return [str(path)]


def cmd_generate(run: Run, args) -> list[str]:
    vocab = subword.SubwordVocab.load(args.vocab)
    model = neural.load_checkpoint(args.checkpoint)
    gen = evaluate.GenerationConfig(args.prompt, run.config["max_tokens"], run.config["strategy"],
                                    run.config["temperature"], run.sub_seed("sampling"))
    print(evaluate.generate(model, vocab, gen))
    return []


COMMANDS = {
    "stats": (cmd_stats, "per-category corpus statistics CSV"),
    "split": (cmd_split, "seeded held-out split into train.jsonl / heldout.jsonl"),
    "train-tokenizer": (cmd_train_tokenizer, "train a unigram subword (or word) vocabulary"),
    "tokenize": (cmd_tokenize, "encode documents into an id stream file"),
    "train-ngram": (cmd_train_ngram, "count n-grams and fit interpolation weights"),
    "train-neural": (cmd_train_neural, "train the LSTM language model"),
    "lr-find": (cmd_lr_find, "learning-rate range test"),
    "eval": (cmd_eval, "held-out perplexity report"),
    "generate": (cmd_generate, "complete a prompt with a trained model"),
}


def _add_positionals(name: str, p: argparse.ArgumentParser) -> None:
    if name in ("stats", "split", "train-tokenizer"):
        p.add_argument("corpus", help="corpus path")
    elif name == "tokenize":
        p.add_argument("input", help="documents to encode")
        p.add_argument("--vocab", required=True, help="vocabulary file")
        p.add_argument("--output", default=None, help="output file name inside --out")
    elif name == "train-ngram":
        p.add_argument("train_ids")
        p.add_argument("heldout_ids")
        p.add_argument("--vocab", default=None, help="vocabulary file (sets |V|)")
    elif name == "train-neural":
        p.add_argument("train_ids")
        p.add_argument("valid_ids")
        p.add_argument("--vocab", required=True)
        p.add_argument("--preset", choices=sorted(sched.PRESETS), default=None)
    elif name == "lr-find":
        p.add_argument("train_ids")
        p.add_argument("--vocab", required=True)
    elif name == "eval":
        p.add_argument("test_ids")
        p.add_argument("--vocab", required=True)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--ngram-counts", default=None)
        p.add_argument("--ngram-weights", default=None)
    elif name == "generate":
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--prompt", default="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subwordlm", description="Subword and word language modelling toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value settings file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    parser.add_argument("--config", default=None, help="key=value settings file")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, summary) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=summary, description=summary,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_positionals(name, p)
        g = p.add_argument_group("settings (also accepted as key=value lines in --config)")
        for key in COMMAND_KEYS[name]:
            text = f"{key.help}; " if key.help else ""
            flag = "--" + key.name.replace("_", "-")
            g.add_argument(flag, dest=f"key_{key.name}", default=argparse.SUPPRESS, metavar="V",
                           help=f"{text}default: {key.fmt(key.default)}".replace("%", "%%"))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_")}
        cfg = resolve_config(command, getattr(args, "preset", None), args.config, flags)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = {k: v for k, v in vars(args).items()
                  if not k.startswith("key_") and k not in ("command", "config", "seed", "out") and v is not None}
        if args.config:
            inputs["config"] = args.config
        run = Run(command, cfg, args.seed, out, inputs)
        outputs = COMMANDS[command][0](run, args)
        run.write_sidecar(outputs)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"subwordlm {command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
