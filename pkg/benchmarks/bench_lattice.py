"""Time the pure-Python and Cython lattice kernels on the same lattice.

    python benchmarks/bench_lattice.py [--corpus data/desk_corpus.jsonl] [--repeat 3]

Builds the training lattice of a seed vocabulary for the corpus, then runs
forward-backward and Viterbi with each backend and checks they agree.
"""
import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

from subwordlm import _lattice_py, corpus, subword

try:
    from subwordlm import _lattice_ext
except ImportError:
    _lattice_ext = None


def build(path: Path, max_docs: int):
    c = corpus.ingest_corpus(path)
    c = corpus.Corpus(c.documents[:max_docs])
    cfg = subword.TokenizerConfig(target_vocab_size=2000)
    units, _ = subword.training_units(c, cfg)
    seed = subword.seed_vocabulary(c, cfg)
    index = {p: i for i, p in enumerate(seed)}
    logp = np.array(list(seed.values()))
    logp -= np.logaddexp.reduce(logp)
    lat = subword.Lattice.build(list(units), list(units.values()), index, cfg.max_piece_length)
    return lat, logp


def run(impl, lat, logp, which):
    counts = np.zeros_like(logp)
    args = (lat.starts, lat.ends, lat.pieces, lat.ptr, lat.lengths, lat.weights, logp, counts)
    if which == "forward-backward":
        return impl.expected_counts(*args), counts
    return impl.viterbi_counts(*args), counts


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "desk_corpus.jsonl")
    ap.add_argument("--max-docs", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _lattice_ext is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    lat, logp = build(args.corpus, args.max_docs)
    print(f"units={lat.lengths.size} edges={lat.pieces.size} pieces={logp.size}")
    print(f"{'kernel':<18}{'python s':>10}{'cython s':>10}{'speedup':>9}")
    for which in ("forward-backward", "viterbi"):
        (ll_py, c_py), (ll_cy, c_cy) = run(_lattice_py, lat, logp, which), run(_lattice_ext, lat, logp, which)
        assert abs(ll_py - ll_cy) <= 1e-9 * abs(ll_py) and np.allclose(c_py, c_cy, rtol=1e-9, atol=1e-12)
        t_py = min(timeit.repeat(lambda: run(_lattice_py, lat, logp, which), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: run(_lattice_ext, lat, logp, which), number=1, repeat=args.repeat))
        print(f"{which:<18}{t_py:>10.3f}{t_cy:>10.4f}{t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
