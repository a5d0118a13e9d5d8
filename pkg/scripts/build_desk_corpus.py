"""Build the ~1 MB public-domain desk corpus used by the end-to-end tests.

Source texts are the Project Gutenberg Shakespeare editions bundled in the
``shakespeare`` sdist on PyPI (``pip download --no-deps --no-binary :all:
shakespeare==0.6``). Plays are split into one document per scene; the
sonnets are grouped ten to a document. Categories are the genre.

    python scripts/build_desk_corpus.py shakespeare-0.6.tar.gz data/desk_corpus.jsonl
"""
from __future__ import annotations

import argparse
import json
import re
import tarfile

WORKS = {
    "tragedy": ["macbeth_gut.txt", "othello_gut.txt", "julius_caesar_gut.txt"],
    "comedy": ["tempest_gut.txt", "twelfth_night_gut.txt", "midsummer_nights_dream_gut.txt"],
    "history": ["henry_v_gut.txt", "richard_ii_gut.txt"],
    "poetry": ["sonnets_gut.txt"],
}

SCENE = re.compile(r"^\s*(?:SCENE|Scene) [IVXLC]+\b", re.MULTILINE)
SONNET = re.compile(r"^\s*[IVXLC]+\s*$", re.MULTILINE)


def split_work(text: str, poetry: bool) -> list[str]:
    pattern = SONNET if poetry else SCENE
    cuts = [m.start() for m in pattern.finditer(text)]
    if not cuts:
        return [text]
    pieces = [text[a:b] for a, b in zip(cuts, cuts[1:] + [len(text)])]
    if poetry:
        pieces = ["".join(pieces[i:i + 10]) for i in range(0, len(pieces), 10)]
    return [p.strip() for p in pieces if p.strip()]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("tarball")
    ap.add_argument("out")
    args = ap.parse_args()
    n = 0
    with tarfile.open(args.tarball) as tar, open(args.out, "w", encoding="utf-8", newline="\n") as out:
        members = {m.name.rsplit("/", 1)[-1]: m for m in tar.getmembers() if "shksprdata/texts/" in m.name}
        for category, files in WORKS.items():
            for name in files:
                raw = tar.extractfile(members[name]).read().decode("latin-1")
                for doc in split_work(raw.replace("\r\n", "\n"), category == "poetry"):
                    out.write(json.dumps({"category": category, "text": doc}, ensure_ascii=False) + "\n")
                    n += 1
    print(f"wrote {n} documents to {args.out}")


if __name__ == "__main__":
    main()
