from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DESK_CORPUS = ROOT / "data" / "desk_corpus.jsonl"


@pytest.fixture
def write_jsonl(tmp_path):
    import json

    def _write(rows, name="c.jsonl"):
        p = tmp_path / name
        with open(p, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
        return p

    return _write


_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an acceptance verdict; the terminal summary prints one line each."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        ok = bool(ok)
        _CRITERIA.append((name, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
