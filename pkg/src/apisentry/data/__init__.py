"""Bundled demo corpus for smoke tests and the README walkthrough."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_DEMO_FILE = Path(__file__).parent / "synthetic_demo.csv"
_DEMO_SEED = 7
_VOCAB = 25
_PLANTED = (7, 8, 9)  # occurs in every malware trace, never in goodware


def demo_corpus_path() -> Path:
    return _DEMO_FILE


def generate_demo_corpus(seed: int = _DEMO_SEED) -> str:
    """Regenerate the bundled corpus text: 60 goodware and 120 malware
    traces over a 25-id vocabulary. Malware carries a planted 3-gram whose
    constituent 2-grams also occur in goodware, so only the full 3-gram
    separates the classes."""
    rng = np.random.default_rng(seed)
    lines = [f"#vocab={_VOCAB}"]
    a, b, c = _PLANTED

    def random_calls(length: int) -> list[int]:
        return [int(v) for v in rng.integers(0, _VOCAB, size=length)]

    def has_planted(calls: list[int]) -> bool:
        # check the repeat-collapsed form too: ingest collapses repeats, and
        # e.g. [7,8,8,9] collapses into the planted [7,8,9]
        collapsed = [calls[0]] + [v for i, v in enumerate(calls[1:], 1) if v != calls[i - 1]]
        for seq in (calls, collapsed):
            if any(tuple(seq[i:i + 3]) == _PLANTED for i in range(len(seq) - 2)):
                return True
        return False

    for _ in range(60):
        while True:
            calls = random_calls(int(rng.integers(20, 41)))
            # keep the planted 3-gram's halves present in goodware
            pos = int(rng.integers(0, len(calls) - 4))
            filler = int(rng.integers(0, _VOCAB))
            while filler == c:
                filler = int(rng.integers(0, _VOCAB))
            calls[pos:pos + 2] = [a, b]
            calls[pos + 2] = filler
            pos2 = int(rng.integers(0, len(calls) - 2))
            calls[pos2:pos2 + 2] = [b, c]
            if not has_planted(calls):
                break
        lines.append("0," + ",".join(str(v) for v in calls))
    for _ in range(120):
        calls = random_calls(int(rng.integers(20, 41)))
        pos = int(rng.integers(0, len(calls) - 3))
        calls[pos:pos + 3] = [a, b, c]
        lines.append("1," + ",".join(str(v) for v in calls))
    return "\n".join(lines) + "\n"
