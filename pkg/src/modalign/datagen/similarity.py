"""Partial string similarity used by the round-trip filters."""
from __future__ import annotations


def _lcs(a: str, b: str) -> int:
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b):
            cur.append(prev[j] + 1 if ca == cb else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def ratio(a: str, b: str) -> float:
    """Normalized indel similarity: 1 - indel_distance / (len(a) + len(b))."""
    if not a and not b:
        return 1.0
    return 2.0 * _lcs(a, b) / (len(a) + len(b))


def partial_similarity(a: str, b: str) -> float:
    """Best ``ratio`` of the shorter string against equal-length windows of the longer.

    Case-folded. Two empty strings give 1.0; one empty string gives 0.0.
    """
    a, b = a.casefold(), b.casefold()
    if len(a) > len(b):
        a, b = b, a
    if not a:
        return 1.0 if not b else 0.0
    n = len(a)
    best = 0.0
    for i in range(len(b) - n + 1):
        best = max(best, ratio(a, b[i:i + n]))
        if best == 1.0:
            break
    return best
