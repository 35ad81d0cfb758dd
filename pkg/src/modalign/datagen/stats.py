"""Summary statistics over generated QA / DisCRn sets."""
from __future__ import annotations

import re
from typing import Sequence


def _words(s: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", s.lower())


def dataset_stats(examples: Sequence) -> dict:
    """size, distinct questions/answers, mean question length in words, vocabulary size.

    Vocabulary counts distinct lower-cased words over questions and answers.
    """
    if not examples:
        return {"size": 0, "distinct_questions": 0, "distinct_answers": 0,
                "avg_question_length": 0.0, "vocabulary_size": 0}
    qs = [e.question for e in examples]
    ans = [e.answer for e in examples]
    vocab = set()
    for s in qs + ans:
        vocab.update(_words(s))
    return {
        "size": len(examples),
        "distinct_questions": len(set(qs)),
        "distinct_answers": len(set(ans)),
        "avg_question_length": sum(len(q.split()) for q in qs) / len(qs),
        "vocabulary_size": len(vocab),
    }
