"""Round-trip-consistency QA mining from captions."""
from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .oracle import LMOracle, OracleError, StubOracle, render
from .similarity import partial_similarity

log = logging.getLogger(__name__)

THRESHOLD = 0.9
COLOR_LEXICON = StubOracle.COLORS
ANSWER_TOKENS = 16
QUESTION_TOKENS = 32


@dataclass
class QAExample:
    caption: str
    question: str
    answer: str
    modality: str
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"caption": self.caption, "question": self.question, "answer": self.answer,
                "modality": self.modality, "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "QAExample":
        return cls(d["caption"], d["question"], d["answer"], d["modality"], d.get("provenance", {}))


@dataclass
class Skip:
    caption: str
    reason: str


def _strip_punct(s: str) -> str:
    return s.strip().strip(string.punctuation + " ")


def format_question(q: str) -> str | None:
    """Trim, keep the first line, make it end with a single "?"; None if nothing usable remains."""
    q = q.strip().splitlines()[0].strip() if q.strip() else ""
    q = q.rstrip(" ?.!")
    if not re.search(r"[A-Za-z]", q):
        return None
    return q + "?"


def single_word(answer: str) -> bool:
    return len(_strip_punct(answer).split()) == 1


def generate_qa_pairs(captions: Sequence[str], oracle: LMOracle, modality: str = "image",
                      min_caption_words: int = 10, threshold: float = THRESHOLD,
                      skipped: list | None = None) -> list[QAExample]:
    """Mine (question, answer) pairs whose round-trip answer matches the proposed one."""
    if not captions:
        raise ValueError("no captions")
    skipped = skipped if skipped is not None else []
    out = []
    for cap in captions:
        if len(cap.split()) < min_caption_words:
            skipped.append(Skip(cap, f"fewer than {min_caption_words} words"))
            continue
        try:
            out.extend(_mine_caption(cap, oracle, modality, threshold, skipped))
        except OracleError as e:
            log.warning("oracle failure, caption skipped: %r (%s)", cap, e)
            skipped.append(Skip(cap, f"oracle failure: {e}"))
    return out


def _mine_caption(cap, oracle, modality, threshold, skipped) -> list[QAExample]:
    out = []
    raw = oracle(render("answers", caption=cap), max_tokens=ANSWER_TOKENS, stop=["\n"])
    answers = []
    for a in raw.split(","):
        a = _strip_punct(a)
        if a and a not in answers:
            answers.append(a)
    for ans in answers:
        if not single_word(ans):
            skipped.append(Skip(cap, f"answer {ans!r} is not a single word"))
            continue
        q_prompt = render("question", caption=cap, answer=ans)
        q = format_question(oracle(q_prompt, max_tokens=QUESTION_TOKENS, stop=["\n"]))
        if q is None:
            skipped.append(Skip(cap, f"malformed question for answer {ans!r}"))
            continue
        a_prompt = render("answer", caption=cap, question=q)
        rt = _strip_punct(oracle(a_prompt, max_tokens=ANSWER_TOKENS, stop=["\n"]))
        sim = partial_similarity(rt, ans)
        if sim <= threshold:
            skipped.append(Skip(cap, f"round trip {rt!r} vs {ans!r} similarity {sim:.3f}"))
            continue
        out.append(QAExample(cap, q, ans, modality, {
            "answer_prompt": a_prompt, "question_prompt": q_prompt,
            "roundtrip_answer": rt, "similarity": round(sim, 6), "oracle": oracle.settings()}))
    return out


def strip_color(caption: str, oracle: LMOracle, lexicon: Iterable[str] = COLOR_LEXICON) -> str:
    """Oracle rewrite without color words; raises ValueError if a lexicon color survives."""
    if not caption.strip():
        raise ValueError("empty caption")
    out = oracle(render("strip_color", caption=caption), max_tokens=64, stop=["\n"])
    lex = {w.lower() for w in lexicon}
    left = [w for w in re.findall(r"[a-z]+", out.lower()) if w in lex]
    if left:
        raise ValueError(f"rewrite still mentions colors {left}: {out!r}")
    return out


def generate_qa_pairs_3d(captions: Sequence[str], oracle: LMOracle, min_caption_words: int = 10,
                         threshold: float = THRESHOLD, skipped: list | None = None) -> list[QAExample]:
    """3D pipeline: colors are stripped from each caption before mining."""
    skipped = skipped if skipped is not None else []
    clean = []
    for cap in captions:
        try:
            clean.append(strip_color(cap, oracle))
        except (ValueError, OracleError) as e:
            log.warning("caption dropped by color stripping: %r (%s)", cap, e)
            skipped.append(Skip(cap, f"color stripping: {e}"))
    if not clean:
        return []
    return generate_qa_pairs(clean, oracle, "pc3d", min_caption_words, threshold, skipped)


def rescan(examples: Sequence[QAExample], threshold: float = THRESHOLD) -> list[QAExample]:
    """Examples that fail the round-trip similarity when recomputed from scratch."""
    return [e for e in examples
            if partial_similarity(e.provenance.get("roundtrip_answer", ""), e.answer) <= threshold]
