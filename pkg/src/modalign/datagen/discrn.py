"""Discriminative cross-modal reasoning (two inputs, pick one) dataset builder."""
from __future__ import annotations

import logging
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .oracle import LMOracle, OracleError, render
from .similarity import partial_similarity

log = logging.getLogger(__name__)

THRESHOLD = 0.9
MODALITY_PLACEHOLDER = "{answer modality}"
FIRST_SPACE = (MODALITY_PLACEHOLDER, "left", "1st", "1", "first", "input 1", "entity 1", "object 1",
               "input A", "entity A", "object A")
SECOND_SPACE = (MODALITY_PLACEHOLDER, "right", "2nd", "second", "input 2", "entity 2", "object 2",
                "input B", "entity B", "object B")
SLOT_NAMES = ("first", "second")
MODALITY_WORDS = {"image": "image", "video": "video", "audio": "audio", "pc3d": "3d"}


def answer_spaces(modality_a: str, modality_b: str) -> list[list[str]]:
    """Expanded answer phrases for each slot.

    The modality name stands in for the placeholder; when both slots share a
    modality the name identifies neither, so it is left out of both lists.
    """
    out = []
    for space, m in ((FIRST_SPACE, modality_a), (SECOND_SPACE, modality_b)):
        name = MODALITY_WORDS.get(m, m)
        phrases = []
        for p in space:
            if p == MODALITY_PLACEHOLDER:
                if modality_a != modality_b:
                    phrases.append(name)
            else:
                phrases.append(p)
        out.append(phrases)
    return out


@dataclass
class Instance:
    caption: str
    modality: str
    ref: str

    def to_json(self) -> dict:
        return {"caption": self.caption, "modality": self.modality, "ref": self.ref}


@dataclass
class DisCRnExample:
    question: str
    slots: list[Instance]
    answer_index: int
    explanation: str = ""
    answer_spaces: list[list[str]] = field(default_factory=list)

    @property
    def answer(self) -> str:
        return SLOT_NAMES[self.answer_index]

    @property
    def bucket(self) -> tuple[str, str]:
        return tuple(sorted(s.modality for s in self.slots))

    def swapped(self) -> "DisCRnExample":
        """Same pair in the other slot order; answer spaces are positional, so they are rebuilt."""
        a, b = self.slots[1], self.slots[0]
        return DisCRnExample(self.question, [a, b], 1 - self.answer_index, _swap_slot_words(self.explanation),
                             answer_spaces(a.modality, b.modality) if self.answer_spaces else [])

    def to_json(self) -> dict:
        return {"question": self.question, "slots": [s.to_json() for s in self.slots],
                "answer_index": self.answer_index, "explanation": self.explanation,
                "answer_spaces": self.answer_spaces}

    @classmethod
    def from_json(cls, d: dict) -> "DisCRnExample":
        return cls(d["question"], [Instance(**s) for s in d["slots"]], d["answer_index"],
                   d.get("explanation", ""), d.get("answer_spaces", []))


_SLOT_WORD = re.compile(r"\b(first|second)\b", re.IGNORECASE)


def _swap_slot_words(text: str) -> str:
    def sub(m):
        w = m.group(0)
        other = "second" if w.lower() == "first" else "first"
        return other.capitalize() if w[0].isupper() else other
    return _SLOT_WORD.sub(sub, text)


def _answer_index(text: str) -> int | None:
    t = text.strip().lower()
    hits = [i for i, name in enumerate(SLOT_NAMES) if partial_similarity(t, name) > THRESHOLD]
    return hits[0] if len(hits) == 1 else None


def build_discrn(pool_a: Sequence[Instance], pool_b: Sequence[Instance], oracle: LMOracle,
                 seed: int = 0, skipped: list | None = None, balance: bool = True) -> list[DisCRnExample]:
    """One candidate pair per instance of ``pool_a``, kept if the oracle's answer survives a round trip."""
    if not pool_a or not pool_b:
        raise ValueError("both pools must be nonempty")
    rng = random.Random(seed)
    skipped = skipped if skipped is not None else []
    out = []
    for inst in pool_a:
        partners = [p for p in pool_b if p.ref != inst.ref]
        if not partners:
            skipped.append((inst.ref, "no distinct partner"))
            continue
        other = partners[rng.randrange(len(partners))]
        try:
            ex = _build_pair(inst, other, oracle)
        except OracleError as e:
            log.warning("oracle failure, pair %s/%s skipped: %s", inst.ref, other.ref, e)
            skipped.append((inst.ref, f"oracle failure: {e}"))
            continue
        if isinstance(ex, str):
            skipped.append((inst.ref, ex))
            continue
        out.append(ex)
    return balance_answers(out, seed) if balance and out else out


def _build_pair(a: Instance, b: Instance, oracle: LMOracle):
    props = oracle(render("properties", caption=a.caption), max_tokens=32, stop=["\n"])
    raw = oracle(render("pair", caption_a=a.caption, caption_b=b.caption, properties=props),
                 max_tokens=48, stop=["\n"])
    parts = [p.strip() for p in raw.split("|")]
    if len(parts) != 3 or not parts[0]:
        return f"malformed pair output {raw!r}"
    question, stated, explanation = parts
    idx = _answer_index(stated)
    if idx is None:
        return f"stated answer {stated!r} names no slot"
    rt = oracle(render("pair_answer", caption_a=a.caption, caption_b=b.caption, question=question),
                max_tokens=8, stop=["\n"])
    sim = partial_similarity(rt.strip(), stated)
    if sim <= THRESHOLD:
        return f"round trip {rt!r} vs {stated!r} similarity {sim:.3f}"
    if not question.endswith("?"):
        question += "?"
    return DisCRnExample(question, [a, b], idx, explanation, answer_spaces(a.modality, b.modality))


def _imbalance(examples) -> int:
    return sum(1 if e.answer_index == 0 else -1 for e in examples)


def is_balanced(examples: Sequence[DisCRnExample]) -> bool:
    if abs(_imbalance(examples)) > 1:
        return False
    buckets = defaultdict(list)
    for e in examples:
        buckets[e.bucket].append(e)
    return all(abs(_imbalance(v)) <= 1 for v in buckets.values())


def balance_answers(examples: Sequence[DisCRnExample], seed: int = 0) -> list[DisCRnExample]:
    """Swap slot order (never content) until answers are balanced overall and per modality pair."""
    if not examples:
        raise ValueError("no examples to balance")
    examples = list(examples)
    if is_balanced(examples):
        return examples
    rng = random.Random(seed)
    buckets = defaultdict(list)
    for i, e in enumerate(examples):
        buckets[e.bucket].append(i)
    running = 0
    for key in sorted(buckets):
        idx = buckets[key]
        diff = _imbalance(examples[i] for i in idx)
        if len(idx) % 2 == 0:
            target = 0
        else:
            target = 1 if diff > 0 else -1
            if abs(running + target) > 1:
                target = -target
        running += target
        # each swap moves the difference by 2
        n_swaps = abs(diff - target) // 2
        majority = 0 if diff > target else 1
        pool = [i for i in idx if examples[i].answer_index == majority]
        for i in sorted(rng.sample(pool, n_swaps)):
            examples[i] = examples[i].swapped()
    return examples
