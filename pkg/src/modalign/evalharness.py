"""Evaluation protocols: answer matching, loss-ranking and open-generation
classification, CIDEr, prompt robustness, joint-modality delta, the two-input
discrimination task and the toy attribute benchmark."""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .datagen.discrn import DisCRnExample, Instance, answer_spaces
from .encoders import GRAMMARS, ModalityRecord, ToyEncoder
from .generation import GenerationParams, generate
from .lm import LLMInputSequence, assemble_llm_input, embed_text, rank_candidates
from .templates import CUES, DISCRN_PREFIX

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# string matching
# ----------------------------------------------------------------------------

def _phrase_re(phrase: str) -> re.Pattern:
    return re.compile(r"(?<![a-z0-9])" + re.escape(phrase.lower()) + r"(?![a-z0-9])")


def mentions(text: str, phrase: str) -> bool:
    return bool(_phrase_re(phrase).search(text.lower()))


def match_answer(generation: str, truth_index: int, spaces: Sequence[Sequence[str]]) -> bool:
    """True iff the generation names the truth slot and does not name the other one."""
    if len(spaces) != 2:
        raise ValueError("need exactly two answer spaces")
    hit = [any(mentions(generation, p) for p in space) for space in spaces]
    return hit[truth_index] and not hit[1 - truth_index]


def open_gen_classify(generation: str, labels: Sequence[str], truth: str) -> bool:
    """Correct iff exactly one label is mentioned and it is the truth."""
    if not labels:
        raise ValueError("empty label set")
    present = [l for l in dict.fromkeys(labels) if mentions(generation, l)]
    return len(present) == 1 and present[0] == truth


def closed_vocab_classify(lm, tokenizer, seq: LLMInputSequence, labels: Sequence[str]) -> str:
    if not labels:
        raise ValueError("empty label set")
    return labels[rank_candidates(lm, tokenizer, seq, labels)]


def top1(predictions: Sequence[str], truths: Sequence[str]) -> float:
    if not truths:
        return 0.0
    return sum(p == t for p, t in zip(predictions, truths)) / len(truths)


# ----------------------------------------------------------------------------
# CIDEr
# ----------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tokens(s: str) -> list[str]:
    return s.lower().split()


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]], n_max: int = 4) -> float:
    """Corpus CIDEr on the x100 scale.

    tf-idf weighted n-gram vectors (n = 1..n_max); document frequency counts
    items whose reference set contains the n-gram; idf = log(#items) - log(max(1, df)).
    Per item: mean over n of the cosine to each reference, averaged over
    references. No length penalty or clipping.
    """
    return float(np.mean(cider_items(candidates, references, n_max)))


def cider_items(candidates: Sequence[str], references: Sequence[Sequence[str]], n_max: int = 4) -> list[float]:
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if len(candidates) < 2:
        raise ValueError("CIDEr needs at least two items")
    if any(not refs for refs in references):
        raise ValueError("every item needs at least one reference")
    refs_ng = [[[_ngrams(_tokens(r), n) for n in range(1, n_max + 1)] for r in refs] for refs in references]
    df: Counter = Counter()
    for item in refs_ng:
        seen = set()
        for ref in item:
            for counts in ref:
                seen.update(counts)
        df.update(seen)
    log_n = math.log(float(len(candidates)))

    def vec(counts: Counter):
        v = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
        return v, math.sqrt(sum(x * x for x in v.values()))

    scores = []
    for cand, item in zip(candidates, refs_ng):
        if not cand.strip():
            log.warning("empty candidate scores 0")
            scores.append(0.0)
            continue
        cvecs = [vec(_ngrams(_tokens(cand), n)) for n in range(1, n_max + 1)]
        total = 0.0
        for ref in item:
            per_n = []
            for (cv, cn), counts in zip(cvecs, ref):
                rv, rn = vec(counts)
                dot = sum(x * rv.get(g, 0.0) for g, x in cv.items())
                per_n.append(dot / (cn * rn) if cn and rn else 0.0)
            total += sum(per_n) / n_max
        scores.append(100.0 * total / len(item))
    return scores


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    rows: list[tuple[str, float]]
    mean: float
    std: float

    def table(self) -> str:
        width = max([len(p) for p, _ in self.rows] + [6])
        lines = [f"{'Prompt':<{width}}  Score"]
        lines += [f"{p:<{width}}  {s:.2f}" for p, s in self.rows]
        lines.append(f"{'Avg':<{width}}  {self.mean:.2f}")
        lines.append(f"{'Std':<{width}}  {self.std:.2f}")
        return "\n".join(lines)


def prompt_robustness(prompts: Sequence[str], run: Callable[[str], float] | Mapping[str, float]) -> RobustnessReport:
    """Score a task under several prompts; std is the population std."""
    if len(prompts) < 2:
        raise ValueError("need at least two prompts")
    scores = [float(run[p] if isinstance(run, Mapping) else run(p)) for p in prompts]
    return RobustnessReport(list(zip(prompts, scores)), float(np.mean(scores)), float(np.std(scores)))


def joint_delta(score_a: float, score_v: float, score_av: float) -> float:
    return score_av - max(score_a, score_v)


# ----------------------------------------------------------------------------
# toy attribute benchmark
# ----------------------------------------------------------------------------

def caption_input(aligner, record: ModalityRecord, prompt: str, encoder: ToyEncoder | None = None) -> LLMInputSequence:
    enc = encoder or aligner.encoder
    frames = enc.encode(record).frames
    with torch.no_grad():
        projected = aligner.project_batch([frames], [prompt])[0]
    return assemble_llm_input(aligner.lm, aligner.tokenizer, aligner.cue(), projected, prompt, record.text_input)


@dataclass
class AttributeResult:
    accuracy: float
    generations: list[dict]


def attribute_accuracy(aligner, records: Sequence[ModalityRecord], prompt: str,
                       params: GenerationParams) -> AttributeResult:
    """Open-generation accuracy: every attribute value must be the only one of its kind mentioned."""
    grammar = GRAMMARS[aligner.modality]
    correct, gens = 0, []
    for r in records:
        text = generate(aligner.lm, aligner.tokenizer, caption_input(aligner, r, prompt), params)
        attrs = r.payload["attributes"]
        ok = all(open_gen_classify(text, grammar.values(a), attrs[a]) for a in grammar.names)
        correct += ok
        gens.append({"example_id": r.record_id, "prompt": prompt, "generation": text, "correct": ok})
    return AttributeResult(correct / max(len(records), 1), gens)


def variant_report(results: Mapping[str, Mapping[str, float]]) -> str:
    """Rows are variants, columns modalities; values are accuracies in percent."""
    mods = sorted({m for r in results.values() for m in r})
    width = max([len(v) for v in results] + [7])
    lines = [f"{'Variant':<{width}}  " + "  ".join(f"{m:>7}" for m in mods)]
    for v, row in results.items():
        cells = [f"{100 * row[m]:7.1f}" if m in row else f"{'-':>7}" for m in mods]
        lines.append(f"{v:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# two-input discrimination
# ----------------------------------------------------------------------------

DISCRN_QUESTION = "which input contains {value}?"


def toy_discrn_examples(pool_a: Sequence[ModalityRecord], pool_b: Sequence[ModalityRecord],
                        seed: int = 0) -> list[DisCRnExample]:
    """Examples whose answer follows from payload attributes: the queried value occurs in one slot only."""
    rng = np.random.default_rng(seed)
    out = []
    for i, ra in enumerate(pool_a):
        rb = pool_b[(i + int(rng.integers(1, len(pool_b) + 1))) % len(pool_b)]
        if rb.record_id == ra.record_id:
            continue
        va, vb = set(ra.payload["attributes"].values()), set(rb.payload["attributes"].values())
        side = int(rng.integers(2))
        pool = sorted((va - vb) if side == 0 else (vb - va))
        if not pool:
            side, pool = 1 - side, sorted((vb - va) if side == 0 else (va - vb))
        if not pool:
            continue
        value = pool[int(rng.integers(len(pool)))]
        slots = [Instance(GRAMMARS[r.modality].render(r.payload["attributes"]), r.modality, r.record_id)
                 for r in (ra, rb)]
        out.append(DisCRnExample(DISCRN_QUESTION.format(value=value), slots, side,
                                 f"only the {('first', 'second')[side]} input has {value}",
                                 answer_spaces(ra.modality, rb.modality)))
    return out


def discrn_input(lm, tokenizer, ex: DisCRnExample, slot_tokens: Sequence[torch.Tensor],
                 cues: Sequence[str | None]) -> LLMInputSequence:
    segs = [("instruction", embed_text(lm, tokenizer, DISCRN_PREFIX))]
    for cue, toks in zip(cues, slot_tokens):
        if cue is not None:
            segs.append(("prefix_cue", embed_text(lm, tokenizer, cue)))
        segs.append(("projected_queries", toks))
    segs.append(("text_input", embed_text(lm, tokenizer, ex.question)))
    return LLMInputSequence(segs)


def run_discrn(examples: Sequence[DisCRnExample], params: GenerationParams, *, aligners: Mapping | None = None,
               records: Mapping[str, ModalityRecord] | None = None, lm=None, tokenizer=None,
               captions: bool = False, frames: int = 2) -> tuple[float, list[dict]]:
    """Accuracy on two-input examples, scored with :func:`match_answer`.

    Model path: each slot's record (looked up by ``ref`` in ``records``) goes
    through its modality's aligner, using ``frames`` frames for sequential
    modalities. Caption baseline (``captions=True``): the slot captions are
    embedded in place of query tokens.
    """
    if aligners:
        first = next(iter(aligners.values()))
        lm, tokenizer = lm or first.lm, tokenizer or first.tokenizer
    if lm is None or tokenizer is None:
        raise ValueError("run_discrn needs an LM and tokenizer (or aligners)")
    encoders = {}
    out, correct = [], 0
    for i, ex in enumerate(examples):
        toks, cues = [], []
        for slot in ex.slots:
            if captions:
                toks.append(embed_text(lm, tokenizer, slot.caption))
                cues.append(CUES[slot.modality])
                continue
            if not aligners or slot.modality not in aligners:
                raise KeyError(f"no projector for modality {slot.modality!r}")
            al = aligners[slot.modality]
            if slot.modality not in encoders:
                cfg = replace(al.encoder.config, video_frames=frames, audio_frames=frames)
                encoders[slot.modality] = ToyEncoder(slot.modality, cfg)
            z = encoders[slot.modality].encode(records[slot.ref]).frames
            with torch.no_grad():
                toks.append(al.project_batch([z], [ex.question])[0])
            cues.append(al.cue())
        seq = discrn_input(lm, tokenizer, ex, toks, cues)
        text = generate(lm, tokenizer, seq, params)
        ok = match_answer(text, ex.answer_index, ex.answer_spaces)
        correct += ok
        out.append({"example_id": i, "prompt": ex.question, "generation": text, "correct": ok})
    return correct / max(len(examples), 1), out
