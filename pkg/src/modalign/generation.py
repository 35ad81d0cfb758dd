"""Beam-search decoding over an embedded LLM input.

Logit processing per step, in order: repetition penalty on already generated
tokens (positive logits divided by the penalty, negative ones multiplied),
temperature, log-softmax, then EOS masking while shorter than ``min_len``.
Finished hypotheses are compared by ``sum_logprob / length ** length_penalty``
where length counts generated tokens including EOS. Search stops once
``beam_size`` hypotheses have finished or ``max_len`` tokens were generated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from . import numkernel as nk
from .templates import data_path


@dataclass
class GenerationParams:
    beam_size: int = 5
    repetition_penalty: float = 1.5
    temperature: float = 1.0
    length_penalty: float = 1.0
    min_len: int = 1
    max_len: int = 80

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.min_len > self.max_len:
            raise ValueError(f"min_len {self.min_len} > max_len {self.max_len}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def load_generation_params(task_type: str, path=None) -> GenerationParams:
    """Parameters for ``caption``, ``short_qa``, ``short_caption`` or ``open``."""
    table = json.loads(Path(path or data_path("generation.json")).read_text())
    if task_type not in table:
        raise KeyError(f"no generation parameters for task type {task_type!r}; have {sorted(table)}")
    return GenerationParams(**table[task_type])


def process_logits(logits: torch.Tensor, generated: list[int], params: GenerationParams,
                   eos_id: int) -> torch.Tensor:
    """Per-step logit processing; returns log-probabilities over the vocabulary."""
    logits = logits.clone()
    if params.repetition_penalty != 1.0 and generated:
        idx = torch.tensor(sorted(set(generated)), dtype=torch.long)
        vals = logits[idx]
        logits[idx] = torch.where(vals > 0, vals / params.repetition_penalty, vals * params.repetition_penalty)
    logits = logits / params.temperature
    logp = nk.log_softmax(logits)
    if len(generated) < params.min_len:
        logp[eos_id] = float("-inf")
    return logp


def _normalized(score: float, length: int, penalty: float) -> float:
    return score / (max(length, 1) ** penalty)


def beam_search(lm, prefix: torch.Tensor, params: GenerationParams, eos_id: int) -> list[int]:
    """Token ids of the best hypothesis (EOS stripped)."""
    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[float, int, list[int]]] = []
    order = 0
    with torch.no_grad():
        for step in range(params.max_len):
            rows = [torch.cat([prefix, lm.embed(toks)], dim=0) if toks else prefix for toks, _ in beams]
            logits = lm.forward(torch.stack(rows))[:, -1, :]
            cands = []
            for b, (toks, score) in enumerate(beams):
                logp = process_logits(logits[b], toks, params, eos_id)
                top = torch.topk(logp, min(2 * params.beam_size, logp.shape[0]))
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    if lp == float("-inf"):
                        continue
                    cands.append((score + lp, b, tok))
            # stable ordering: score desc, then beam index, then token id
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_beams = []
            for rank, (s, b, tok) in enumerate(cands):
                toks = beams[b][0]
                if tok == eos_id:
                    if rank < params.beam_size:
                        finished.append((_normalized(s, len(toks) + 1, params.length_penalty), order, toks))
                        order += 1
                    continue
                new_beams.append((toks + [tok], s))
                if len(new_beams) == params.beam_size:
                    break
            beams = new_beams
            if len(finished) >= params.beam_size or not beams:
                break
        if len(finished) < params.beam_size:
            for toks, s in beams:
                finished.append((_normalized(s, len(toks), params.length_penalty), order, toks))
                order += 1
    finished.sort(key=lambda f: (-f[0], f[1]))
    return finished[0][2] if finished else []


def generate(lm, tokenizer, seq, params: GenerationParams) -> str:
    """Decode a string from an :class:`~modalign.lm.LLMInputSequence`."""
    ids = beam_search(lm, seq.embeddings(), params, tokenizer.eos_id)
    return tokenizer.detokenize(ids)
