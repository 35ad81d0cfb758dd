"""Pretraining of the toy frozen LM fixture.

The fixture has to behave like a (very small) instruction-following LM that
can read meaning out of soft input vectors. It is trained on text-only
sequences shaped like the aligned inputs:

    [cue] | span | instruction | target

where ``span`` is a run of noisy word embeddings and filler vectors standing
in for projected query tokens. Attribute words sit at random span positions;
everything else is Gaussian noise, zeros or neutral words. Targets are the
grammar caption, the answer to an attribute question, or "first"/"second"
for two-span discrimination questions. Alignment then amounts to teaching a
projector to emit vectors this LM already knows how to read.
"""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import numkernel as nk
from .encoders import GRAMMARS, MODALITIES, EncoderConfig
from .lm import LMConfig, TransformerLM
from .templates import CUES, DISCRN_PREFIX, UNSEEN_CAPTION_PROMPTS, fill, load_templates
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

DISCRN_QUESTION = "which input contains {value}?"
DISCRN_ANSWERS = ("first", "second")
EXTRA_WORDS = ("first", "second", "left", "right", "input", "entity", "object", "which", "one",
               "contains", "is", "the", "a", "an", "of", "and", "1st", "2nd", "1", "2", "b")
# neutral words used as span filler
FILLER_WORDS = ("the", "a", "of", "and", "is", "this", "that", "with", "in", "on", "it")


def build_vocab() -> list[str]:
    words: list[str] = []
    seen = set()

    def add(text):
        for w in re.findall(r"[a-z0-9]+", text.lower()):
            if w not in seen:
                seen.add(w)
                words.append(w)

    for m in MODALITIES:
        g = GRAMMARS[m]
        add(g.caption.replace("{", " ").replace("}", " "))
        add(g.question.replace("{attribute}", " "))
        for name, vals in g.attributes:
            add(name)
            add(" ".join(vals))
    for text in list(CUES.values()) + [DISCRN_PREFIX, DISCRN_QUESTION.replace("{value}", " ")]:
        add(text)
    for p in UNSEEN_CAPTION_PROMPTS:
        add(p)
    for mod in load_templates().values():
        for ts in mod.values():
            for t in ts:
                add(t.replace("{question}", " "))
    add(" ".join(EXTRA_WORDS + FILLER_WORDS))
    return words


def build_tokenizer() -> Tokenizer:
    return Tokenizer(build_vocab())


@dataclass
class PretrainConfig:
    steps: int = 10000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 200
    weight_decay: float = 0.01
    seed: int = 0
    K: int = 8
    p_cue: float = 0.5
    p_unseen_prompt: float = 0.15
    p_text_span: float = 0.1
    layers: int = 3
    task_mix: tuple = (0.35, 0.3, 0.35)  # caption, qa, discrn


# per position: token id, soft flag, noise scale (x embedding rms), and whether the word is dropped
@dataclass
class Example:
    ids: list[int]
    soft: list[bool]
    noise: list[float]
    gauss: list[bool]
    target: list[int]


class CorpusSampler:
    def __init__(self, tokenizer: Tokenizer, config: PretrainConfig, rng: np.random.Generator,
                 enc: EncoderConfig | None = None):
        self.tok = tokenizer
        self.cfg = config
        self.rng = rng
        self.enc = enc or EncoderConfig()
        self.templates = load_templates()
        self.filler_ids = [tokenizer.index[w] for w in FILLER_WORDS]

    def _text(self, text):
        ids = self.tok.tokenize(text)
        return ids, [False] * len(ids), [0.0] * len(ids), [False] * len(ids)

    def _span(self, modality: str, attrs: dict, frames: int, cue: bool):
        r, K = self.rng, self.cfg.K
        n = K * frames
        if r.random() < 0.3:
            n = int(r.integers(max(4, len(attrs)), max(12, int(1.25 * n)) + 1))
        ids = [self.tok.pad_id] * n
        gauss = [True] * n
        noise = [0.0] * n
        for i in range(n):
            u = r.random()
            if u < 0.25:  # near-zero vector
                noise[i] = float(r.uniform(0.0, 0.3))
            elif u < 0.5:  # neutral word
                ids[i] = self.filler_ids[int(r.integers(len(self.filler_ids)))]
                gauss[i], noise[i] = False, float(r.uniform(0.0, 0.6))
            else:
                noise[i] = float(r.uniform(0.3, 1.3))
        free = list(r.permutation(n))
        words = list(attrs.values())
        if not cue and r.random() < 0.5:
            words.append(CUES[modality].rstrip(":"))
        for w in words:
            for _ in range(1 + int(r.random() < 0.3)):
                if not free:
                    break
                pos = int(free.pop())
                ids[pos] = self.tok.index[w]
                gauss[pos] = False
                noise[pos] = float(r.uniform(0.0, 0.6))
        return ids, [True] * n, noise, gauss

    def _slot(self, modality, attrs, frames, with_cue):
        parts = []
        if with_cue:
            parts.append(self._text(CUES[modality]))
        if self.rng.random() < self.cfg.p_text_span:
            parts.append(self._text(GRAMMARS[modality].render(attrs)))
        else:
            parts.append(self._span(modality, attrs, frames, with_cue))
        return parts

    def _attrs(self, modality):
        g = GRAMMARS[modality]
        return {name: vals[int(self.rng.integers(len(vals)))] for name, vals in g.attributes}

    def sample(self) -> Example:
        r = self.rng
        task = r.choice(3, p=np.array(self.cfg.task_mix) / sum(self.cfg.task_mix))
        parts = []
        if task < 2:
            m = MODALITIES[int(r.integers(len(MODALITIES)))]
            g = GRAMMARS[m]
            attrs = self._attrs(m)
            parts += self._slot(m, attrs, self.enc.frames_for(m), r.random() < self.cfg.p_cue)
            if task == 0:
                if r.random() < self.cfg.p_unseen_prompt:
                    instr = UNSEEN_CAPTION_PROMPTS[int(r.integers(len(UNSEEN_CAPTION_PROMPTS)))]
                else:
                    ts = self.templates[m]["caption"]
                    instr = ts[int(r.integers(len(ts)))]
                target = g.render(attrs)
            else:
                name = g.names[int(r.integers(len(g.names)))]
                ts = self.templates[m]["qa"]
                instr = fill(ts[int(r.integers(len(ts)))], g.question.format(attribute=name))
                target = attrs[name]
            parts.append(self._text(instr))
        else:
            ma = MODALITIES[int(r.integers(len(MODALITIES)))]
            mb = MODALITIES[int(r.integers(len(MODALITIES)))]
            while True:
                aa, ab = self._attrs(ma), self._attrs(mb)
                only_a = set(aa.values()) - set(ab.values())
                only_b = set(ab.values()) - set(aa.values())
                if only_a and only_b:
                    break
            answer = int(r.integers(2))
            pool = sorted(only_a if answer == 0 else only_b)
            value = pool[int(r.integers(len(pool)))]
            cue = r.random() < self.cfg.p_cue
            parts.append(self._text(DISCRN_PREFIX))
            parts += self._slot(ma, aa, min(2, self.enc.frames_for(ma)), cue)
            parts += self._slot(mb, ab, min(2, self.enc.frames_for(mb)), cue)
            parts.append(self._text(DISCRN_QUESTION.format(value=value)))
            target = DISCRN_ANSWERS[answer]
        ex = Example([], [], [], [], self.tok.tokenize(target) + [self.tok.eos_id])
        for ids, soft, noise, gauss in parts:
            ex.ids += ids
            ex.soft += soft
            ex.noise += noise
            ex.gauss += gauss
        return ex


def batch_tensors(examples: list[Example]):
    """Pack examples into padded id/noise/mask arrays for :func:`embed_batch`."""
    rows = []
    for ex in examples:
        rows.append((ex.ids + ex.target[:-1], ex.noise + [0.0] * (len(ex.target) - 1),
                     ex.gauss + [False] * (len(ex.target) - 1), len(ex.ids), ex.target))
    T = max(len(r[0]) for r in rows)
    B = len(rows)
    ids = np.zeros((B, T), dtype=np.int64)
    noise = np.zeros((B, T))
    gauss = np.zeros((B, T), dtype=bool)
    L = max(len(r[4]) for r in rows)
    pos = np.zeros((B, L), dtype=np.int64)
    tgt = np.zeros((B, L), dtype=np.int64)
    w = np.zeros((B, L))
    for b, (i, nz, g, plen, t) in enumerate(rows):
        ids[b, :len(i)] = i
        noise[b, :len(nz)] = nz
        gauss[b, :len(g)] = g
        pos[b, :len(t)] = np.arange(plen - 1, plen - 1 + len(t))
        tgt[b, :len(t)] = t
        w[b, :len(t)] = 1.0
    return ids, noise, gauss, pos, tgt, w


def embed_batch(lm: TransformerLM, ids, noise, gauss, gen: torch.Generator) -> torch.Tensor:
    table = lm.params["tok_emb"]
    ids = torch.as_tensor(ids)
    x = table[ids]
    x = torch.where(torch.as_tensor(gauss)[..., None], torch.zeros_like(x), x)
    rms = table.detach().pow(2).mean().sqrt()
    eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x + torch.as_tensor(noise, dtype=x.dtype)[..., None] * rms * eps


def batch_loss(lm, ids, noise, gauss, pos, tgt, w, gen):
    logits = lm.forward(embed_batch(lm, ids, noise, gauss, gen))
    pos = torch.as_tensor(pos)
    picked = logits.gather(1, pos.unsqueeze(-1).expand(-1, -1, logits.shape[-1]))
    return nk.cross_entropy(picked, torch.as_tensor(tgt), torch.as_tensor(w, dtype=logits.dtype))


def pretrain(config: PretrainConfig | None = None, lm_config: LMConfig | None = None,
             log_every: int = 200) -> TransformerLM:
    cfg = config or PretrainConfig()
    tok = build_tokenizer()
    lm = TransformerLM.init(lm_config or LMConfig(vocab_size=len(tok), layers=cfg.layers), seed=cfg.seed, tokenizer=tok)
    params = lm.params
    for t in params.values():
        t.requires_grad_(True)
    opt = nk.OptimizerState(weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = CorpusSampler(tok, cfg, rng)
    t0 = time.time()
    for step in range(1, cfg.steps + 1):
        batch = batch_tensors([sampler.sample() for _ in range(cfg.batch_size)])
        loss = batch_loss(lm, *batch, gen)
        grads = torch.autograd.grad(loss, list(params.values()))
        lr = nk.lr_at_step(step, cfg.warmup, cfg.lr, 0.0, cfg.steps)
        nk.adamw_step(opt, params, dict(zip(params, grads)), lr)
        if step % log_every == 0 or step == 1:
            log.info("pretrain step %d loss %.4f lr %.2e (%.0fs)", step, float(loss.detach()), lr, time.time() - t0)
    return lm.freeze()


def evaluate(lm: TransformerLM, n: int = 200, seed: int = 12345, config: PretrainConfig | None = None) -> dict:
    """Greedy exact-match rate per task on freshly sampled synthetic sequences."""
    cfg = config or PretrainConfig()
    tok = lm.tokenizer
    hits = {"caption": [0, 0], "qa": [0, 0], "discrn": [0, 0]}
    gen = torch.Generator().manual_seed(seed)
    for task, mix in (("caption", (1, 0, 0)), ("qa", (0, 1, 0)), ("discrn", (0, 0, 1))):
        sampler = CorpusSampler(tok, PretrainConfig(**{**cfg.__dict__, "task_mix": mix}),
                                np.random.default_rng(seed))
        for _ in range(n):
            ex = sampler.sample()
            ids, noise, gauss, *_ = batch_tensors([ex])
            with torch.no_grad():
                x = embed_batch(lm, ids[:, :len(ex.ids)], noise[:, :len(ex.ids)], gauss[:, :len(ex.ids)], gen)[0]
                out = []
                for _ in range(len(ex.target) + 2):
                    nxt = int(lm.forward(x)[-1].argmax())
                    if nxt == tok.eos_id:
                        break
                    out.append(nxt)
                    x = torch.cat([x, lm.embed([nxt])], dim=0)
            hits[task][0] += out == ex.target[:-1]
            hits[task][1] += 1
    return {k: a / b for k, (a, b) in hits.items()}
