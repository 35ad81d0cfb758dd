"""Frozen causal language model, LLM input assembly, loss and loss ranking.

The LM consumes embedding sequences rather than ids so that projected query
tokens can be spliced in next to embedded text. Input order is fixed:

    cue | projected queries | instruction | text input

and the cue is dropped for the no-prefix variant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from . import numkernel as nk
from .tokenizer import Tokenizer

SEGMENT_ORDER = ("prefix_cue", "projected_queries", "instruction", "text_input")


class ContextOverflow(ValueError):
    pass


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int = 256
    max_len: int = 128


class TransformerLM:
    """Pre-LN decoder-only transformer with tied input/output embeddings."""

    def __init__(self, config: LMConfig, params: dict[str, torch.Tensor], tokenizer: Tokenizer | None = None):
        self.config = config
        self.params = params
        self.tokenizer = tokenizer

    @classmethod
    def init(cls, config: LMConfig, seed: int = 0, tokenizer: Tokenizer | None = None) -> "TransformerLM":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff

        def normal(*shape, std=0.02):
            return torch.tensor(rng.normal(0.0, std, size=shape), dtype=nk.DEFAULT_DTYPE)

        p = {"tok_emb": normal(config.vocab_size, d, std=0.1), "pos_emb": normal(config.max_len, d)}
        for i in range(config.layers):
            pre = f"layers.{i}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = torch.ones(d, dtype=nk.DEFAULT_DTYPE)
                p[pre + ln + ".b"] = torch.zeros(d, dtype=nk.DEFAULT_DTYPE)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = normal(d, d)
                p[pre + "b" + w[1]] = torch.zeros(d, dtype=nk.DEFAULT_DTYPE)
            p[pre + "w1"] = normal(d, f)
            p[pre + "b1"] = torch.zeros(f, dtype=nk.DEFAULT_DTYPE)
            p[pre + "w2"] = normal(f, d)
            p[pre + "b2"] = torch.zeros(d, dtype=nk.DEFAULT_DTYPE)
        p["ln_f.g"] = torch.ones(d, dtype=nk.DEFAULT_DTYPE)
        p["ln_f.b"] = torch.zeros(d, dtype=nk.DEFAULT_DTYPE)
        return cls(config, p, tokenizer)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def parameters(self) -> dict[str, torch.Tensor]:
        return self.params

    def freeze(self) -> "TransformerLM":
        for t in self.params.values():
            t.requires_grad_(False)
        return self

    def embed(self, ids) -> torch.Tensor:
        return nk.embedding(self.params["tok_emb"], ids)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for an embedded sequence [..., T, d] -> [..., T, V]."""
        p = self.params
        cfg = self.config
        T = x.shape[-2]
        if T > cfg.max_len:
            raise ContextOverflow(f"sequence length {T} exceeds context window {cfg.max_len}")
        if x.shape[-1] != cfg.d_model:
            raise nk.ShapeError(f"lm.forward: width {x.shape[-1]} != d_model {cfg.d_model}")
        h = x + p["pos_emb"][:T]
        mask = nk.causal_mask(T)
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            a = nk.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = nk.split_heads(nk.linear(a, p[pre + "wq"], p[pre + "bq"]), cfg.heads)
            k = nk.split_heads(nk.linear(a, p[pre + "wk"], p[pre + "bk"]), cfg.heads)
            v = nk.split_heads(nk.linear(a, p[pre + "wv"], p[pre + "bv"]), cfg.heads)
            att = nk.merge_heads(nk.attention(q, k, v, mask))
            h = h + nk.linear(att, p[pre + "wo"], p[pre + "bo"])
            m = nk.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = h + nk.linear(nk.gelu(nk.linear(m, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])
        h = nk.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
        return nk.matmul(h, p["tok_emb"].transpose(0, 1))

    __call__ = forward

    def save(self, path, extra_meta: dict | None = None) -> str:
        meta = {"kind": "toy_lm", "config": asdict(self.config),
                "vocab": self.tokenizer.vocab if self.tokenizer else None}
        meta.update(extra_meta or {})
        return checkpoint.save(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "TransformerLM":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "toy_lm":
            raise ValueError(f"{path} is not a toy LM checkpoint")
        config = LMConfig(**meta["config"])
        params = {k: torch.tensor(v, dtype=nk.DEFAULT_DTYPE) for k, v in arrays.items()}
        tok = None
        if meta.get("vocab"):
            from .tokenizer import SPECIALS, PUNCT
            words = [w for w in meta["vocab"][len(SPECIALS):]
                     if w not in PUNCT and not w.startswith(("▁", "#"))]
            tok = Tokenizer(words)
            if tok.vocab != meta["vocab"]:
                raise ValueError(f"{path}: stored vocabulary does not rebuild identically")
        return cls(config, params, tok).freeze()


class BigramLM:
    """Rigged LM for tests: one-hot embeddings, next-token logits from a table.

    The prediction at each position depends only on the argmax coordinate of
    that position's input vector, so continuation probabilities are known in
    closed form.
    """

    def __init__(self, table: torch.Tensor, tokenizer: Tokenizer, max_len: int = 512):
        self.table = table
        self.tokenizer = tokenizer
        self.max_len = max_len

    @property
    def d_model(self) -> int:
        return self.table.shape[0]

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"table": self.table}

    def embed(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        return torch.nn.functional.one_hot(ids, self.d_model).to(self.table.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] > self.max_len:
            raise ContextOverflow(f"sequence length {x.shape[-2]} exceeds context window {self.max_len}")
        return self.table[x.argmax(dim=-1)]

    __call__ = forward


def load_toy_lm(path=None) -> TransformerLM:
    from .templates import data_path
    return TransformerLM.load(path or data_path("toy_lm.ckpt"))


# ----------------------------------------------------------------------------
# input assembly
# ----------------------------------------------------------------------------

@dataclass
class LLMInputSequence:
    segments: list[tuple[str, torch.Tensor]] = field(default_factory=list)

    @property
    def kinds(self) -> list[str]:
        return [k for k, _ in self.segments]

    @property
    def lengths(self) -> list[int]:
        return [t.shape[0] for _, t in self.segments]

    @property
    def total_length(self) -> int:
        return sum(self.lengths)

    @property
    def segment_boundaries(self) -> list[int]:
        out, acc = [], 0
        for n in self.lengths:
            acc += n
            out.append(acc)
        return out

    def embeddings(self) -> torch.Tensor:
        return nk.concat([t for _, t in self.segments], dim=0)

    def segment(self, kind: str) -> torch.Tensor:
        return dict(self.segments)[kind]


def embed_text(lm, tokenizer: Tokenizer, text: str) -> torch.Tensor:
    ids = tokenizer.tokenize(text) if text else []
    if not ids:
        return torch.zeros(0, lm.d_model, dtype=_lm_dtype(lm))
    return lm.embed(ids)


def _lm_dtype(lm) -> torch.dtype:
    return next(iter(lm.parameters().values())).dtype


def assemble_llm_input(lm, tokenizer: Tokenizer, cue: str | None, projected_queries: torch.Tensor,
                       instruction: str, text_input: str = "") -> LLMInputSequence:
    if projected_queries.dim() != 2 or projected_queries.shape[-1] != lm.d_model:
        raise nk.ShapeError(f"assemble_llm_input: projected queries {tuple(projected_queries.shape)} "
                            f"do not match LLM width {lm.d_model}")
    segs = []
    if cue is not None:
        segs.append(("prefix_cue", embed_text(lm, tokenizer, cue)))
    segs.append(("projected_queries", projected_queries))
    segs.append(("instruction", embed_text(lm, tokenizer, instruction)))
    segs.append(("text_input", embed_text(lm, tokenizer, text_input)))
    return LLMInputSequence(segs)


# ----------------------------------------------------------------------------
# loss and ranking
# ----------------------------------------------------------------------------

def target_ids(tokenizer: Tokenizer, target: str) -> list[int]:
    return tokenizer.tokenize(target) + [tokenizer.eos_id]


def teacher_forced_loss(lm, prefixes: Sequence[torch.Tensor], targets: Sequence[Sequence[int]],
                        reduce: str = "mean") -> torch.Tensor:
    """Cross-entropy over target positions only, for a batch of prefixes.

    ``reduce="mean"`` averages over all target tokens in the batch;
    ``"per_example"`` returns one mean per sequence.
    """
    if len(prefixes) != len(targets):
        raise ValueError("prefixes and targets differ in length")
    rows, spans = [], []
    for prefix, tgt in zip(prefixes, targets):
        if len(tgt) == 0:
            raise ValueError("empty target")
        if prefix.shape[0] == 0:
            raise ValueError("empty prefix: nothing to condition the first target token on")
        n = prefix.shape[0] + len(tgt) - 1
        if n > lm.max_len:
            raise ContextOverflow(f"prefix {prefix.shape[0]} + target {len(tgt)} tokens exceed "
                                  f"context window {lm.max_len}")
        body = lm.embed(list(tgt[:-1])) if len(tgt) > 1 else prefix[:0]
        rows.append(torch.cat([prefix, body], dim=0))
        spans.append((prefix.shape[0] - 1, len(tgt)))
    T = max(r.shape[0] for r in rows)
    d = rows[0].shape[-1]
    batch = torch.stack([torch.cat([r, r.new_zeros(T - r.shape[0], d)], dim=0) for r in rows])
    logits = lm.forward(batch)
    L = max(n for _, n in spans)
    gather_pos = torch.zeros(len(rows), L, dtype=torch.long)
    tgt_ids = torch.zeros(len(rows), L, dtype=torch.long)
    weights = torch.zeros(len(rows), L, dtype=logits.dtype)
    for b, ((start, n), tgt) in enumerate(zip(spans, targets)):
        gather_pos[b, :n] = torch.arange(start, start + n)
        tgt_ids[b, :n] = torch.as_tensor(list(tgt))
        weights[b, :n] = 1.0
    picked = logits.gather(1, gather_pos.unsqueeze(-1).expand(-1, -1, logits.shape[-1]))
    if reduce == "mean":
        return nk.cross_entropy(picked, tgt_ids, weights)
    if reduce == "per_example":
        return torch.stack([nk.cross_entropy(picked[b], tgt_ids[b], weights[b]) for b in range(len(rows))])
    raise ValueError(f"unknown reduce {reduce!r}")


def lm_loss(lm, tokenizer: Tokenizer, seq: LLMInputSequence, target: str) -> torch.Tensor:
    if not target:
        raise ValueError("lm_loss needs a nonempty target")
    return teacher_forced_loss(lm, [seq.embeddings()], [target_ids(tokenizer, target)])


def candidate_losses(lm, tokenizer: Tokenizer, seq: LLMInputSequence, candidates: Sequence[str]) -> list[float]:
    # one forward per candidate: identical candidates must give identical losses
    prefix = seq.embeddings()
    with torch.no_grad():
        return [float(teacher_forced_loss(lm, [prefix], [target_ids(tokenizer, c)])) for c in candidates]


def rank_candidates(lm, tokenizer: Tokenizer, seq: LLMInputSequence, candidates: Sequence[str]) -> int:
    """Index of the lowest-loss candidate; ties go to the lowest index."""
    if not candidates:
        raise ValueError("no candidates")
    losses = candidate_losses(lm, tokenizer, seq, candidates)
    best = 0
    for i, loss in enumerate(losses):
        if loss < losses[best]:
            best = i
    return best
