"""Instruction-aware Q-Former, its linear projection into the LLM, and the
linear-projection baseline.

Per frame, the sequence [query tokens | embedded instruction] runs through a
stack of post-LN blocks. Self-attention is shared by both streams and is
bidirectional. Blocks whose index is a multiple of ``cross_attention_every``
add a cross-attention sub-layer in which only the query positions attend to
the frame's encoder tokens. Query and instruction positions use separate
feed-forward weights. Only the K query positions are emitted. Frames are
processed independently with the same weights and concatenated in order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from . import numkernel as nk
from .encoders import EncodedFrames

INIT_STD = 0.02


@dataclass
class QFormerConfig:
    K: int = 8
    d: int = 32
    layers: int = 2
    heads: int = 2
    cross_attention_every: int = 2
    d_enc: int = 16
    d_llm: int = 64
    vocab_size: int = 512
    max_instruction_len: int = 64
    d_ff: int = 128

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.layers < 2:
            raise ValueError("layers must be >= 2")
        if self.cross_attention_every < 1:
            raise ValueError("cross_attention_every must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    def has_cross(self, block: int) -> bool:
        return block % self.cross_attention_every == 0


# full-scale reference widths; used for documentation and shape checks only
REFERENCE_CONFIG = dict(K=32, d=768, layers=12, heads=12, cross_attention_every=2, d_enc=1408,
                        d_llm=4096, vocab_size=30522, max_instruction_len=512, d_ff=3072)


@dataclass
class QFormerState:
    config: QFormerConfig
    params: dict[str, torch.Tensor]

    def trainable(self) -> dict[str, torch.Tensor]:
        return self.params


class DonorMismatch(ValueError):
    pass


def _attn_names(prefix: str) -> list[str]:
    return [prefix + n for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg: QFormerConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "query_tokens": (cfg.K, d),
        "instr_emb": (cfg.vocab_size, d),
        "instr_pos": (cfg.max_instruction_len, d),
        "emb_ln.g": (d,), "emb_ln.b": (d,),
    }
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        for n in ("wq", "wk", "wv", "wo"):
            shapes[pre + "self." + n] = (d, d)
            shapes[pre + "self.b" + n[1]] = (d,)
        shapes[pre + "self_ln.g"] = (d,)
        shapes[pre + "self_ln.b"] = (d,)
        if cfg.has_cross(i):
            shapes[pre + "cross.wq"] = (d, d)
            shapes[pre + "cross.bq"] = (d,)
            shapes[pre + "cross.wk"] = (cfg.d_enc, d)
            shapes[pre + "cross.bk"] = (d,)
            shapes[pre + "cross.wv"] = (cfg.d_enc, d)
            shapes[pre + "cross.bv"] = (d,)
            shapes[pre + "cross.wo"] = (d, d)
            shapes[pre + "cross.bo"] = (d,)
            shapes[pre + "cross_ln.g"] = (d,)
            shapes[pre + "cross_ln.b"] = (d,)
        # the last block's text stream never reaches the output, so it gets no feed-forward
        for stream in ("ffn_q", "ffn_t") if i < cfg.layers - 1 else ("ffn_q",):
            shapes[pre + stream + ".w1"] = (d, f)
            shapes[pre + stream + ".b1"] = (f,)
            shapes[pre + stream + ".w2"] = (f, d)
            shapes[pre + stream + ".b2"] = (d,)
            shapes[pre + stream + "_ln.g"] = (d,)
            shapes[pre + stream + "_ln.b"] = (d,)
    shapes["proj.w"] = (d, cfg.d_llm)
    shapes["proj.b"] = (cfg.d_llm,)
    return shapes


def init_qformer(config: QFormerConfig, seed: int = 0, donor: QFormerState | None = None) -> QFormerState:
    if donor is not None:
        for f in fields(QFormerConfig):
            a, b = getattr(config, f.name), getattr(donor.config, f.name)
            if a != b:
                raise DonorMismatch(f"donor config differs in {f.name}: {b} != {a}")
        params = {k: v.detach().clone().requires_grad_(True) for k, v in donor.params.items()}
        return QFormerState(config, params)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = torch.tensor(arr, dtype=nk.DEFAULT_DTYPE, requires_grad=True)
    return QFormerState(config, params)


def count_trainable_params(state_or_config) -> int:
    cfg = state_or_config.config if isinstance(state_or_config, QFormerState) else state_or_config
    if isinstance(state_or_config, QFormerState):
        return sum(int(t.numel()) for t in state_or_config.params.values())
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def param_breakdown(state_or_config) -> dict[str, int]:
    """Trainable scalars grouped into queries / embeddings / blocks / projection."""
    cfg = state_or_config.config if isinstance(state_or_config, QFormerState) else state_or_config
    out = {"queries": 0, "instruction_embeddings": 0, "blocks": 0, "projection": 0}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if name == "query_tokens":
            out["queries"] += n
        elif name.startswith(("instr_", "emb_ln")):
            out["instruction_embeddings"] += n
        elif name.startswith("proj."):
            out["projection"] += n
        else:
            out["blocks"] += n
    return out


def _mha(p, pre, xq, xkv, heads, mask=None):
    q = nk.split_heads(nk.linear(xq, p[pre + "wq"], p[pre + "bq"]), heads)
    k = nk.split_heads(nk.linear(xkv, p[pre + "wk"], p[pre + "bk"]), heads)
    v = nk.split_heads(nk.linear(xkv, p[pre + "wv"], p[pre + "bv"]), heads)
    return nk.linear(nk.merge_heads(nk.attention(q, k, v, mask)), p[pre + "wo"], p[pre + "bo"])


def _ffn(p, pre, x):
    h = nk.linear(nk.gelu(nk.linear(x, p[pre + ".w1"], p[pre + ".b1"])), p[pre + ".w2"], p[pre + ".b2"])
    return nk.layer_norm(x + h, p[pre + "_ln.g"], p[pre + "_ln.b"])


def forward_frames(state: QFormerState, z: torch.Tensor, instr_ids: torch.Tensor,
                   instr_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Core batched pass: z [F, T, d_enc], instr_ids [F, L] -> [F, K, d].

    ``instr_mask`` [F, L] marks real (True) vs padding (False) instruction slots.
    """
    cfg, p = state.config, state.params
    if z.dim() != 3 or z.shape[-1] != cfg.d_enc:
        raise nk.ShapeError(f"qformer_forward: encoder output {tuple(z.shape)} does not match d_enc={cfg.d_enc}")
    F, L = instr_ids.shape
    if z.shape[0] != F:
        raise nk.ShapeError(f"qformer_forward: {z.shape[0]} frames vs {F} instruction rows")
    if L > cfg.max_instruction_len:
        raise ValueError(f"instruction of {L} tokens exceeds max_instruction_len={cfg.max_instruction_len}")
    K = cfg.K
    queries = p["query_tokens"].unsqueeze(0).expand(F, K, cfg.d)
    if L:
        text = nk.embedding(p["instr_emb"], instr_ids) + p["instr_pos"][:L]
        x = nk.concat([queries, text], dim=1)
    else:
        x = queries
    x = nk.layer_norm(x, p["emb_ln.g"], p["emb_ln.b"])
    mask = None
    if L and instr_mask is not None:
        keys = torch.cat([torch.ones(F, K, dtype=torch.bool), instr_mask.bool()], dim=1)
        mask = keys[:, None, None, :]  # [F, 1(heads), 1(q), K+L]
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        x = nk.layer_norm(x + _mha(p, pre + "self.", x, x, cfg.heads, mask), p[pre + "self_ln.g"], p[pre + "self_ln.b"])
        q, t = x[:, :K], x[:, K:]
        if cfg.has_cross(i):
            q = nk.layer_norm(q + _mha(p, pre + "cross.", q, z, cfg.heads), p[pre + "cross_ln.g"], p[pre + "cross_ln.b"])
        q = _ffn(p, pre + "ffn_q", q)
        if L and i < cfg.layers - 1:
            t = _ffn(p, pre + "ffn_t", t)
            x = torch.cat([q, t], dim=1)
        else:
            x = q
    return x[:, :K]


def qformer_forward(state: QFormerState, z: EncodedFrames | torch.Tensor, instruction_tokens: Sequence[int]) -> torch.Tensor:
    """Output query tokens [N*K, d] for one example."""
    frames = z.frames if isinstance(z, EncodedFrames) else z
    if frames.shape[0] == 0:
        raise ValueError("qformer_forward: no frames")
    n = frames.shape[0]
    ids = torch.as_tensor(list(instruction_tokens), dtype=torch.long).reshape(1, -1).expand(n, -1)
    out = forward_frames(state, frames, ids)
    return out.reshape(n * state.config.K, state.config.d)


def project(state: QFormerState, q_prime: torch.Tensor) -> torch.Tensor:
    if q_prime.shape[-1] != state.config.d:
        raise nk.ShapeError(f"project: width {q_prime.shape[-1]} != d={state.config.d}")
    return nk.linear(q_prime, state.params["proj.w"], state.params["proj.b"])


def save_qformer(path, state: QFormerState, meta: dict | None = None) -> str:
    m = {"kind": "qformer", "config": asdict(state.config)}
    m.update(meta or {})
    return checkpoint.save(path, state.params, m)


def load_qformer(path) -> tuple[QFormerState, dict]:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "qformer":
        raise ValueError(f"{path} is not a qformer checkpoint")
    cfg = QFormerConfig(**meta["config"])
    params = {k: torch.tensor(v, dtype=nk.DEFAULT_DTYPE, requires_grad=True)
              for k, v in arrays.items() if not k.startswith("opt.")}
    return QFormerState(cfg, params), meta


# ----------------------------------------------------------------------------
# linear projection baseline
# ----------------------------------------------------------------------------

@dataclass
class LinearBaselineConfig:
    K: int = 8
    tokens_enc: int = 8
    d_enc: int = 16
    d_llm: int = 64


@dataclass
class LinearBaselineState:
    config: LinearBaselineConfig
    params: dict[str, torch.Tensor]

    def trainable(self) -> dict[str, torch.Tensor]:
        return self.params


def init_linear_baseline(config: LinearBaselineConfig, seed: int = 0) -> LinearBaselineState:
    rng = np.random.default_rng(seed)
    fan_in = config.tokens_enc * config.d_enc
    w = rng.normal(0.0, INIT_STD, size=(fan_in, config.K * config.d_llm))
    return LinearBaselineState(config, {
        "w": torch.tensor(w, dtype=nk.DEFAULT_DTYPE, requires_grad=True),
        "b": torch.zeros(config.K * config.d_llm, dtype=nk.DEFAULT_DTYPE, requires_grad=True),
    })


def linear_baseline_batch(state: LinearBaselineState, z: torch.Tensor) -> torch.Tensor:
    """z [B, N, T, d_enc] -> [B, K, d_llm]; frames are mean-pooled."""
    cfg = state.config
    if z.dim() != 4 or tuple(z.shape[2:]) != (cfg.tokens_enc, cfg.d_enc):
        raise nk.ShapeError(f"linear_baseline_forward: encoder output {tuple(z.shape)} does not match "
                            f"[*, *, {cfg.tokens_enc}, {cfg.d_enc}]")
    pooled = z.mean(dim=1).reshape(z.shape[0], -1)
    return nk.linear(pooled, state.params["w"], state.params["b"]).reshape(-1, cfg.K, cfg.d_llm)


def linear_baseline_forward(state: LinearBaselineState, z: EncodedFrames | torch.Tensor) -> torch.Tensor:
    frames = z.frames if isinstance(z, EncodedFrames) else z
    if frames.shape[0] == 0:
        raise ValueError("linear_baseline_forward: no frames")
    return linear_baseline_batch(state, frames.unsqueeze(0))[0]
