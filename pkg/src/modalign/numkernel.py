"""Dense tensor ops, finite-difference gradient checking, AdamW and the LR schedule.

Tensors are torch tensors (double precision by default). Every op here checks
operand shapes up front so that wiring mistakes surface with the op name and
both shapes instead of a deep broadcasting error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch

DEFAULT_DTYPE = torch.float64
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_precision(name: str) -> torch.dtype:
    """Select "double" (default) or "single" for freshly created tensors."""
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = {"double": torch.float64, "single": torch.float32}[name]
    return DEFAULT_DTYPE


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype or DEFAULT_DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def _shape(t: torch.Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def _mismatch(op: str, a: torch.Tensor, b: torch.Tensor, what: str = "") -> ShapeError:
    msg = f"{op}: shape mismatch {_shape(a)} vs {_shape(b)}"
    return ShapeError(msg + (f" ({what})" if what else ""))


# ----------------------------------------------------------------------------
# forward ops
# ----------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product; contracts the last axis of ``a`` with the
    second-to-last of ``b`` (or the only axis of a 1-D ``b``)."""
    if a.dim() < 1 or b.dim() < 1:
        raise _mismatch("matmul", a, b, "scalars not allowed")
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise _mismatch("matmul", a, b, "inner dimensions differ")
    return a @ b


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise _mismatch("linear", x, w, "expected x[..., in] and w[in, out]")
    if b is not None and _shape(b) != (w.shape[1],):
        raise _mismatch("linear", w, b, "bias must be [out]")
    y = x @ w
    return y + b if b is not None else y


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor | None = None, beta: torch.Tensor | None = None,
               eps: float = 1e-5) -> torch.Tensor:
    width = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and _shape(p) != (width,):
            raise _mismatch("layer_norm", x, p, f"{name} must match last axis")
    return torch.nn.functional.layer_norm(x, (width,), gamma, beta, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation, fixed across builds
    return torch.nn.functional.gelu(x, approximate="tanh")


def embedding(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if table.dim() != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {_shape(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {_shape(table)}")
    return table[ids]


def concat(parts: Sequence[torch.Tensor], dim: int = -2) -> torch.Tensor:
    parts = [p for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ref = parts[0]
    for p in parts[1:]:
        if p.dim() != ref.dim():
            raise _mismatch("concat", ref, p, "rank differs")
        a = list(ref.shape)
        b = list(p.shape)
        a.pop(dim)
        b.pop(dim)
        if a != b:
            raise _mismatch("concat", ref, p, f"non-concat axes differ (dim={dim})")
    return torch.cat(parts, dim=dim)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention over [..., n, dh] tensors.

    ``mask`` is boolean, broadcastable to [..., n_q, n_k]; True means "may attend".
    """
    if q.shape[-1] != k.shape[-1]:
        raise _mismatch("attention", q, k, "query/key width")
    if k.shape[-2] != v.shape[-2]:
        raise _mismatch("attention", k, v, "key/value length")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return softmax(scores) @ v


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def cross_entropy(logits: torch.Tensor, targets, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``weights`` (same shape as targets) selects which positions count; the
    result is the weighted mean over selected positions.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    if _shape(logits)[:-1] != _shape(targets):
        raise _mismatch("cross_entropy", logits, targets, "logits[..., V] vs targets[...]")
    logp = log_softmax(logits)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    if weights is None:
        return nll.mean()
    if _shape(weights) != _shape(targets):
        raise _mismatch("cross_entropy", targets, weights, "weights")
    weights = weights.to(nll.dtype)
    nll = torch.where(weights > 0, nll, torch.zeros_like(nll))
    return (nll * weights).sum() / weights.sum()


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------

def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    ``f`` closes over ``params`` and returns a scalar. Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
        p.requires_grad_(True)
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is {loss.item()} at the unperturbed point")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, analytic)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"non-finite loss perturbing param {pi} index {i}")
                numeric = (up - down) / (2 * eps)
                a = gflat[i].item()
                denom = max(abs(a), abs(numeric), 1e-12)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


# ----------------------------------------------------------------------------
# optimizer and schedule
# ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    lr: float = 1e-5
    eps: float = ADAM_EPS
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
               grads: Mapping[str, torch.Tensor | None], lr: float) -> OptimizerState:
    """One decoupled-weight-decay Adam update, applied in place to ``params``.

    Parameters whose gradient is None are left untouched. The step is checked
    for finiteness before anything is mutated.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if _shape(g) != _shape(p):
                raise _mismatch("adamw_step", p, g, name)
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.m[name] = m
            state.v[name] = v
            p.mul_(1.0 - lr * state.weight_decay)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps))
    state.lr = lr
    return state


def lr_at_step(step: int, warmup_steps: int, peak: float, floor_init: float, total_steps: int) -> float:
    """Linear warmup from ``floor_init`` to ``peak``, then cosine decay to 0."""
    if step <= 0:
        return floor_init if warmup_steps > 0 else peak
    if step < warmup_steps:
        return floor_init + (peak - floor_init) * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak if step <= warmup_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))
