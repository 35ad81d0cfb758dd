"""Per-modality alignment training against the frozen LM.

One config trains one projector (Q-Former or linear baseline) for one
modality. Each step samples a batch (dataset by square-root size weighting,
record uniformly, instruction template uniformly), encodes it with the frozen
encoder, runs the projector, assembles the LLM input and takes an AdamW step
on the projector's parameters only.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import checkpoint
from . import numkernel as nk
from .encoders import (MODALITIES, EncoderConfig, ModalityRecord, ToyEncoder, load_records,
                       make_toy_dataset, split_records)
from .lm import assemble_llm_input, load_toy_lm, target_ids, teacher_forced_loss, TransformerLM
from .qformer import (LinearBaselineConfig, QFormerConfig, QFormerState, init_linear_baseline,
                      init_qformer, linear_baseline_batch, forward_frames, project, LinearBaselineState)
from .templates import CUES, MissingTemplates, fill, load_templates, templates_for

log = logging.getLogger(__name__)

# full-scale schedule, kept for reference and the schedule tests
REFERENCE_SCHEDULE = dict(warmup_steps=1000, peak_lr=1e-5, floor_init=1e-8)


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str
    modality: str
    task: str = "caption"  # caption | qa | classification | dialogue
    path: str | None = None  # JSONL records; None means a generated toy dataset
    size: int | None = None  # |D|; defaults to the number of loaded records
    upsample_override: float | None = None
    toy_seed: int = 0

    def __post_init__(self):
        if self.size is not None and self.size < 1:
            raise ConfigError(f"dataset {self.name!r}: size must be >= 1, got {self.size}")
        if self.upsample_override is not None and self.upsample_override <= 0:
            raise ConfigError(f"dataset {self.name!r}: upsample_override must be positive")
        if self.path is None and self.size is None:
            raise ConfigError(f"dataset {self.name!r}: a toy dataset needs a size")


@dataclass
class TrainConfig:
    modality: str = "image"
    datasets: list[DatasetSpec] = field(default_factory=list)
    templates: str | None = None
    iterations: int = 1500
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    floor_init: float = 1e-8
    total_steps: int | None = None
    prefix_enabled: bool = True
    projector: str = "qformer"
    donor: str | None = None
    val_every: int = 250
    val_dataset: str | None = None
    val_size: int = 64
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: str | None = None
    precision: str = "double"
    out_dir: str = "runs/train"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.projector not in ("qformer", "linear"):
            raise ConfigError(f"projector must be qformer or linear, not {self.projector!r}")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if not self.datasets:
            self.datasets = default_datasets(self.modality)
        for d in self.datasets:
            if d.modality != self.modality:
                raise ConfigError(f"dataset {d.name!r} is {d.modality}, config trains {self.modality}")
        if self.warmup_steps > self.schedule_total:
            raise ConfigError("warmup_steps exceeds total_steps")

    @property
    def schedule_total(self) -> int:
        return self.total_steps if self.total_steps is not None else self.iterations

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "")

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(d)

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


_NESTED = {"qformer": QFormerConfig, "encoder": EncoderConfig}


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys{' in ' + where if where else ''}: {', '.join(unknown)}")
    kw = dict(d)
    if cls is TrainConfig:
        for key, sub in _NESTED.items():
            if key in kw and isinstance(kw[key], dict):
                kw[key] = _build(sub, kw[key], key)
        if "datasets" in kw:
            kw["datasets"] = [x if isinstance(x, DatasetSpec) else _build(DatasetSpec, x, f"datasets[{i}]")
                              for i, x in enumerate(kw["datasets"] or [])]
    return cls(**kw)


def default_datasets(modality: str) -> list[DatasetSpec]:
    return [DatasetSpec(f"toy-{modality}-caption", modality, "caption", size=2000),
            DatasetSpec(f"toy-{modality}-qa", modality, "qa", size=1000)]


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def sampling_probabilities(specs: Sequence[DatasetSpec], sizes: Sequence[int] | None = None) -> np.ndarray:
    """sqrt(|D|) weighting; an override replaces a dataset's weight by override * sum(sqrt(|D|))."""
    if not specs:
        raise ValueError("sampling_probabilities needs at least one dataset")
    sizes = list(sizes) if sizes is not None else [s.size for s in specs]
    for s, n in zip(specs, sizes):
        if n is None or n < 1:
            raise ValueError(f"dataset {s.name!r} has size {n}; sizes must be >= 1")
    roots = np.sqrt(np.asarray(sizes, dtype=np.float64))
    norm = roots.sum()
    w = np.array([s.upsample_override * norm if s.upsample_override is not None else r
                  for s, r in zip(specs, roots)])
    return w / w.sum()


@dataclass
class LoadedDataset:
    spec: DatasetSpec
    records: list[ModalityRecord]

    @property
    def size(self) -> int:
        return self.spec.size if self.spec.path is not None and self.spec.size else len(self.records)


def load_dataset(spec: DatasetSpec, split: str | None = "train") -> LoadedDataset:
    if spec.path is not None:
        try:
            recs = load_records(spec.path, spec.task)
        except OSError as e:
            raise OSError(f"cannot read dataset {spec.name!r} at {spec.path}: {e}") from e
    else:
        recs = make_toy_dataset(spec.modality, spec.size, spec.toy_seed, task=spec.task)
    if split is not None:
        recs = split_records(recs)[split]
    if not recs:
        raise ValueError(f"dataset {spec.name!r} has no {split} records")
    return LoadedDataset(spec, recs)


@dataclass
class BatchItem:
    record: ModalityRecord
    instruction: str
    dataset: str


def sample_batch(datasets: Sequence[LoadedDataset], templates: dict, rng: np.random.Generator,
                 batch_size: int = 1, probs: np.ndarray | None = None) -> list[BatchItem]:
    if probs is None:
        probs = sampling_probabilities([d.spec for d in datasets], [d.size for d in datasets])
    out = []
    for _ in range(batch_size):
        d = datasets[int(rng.choice(len(datasets), p=probs))]
        rec = d.records[int(rng.integers(len(d.records)))]
        try:
            ts = templates_for(templates, rec.modality, rec.task)
        except MissingTemplates:
            raise MissingTemplates(f"no instruction templates for task {rec.task!r} "
                                   f"(modality {rec.modality!r}, dataset {d.spec.name!r})") from None
        t = ts[int(rng.integers(len(ts)))]
        instr = fill(t, rec.instruction) if rec.task == "qa" else t
        out.append(BatchItem(rec, instr, d.spec.name))
    return out


# ----------------------------------------------------------------------------
# model wiring
# ----------------------------------------------------------------------------

class Aligner:
    """Frozen LM + frozen encoder + trainable projector for one modality."""

    def __init__(self, modality: str, projector, lm, encoder: ToyEncoder, prefix_enabled: bool = True):
        self.modality = modality
        self.projector = projector
        self.lm = lm
        self.tokenizer = lm.tokenizer
        self.encoder = encoder
        self.prefix_enabled = prefix_enabled

    @property
    def theta(self) -> dict[str, torch.Tensor]:
        return self.projector.params

    @property
    def is_linear(self) -> bool:
        return isinstance(self.projector, LinearBaselineState)

    def frozen_tensors(self) -> dict[str, torch.Tensor]:
        out = {"lm." + k: v for k, v in self.lm.parameters().items()}
        out.update({"encoder." + k: v for k, v in self.encoder.parameters().items()})
        return out

    def project_batch(self, frames: Sequence[torch.Tensor], instructions: Sequence[str]) -> list[torch.Tensor]:
        """Projected query tokens [N*K, d_llm] for each example."""
        if self.is_linear:
            z = torch.stack(list(frames))
            return list(linear_baseline_batch(self.projector, z))
        cfg = self.projector.config
        ids = [self.tokenizer.tokenize(s)[:cfg.max_instruction_len] for s in instructions]
        rows, masks, counts = [], [], []
        L = max((len(i) for i in ids), default=0)
        for z, i in zip(frames, ids):
            n = z.shape[0]
            counts.append(n)
            row = torch.full((L,), self.tokenizer.pad_id, dtype=torch.long)
            row[:len(i)] = torch.as_tensor(i, dtype=torch.long)
            m = torch.zeros(L, dtype=torch.bool)
            m[:len(i)] = True
            rows.append(row.expand(n, L))
            masks.append(m.expand(n, L))
        z = torch.cat(list(frames), dim=0)
        q = forward_frames(self.projector, z, torch.cat(rows), torch.cat(masks))
        out, at = [], 0
        for n in counts:
            out.append(project(self.projector, q[at:at + n].reshape(n * cfg.K, cfg.d)))
            at += n
        return out

    def cue(self) -> str | None:
        return CUES[self.modality] if self.prefix_enabled else None

    def prefixes(self, items: Sequence[BatchItem]) -> list[torch.Tensor]:
        frames = [self.encoder.encode(it.record).frames for it in items]
        projected = self.project_batch(frames, [it.instruction for it in items])
        return [assemble_llm_input(self.lm, self.tokenizer, self.cue(), p, it.instruction,
                                   it.record.text_input).embeddings()
                for p, it in zip(projected, items)]

    def loss(self, items: Sequence[BatchItem]) -> torch.Tensor:
        tg = [target_ids(self.tokenizer, it.record.target) for it in items]
        return teacher_forced_loss(self.lm, self.prefixes(items), tg)


def build_aligner(config: TrainConfig, lm=None) -> Aligner:
    nk.set_precision(config.precision)
    lm = lm if lm is not None else (TransformerLM.load(config.lm) if config.lm else load_toy_lm())
    dtype = nk.DEFAULT_DTYPE
    lm.params = {k: v.to(dtype) for k, v in lm.params.items()}
    encoder = ToyEncoder(config.modality, config.encoder)
    encoder.weight, encoder.bias = encoder.weight.to(dtype), encoder.bias.to(dtype)
    if config.projector == "linear":
        lc = LinearBaselineConfig(K=config.qformer.K, tokens_enc=config.encoder.tokens_enc,
                                  d_enc=config.encoder.d_enc, d_llm=lm.d_model)
        proj = init_linear_baseline(lc, seed=config.seed)
    else:
        qc = config.qformer
        if qc.d_llm != lm.d_model or qc.d_enc != config.encoder.d_enc or qc.vocab_size < len(lm.tokenizer):
            raise ConfigError(f"qformer config does not fit: d_llm={qc.d_llm} (LM {lm.d_model}), "
                              f"d_enc={qc.d_enc} (encoder {config.encoder.d_enc}), "
                              f"vocab_size={qc.vocab_size} (tokenizer {len(lm.tokenizer)})")
        donor = None
        if config.donor:
            arrays, meta = checkpoint.load(config.donor)
            donor = QFormerState(QFormerConfig(**meta["config"]),
                                 {k: torch.tensor(v) for k, v in arrays.items() if not k.startswith("opt.")})
        proj = init_qformer(qc, seed=config.seed, donor=donor)
    proj.params = {k: v.detach().to(dtype).requires_grad_(True) for k, v in proj.params.items()}
    return Aligner(config.modality, proj, lm, encoder, config.prefix_enabled)


# ----------------------------------------------------------------------------
# optimization
# ----------------------------------------------------------------------------

@dataclass
class TrainState:
    aligner: Aligner
    opt: nk.OptimizerState
    rng: np.random.Generator
    step: int = 0


def lr_for(config: TrainConfig, step: int) -> float:
    return nk.lr_at_step(step, config.warmup_steps, config.peak_lr, config.floor_init, config.schedule_total)


def training_step(state: TrainState, batch: Sequence[BatchItem], step: int, config: TrainConfig) -> float:
    a = state.aligner
    loss = a.loss(batch)
    if not torch.isfinite(loss):
        ids = [it.record.record_id for it in batch]
        log.error("non-finite loss at step %d; batch %s", step, ids)
        raise nk.NonFiniteError(f"non-finite loss at step {step}; batch record ids: {ids}")
    names = list(a.theta)
    grads = torch.autograd.grad(loss, [a.theta[n] for n in names], allow_unused=True)
    nk.adamw_step(state.opt, a.theta, dict(zip(names, grads)), lr_for(config, step))
    return float(loss.detach())


def validation_loss(aligner: Aligner, items: Sequence[BatchItem], batch_size: int = 32) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            losses = teacher_forced_loss(aligner.lm, aligner.prefixes(chunk),
                                         [target_ids(aligner.tokenizer, it.record.target) for it in chunk],
                                         reduce="per_example")
            total += float(losses.sum())
            count += len(chunk)
    return total / max(count, 1)


def validation_items(config: TrainConfig, templates: dict) -> list[BatchItem]:
    specs = [d for d in config.datasets if config.val_dataset in (None, d.name)]
    if not specs:
        raise ConfigError(f"val_dataset {config.val_dataset!r} is not among the datasets")
    rng = np.random.default_rng([config.seed, 7])
    items = []
    for spec in specs:
        ds = load_dataset(spec, "val")
        items += sample_batch([ds], templates, rng, batch_size=min(config.val_size, len(ds.records)))
    return items


def select_checkpoint(series: Sequence[tuple[int, float]] | Sequence[float]) -> int:
    """Step preceding the first validation drop (higher is better); the last one if none drops.

    ``series`` is a list of (step, metric) pairs or of bare metrics (steps are then indices).
    """
    if not series:
        raise ValueError("empty validation series")
    pairs = [p if isinstance(p, (tuple, list)) else (i, p) for i, p in enumerate(series)]
    for (s0, v0), (_, v1) in zip(pairs, pairs[1:]):
        if v1 < v0:
            return s0
    return pairs[-1][0]


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_train_checkpoint(path, state: TrainState, config: TrainConfig) -> str:
    a = state.aligner
    arrays = dict(a.theta)
    for n, t in state.opt.m.items():
        arrays["opt.m." + n] = t
    for n, t in state.opt.v.items():
        arrays["opt.v." + n] = t
    pcfg = a.projector.config
    meta = {
        "kind": "linear" if a.is_linear else "qformer",
        "config": asdict(pcfg),
        "modality": a.modality,
        "encoder": asdict(config.encoder),
        "prefix_enabled": a.prefix_enabled,
        "step": state.step,
        "opt": {"t": state.opt.t, "lr": state.opt.lr, "beta1": state.opt.beta1, "beta2": state.opt.beta2,
                "weight_decay": state.opt.weight_decay, "eps": state.opt.eps},
        "rng": state.rng.bit_generator.state,
        "train_config": checkpoint.config_hash(_hashable_config(config)),
    }
    return checkpoint.save(path, arrays, meta)


def _hashable_config(config: TrainConfig) -> dict:
    # run length and output location do not change what a given step computes
    d = config.to_dict()
    for k in ("iterations", "out_dir"):
        d.pop(k)
    return d


def restore_train_checkpoint(path, state: TrainState) -> None:
    arrays, meta = checkpoint.load(path)
    dtype = nk.DEFAULT_DTYPE
    a = state.aligner
    for n in a.theta:
        a.theta[n] = torch.tensor(arrays[n], dtype=dtype, requires_grad=True)
    a.projector.params = a.theta
    o = meta["opt"]
    state.opt = nk.OptimizerState(beta1=o["beta1"], beta2=o["beta2"], weight_decay=o["weight_decay"],
                                  lr=o["lr"], eps=o["eps"], t=o["t"])
    for k, v in arrays.items():
        if k.startswith("opt.m."):
            state.opt.m[k[6:]] = torch.tensor(v, dtype=dtype)
        elif k.startswith("opt.v."):
            state.opt.v[k[6:]] = torch.tensor(v, dtype=dtype)
    state.rng.bit_generator.state = meta["rng"]
    state.step = meta["step"]


def load_aligner(path, lm=None) -> Aligner:
    """Rebuild an aligner (frozen parts from defaults) from a training checkpoint."""
    arrays, meta = checkpoint.load(path)
    lm = lm if lm is not None else load_toy_lm()
    dtype = nk.DEFAULT_DTYPE
    params = {k: torch.tensor(v, dtype=dtype, requires_grad=True) for k, v in arrays.items()
              if not k.startswith("opt.")}
    if meta["kind"] == "linear":
        proj = LinearBaselineState(LinearBaselineConfig(**meta["config"]), params)
    else:
        proj = QFormerState(QFormerConfig(**meta["config"]), params)
    enc_cfg = EncoderConfig(**meta["encoder"]) if "encoder" in meta else EncoderConfig()
    return Aligner(meta["modality"], proj, lm, ToyEncoder(meta["modality"], enc_cfg), meta["prefix_enabled"])


# ----------------------------------------------------------------------------
# outer loop
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list[tuple[int, Path, str]]  # step, path, sha256
    val_series: list[tuple[int, float]]
    final_step: int
    aligner: Aligner


def ckpt_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.bin"


def train(config: TrainConfig, resume_from=None, stop_after: int | None = None, lm=None,
          out_dir=None) -> TrainResult:
    """Run (or resume) the training loop; returns checkpoint and validation records.

    ``stop_after`` ends the loop early at that step, leaving the run resumable.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aligner = build_aligner(config, lm)
    templates = load_templates(config.templates)
    datasets = [load_dataset(s, "train") for s in config.datasets]
    probs = sampling_probabilities([d.spec for d in datasets], [d.size for d in datasets])
    state = TrainState(aligner, nk.OptimizerState(beta1=config.beta1, beta2=config.beta2,
                                                  weight_decay=config.weight_decay),
                       np.random.default_rng(config.seed))
    metrics_path = out / "metrics.jsonl"
    val_path = out / "val.jsonl"
    if resume_from is not None:
        restore_train_checkpoint(resume_from, state)
        _truncate_log(metrics_path, state.step)
        _truncate_log(val_path, state.step)
    else:
        for p in (metrics_path, val_path):
            if p.exists():
                p.unlink()
    val_items = validation_items(config, templates)
    checkpoints = []
    last = config.iterations if stop_after is None else min(stop_after, config.iterations)
    t0 = time.time()
    with open(metrics_path, "a", encoding="utf-8") as mlog:
        while state.step < last:
            step = state.step + 1
            batch = sample_batch(datasets, templates, state.rng, config.batch_size, probs)
            loss = training_step(state, batch, step, config)
            state.step = step
            mlog.write(json.dumps({"step": step, "loss": loss, "lr": lr_for(config, step),
                                   "dataset": [b.dataset for b in batch], "seed": config.seed}) + "\n")
            if step % config.val_every == 0 or step == config.iterations:
                mlog.flush()
                vl = validation_loss(aligner, val_items)
                path = ckpt_path(out, step)
                try:
                    digest = save_train_checkpoint(path, state, config)
                except OSError as e:
                    raise OSError(f"cannot write checkpoint {path}: {e}") from e
                checkpoints.append((step, path, digest))
                with open(val_path, "a", encoding="utf-8") as vlog:
                    vlog.write(json.dumps({"step": step, "val_loss": vl}) + "\n")
                log.info("step %d loss %.4f val %.4f (%.0fs)", step, loss, vl, time.time() - t0)
    series = [(r["step"], -r["val_loss"]) for r in _read_log(val_path)]
    return TrainResult(out, checkpoints, series, state.step, aligner)


def _read_log(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(l) for l in p.read_text(encoding="utf-8").splitlines() if l.strip()]


def _truncate_log(path, step: int) -> None:
    p = Path(path)
    if not p.exists():
        return
    keep = [l for l in p.read_text(encoding="utf-8").splitlines() if l.strip() and json.loads(l)["step"] <= step]
    p.write_text("".join(l + "\n" for l in keep), encoding="utf-8")
