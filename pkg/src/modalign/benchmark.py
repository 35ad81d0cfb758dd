"""Toy alignment benchmark.

For each modality and variant: train one projector with the default
``TrainConfig`` against the frozen toy LM, then score open-generation
attribute accuracy on the held-out test split of the caption set.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .encoders import MODALITIES
from .evalharness import attribute_accuracy, variant_report
from .generation import load_generation_params
from .lm import load_toy_lm
from .templates import load_templates
from .trainer import TrainConfig, load_dataset, train

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "linear": {"projector": "linear"},
    "no_prefix": {"prefix_enabled": False},
}


@dataclass
class BenchmarkConfig:
    modalities: tuple = MODALITIES
    variants: tuple = ("full",)
    iterations: int | None = None  # None keeps the TrainConfig default
    seed: int = 0
    eval_limit: int = 100
    max_len: int = 20  # toy captions are short; caps decoding time
    out_dir: str = "runs/benchmark"


@dataclass
class RunResult:
    modality: str
    variant: str
    accuracy: float
    steps: int
    checkpoint_hash: str
    train_seconds: float
    eval_seconds: float
    generations: list = field(default_factory=list, repr=False)


def train_config(modality: str, variant: str, bench: BenchmarkConfig) -> TrainConfig:
    kw = dict(VARIANTS[variant], modality=modality, seed=bench.seed,
              out_dir=str(Path(bench.out_dir) / variant / modality))
    if bench.iterations is not None:
        kw["iterations"] = bench.iterations
    return TrainConfig(**kw)


def run_one(modality: str, variant: str, bench: BenchmarkConfig, lm=None) -> RunResult:
    cfg = train_config(modality, variant, bench)
    t0 = time.time()
    res = train(cfg, lm=lm if lm is not None else load_toy_lm())
    t1 = time.time()
    test = load_dataset(cfg.datasets[0], "test").records[:bench.eval_limit]
    params = replace(load_generation_params("open"), max_len=bench.max_len)
    prompt = load_templates()[modality]["caption"][0]
    scored = attribute_accuracy(res.aligner, test, prompt, params)
    t2 = time.time()
    log.info("%s/%s: accuracy %.3f (train %.0fs, eval %.0fs)", variant, modality, scored.accuracy,
             t1 - t0, t2 - t1)
    return RunResult(modality, variant, scored.accuracy, res.final_step, res.checkpoints[-1][2],
                     t1 - t0, t2 - t1, scored.generations)


def run_benchmark(bench: BenchmarkConfig, lm=None,
                  on_result: Callable[[RunResult], None] | None = None) -> dict[tuple[str, str], RunResult]:
    lm = lm if lm is not None else load_toy_lm()
    out = {}
    for variant in bench.variants:
        for m in bench.modalities:
            r = run_one(m, variant, bench, lm)
            out[(variant, m)] = r
            if on_result:
                on_result(r)
    return out


def report(results: dict[tuple[str, str], RunResult]) -> str:
    table: dict[str, dict[str, float]] = {}
    for (variant, m), r in results.items():
        table.setdefault(variant, {})[m] = r.accuracy
    return variant_report(table)
