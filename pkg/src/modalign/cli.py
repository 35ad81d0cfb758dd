"""Command-line entry point: train | eval | gen-qa | gen-discrn | inspect.

Every command reads a YAML config, honours ``--seed``, writes its artifacts
and a ``manifest.json`` under the output directory (``--out``, else the
``MODALIGN_OUT`` environment variable, else the config's own default), logs
details to ``run.log`` and prints a one-line summary.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch
import yaml

from . import __version__, checkpoint
from .encoders import write_jsonl
from .trainer import ConfigError, DatasetSpec, TrainConfig, load_dataset

log = logging.getLogger("modalign")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seed: int
    version: str
    out_dir: str
    started: str
    finished: str = ""
    artifacts: dict = field(default_factory=dict)

    def write(self) -> Path:
        p = Path(self.out_dir) / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return p


def build_id() -> str:
    return f"modalign {__version__}; torch {torch.__version__}"


@dataclass
class EvalConfig:
    kind: str = "attribute"  # attribute | robustness | discrn
    checkpoints: dict = field(default_factory=dict)  # modality -> checkpoint path
    modality: str = "image"
    dataset: dict | None = None  # DatasetSpec fields; default is the toy caption set
    split: str = "test"
    limit: int = 100
    prompt: str | None = None
    prompts: list = field(default_factory=list)
    task_type: str = "open"
    generation: dict = field(default_factory=dict)
    discrn_modalities: list = field(default_factory=list)
    captions_baseline: bool = False
    seed: int = 0
    out_dir: str = "runs/eval"


@dataclass
class GenQAConfig:
    captions: str = ""
    modality: str = "image"
    min_caption_words: int = 10
    threshold: float = 0.9
    seed: int = 0
    out_dir: str = "runs/gen_qa"


@dataclass
class GenDisCRnConfig:
    pool_a: str = ""
    pool_b: str = ""
    seed: int = 0
    out_dir: str = "runs/gen_discrn"


@dataclass
class InspectConfig:
    checkpoint: str = ""
    dataset: dict | None = None
    split: str = "test"
    limit: int = 100
    prompt: str | None = None
    seed: int = 0
    out_dir: str = "runs/inspect"


def load_flat(cls, path):
    d = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cls(**d)


def _sha(path: Path) -> str:
    return checkpoint.file_hash(path)


def _artifacts(out: Path, names) -> dict:
    return {n: _sha(out / n) for n in names if (out / n).exists()}


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def command_train(cfg: TrainConfig, out: Path) -> tuple[str, dict]:
    from .trainer import select_checkpoint, train
    res = train(cfg, out_dir=out)
    chosen = select_checkpoint(res.val_series) if res.val_series else res.final_step
    (out / "selected.json").write_text(json.dumps({"step": chosen}) + "\n", encoding="utf-8")
    names = ["metrics.jsonl", "val.jsonl", "selected.json"] + [p.name for _, p, _ in res.checkpoints]
    last_val = -res.val_series[-1][1] if res.val_series else float("nan")
    summary = (f"train {cfg.modality}/{cfg.projector}{'' if cfg.prefix_enabled else ' (no prefix)'}: "
               f"{res.final_step} steps, final val loss {last_val:.4f}, selected step {chosen}")
    return summary, _artifacts(out, names)


def _eval_records(cfg: EvalConfig, modality: str):
    spec = DatasetSpec(**cfg.dataset) if cfg.dataset else DatasetSpec(f"toy-{modality}-caption", modality,
                                                                      "caption", size=2000)
    return load_dataset(spec, cfg.split).records[:cfg.limit]


def command_eval(cfg: EvalConfig, out: Path) -> tuple[str, dict]:
    from .evalharness import (attribute_accuracy, prompt_robustness, run_discrn, toy_discrn_examples,
                              variant_report)
    from .generation import load_generation_params
    from .lm import load_toy_lm
    from .templates import load_templates
    from .trainer import load_aligner

    if cfg.kind not in ("attribute", "robustness", "discrn"):
        raise ConfigError(f"unknown eval kind {cfg.kind!r}")
    params = replace(load_generation_params(cfg.task_type), **cfg.generation)
    lm = load_toy_lm()
    aligners = {m: load_aligner(p, lm) for m, p in cfg.checkpoints.items()}
    scores = {}
    gens = []
    if cfg.kind == "discrn":
        mods = cfg.discrn_modalities or sorted(aligners)
        if len(mods) != 2:
            raise ConfigError("discrn needs two modalities (discrn_modalities)")
        pools = [_eval_records(cfg, m) for m in mods]
        exs = toy_discrn_examples(pools[0], pools[1], seed=cfg.seed)
        recs = {r.record_id: r for pool in pools for r in pool}
        acc, gens = run_discrn(exs, params, aligners=None if cfg.captions_baseline else aligners,
                               records=recs, lm=lm, tokenizer=lm.tokenizer, captions=cfg.captions_baseline)
        scores = {"accuracy": acc, "n": len(exs)}
        report = f"discrn {'/'.join(mods)}: accuracy {100 * acc:.1f} on {len(exs)} examples"
    else:
        if cfg.modality not in aligners:
            raise ConfigError(f"no checkpoint for modality {cfg.modality!r}")
        al = aligners[cfg.modality]
        recs = _eval_records(cfg, cfg.modality)
        if cfg.kind == "attribute":
            prompt = cfg.prompt or load_templates()[cfg.modality]["caption"][0]
            res = attribute_accuracy(al, recs, prompt, params)
            gens = res.generations
            scores = {"accuracy": res.accuracy, "n": len(recs)}
            report = variant_report({cfg.modality: {cfg.modality: res.accuracy}})
        else:
            results = {}

            def run(p):
                r = attribute_accuracy(al, recs, p, params)
                gens.extend(r.generations)
                results[p] = 100 * r.accuracy
                return results[p]

            rep = prompt_robustness(cfg.prompts, run)
            scores = {"per_prompt": results, "mean": rep.mean, "std": rep.std}
            report = rep.table()
    write_jsonl(out / "generations.jsonl", gens)
    (out / "scores.json").write_text(json.dumps(scores, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report + "\n", encoding="utf-8")
    summary = f"eval {cfg.kind}: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                               for k, v in scores.items() if not isinstance(v, dict))
    return summary, _artifacts(out, ["generations.jsonl", "scores.json", "report.txt"])


def _read_captions(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".jsonl"):
        return [json.loads(l)["caption"] for l in text.splitlines() if l.strip()]
    return [l.strip() for l in text.splitlines() if l.strip()]


def _write_skips(path, skipped):
    rows = [{"item": s.caption, "reason": s.reason} if hasattr(s, "reason") else {"item": s[0], "reason": s[1]}
            for s in skipped]
    write_jsonl(path, rows)


def command_gen_qa(cfg: GenQAConfig, out: Path, oracle) -> tuple[str, dict]:
    from .datagen import dataset_stats, generate_qa_pairs, generate_qa_pairs_3d
    if not cfg.captions:
        raise ConfigError("gen-qa needs 'captions'")
    caps = _read_captions(cfg.captions)
    skipped = []
    if cfg.modality == "pc3d":
        exs = generate_qa_pairs_3d(caps, oracle, cfg.min_caption_words, cfg.threshold, skipped)
    else:
        exs = generate_qa_pairs(caps, oracle, cfg.modality, cfg.min_caption_words, cfg.threshold, skipped)
    write_jsonl(out / "qa.jsonl", exs)
    _write_skips(out / "skipped.jsonl", skipped)
    oracle.save_transcript(out / "transcript.jsonl")
    stats = dataset_stats(exs)
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True) + "\n", encoding="utf-8")
    summary = f"gen-qa: {len(exs)} examples from {len(caps)} captions, {len(skipped)} skipped"
    return summary, _artifacts(out, ["qa.jsonl", "skipped.jsonl", "transcript.jsonl", "stats.json"])


def command_gen_discrn(cfg: GenDisCRnConfig, out: Path, oracle) -> tuple[str, dict]:
    from .datagen import Instance, build_discrn, dataset_stats
    from .encoders import read_jsonl
    if not cfg.pool_a or not cfg.pool_b:
        raise ConfigError("gen-discrn needs 'pool_a' and 'pool_b'")
    pa = [Instance(**d) for d in read_jsonl(cfg.pool_a)]
    pb = [Instance(**d) for d in read_jsonl(cfg.pool_b)]
    skipped = []
    exs = build_discrn(pa, pb, oracle, seed=cfg.seed, skipped=skipped)
    write_jsonl(out / "discrn.jsonl", exs)
    _write_skips(out / "skipped.jsonl", skipped)
    oracle.save_transcript(out / "transcript.jsonl")
    (out / "stats.json").write_text(json.dumps(dataset_stats(exs), sort_keys=True) + "\n", encoding="utf-8")
    summary = f"gen-discrn: {len(exs)} examples from {len(pa)} instances, {len(skipped)} skipped"
    return summary, _artifacts(out, ["discrn.jsonl", "skipped.jsonl", "transcript.jsonl", "stats.json"])


def command_inspect(cfg: InspectConfig, out: Path) -> tuple[str, dict]:
    """Dump flattened output query tokens (pre-projection) per example."""
    from .qformer import QFormerState, forward_frames
    from .templates import load_templates
    from .trainer import load_aligner
    if not cfg.checkpoint:
        raise ConfigError("inspect needs 'checkpoint'")
    al = load_aligner(cfg.checkpoint)
    spec = DatasetSpec(**cfg.dataset) if cfg.dataset else DatasetSpec(
        f"toy-{al.modality}-caption", al.modality, "caption", size=2000)
    recs = load_dataset(spec, cfg.split).records[:cfg.limit]
    prompt = cfg.prompt or load_templates()[al.modality]["caption"][0]
    rows = []
    for r in recs:
        z = al.encoder.encode(r).frames
        with torch.no_grad():
            if isinstance(al.projector, QFormerState):
                ids = al.tokenizer.tokenize(prompt)
                q = forward_frames(al.projector, z, torch.as_tensor([ids] * z.shape[0]))
            else:
                q = al.project_batch([z], [prompt])[0]
        rows.append({"example_id": r.record_id, "attributes": r.payload.get("attributes"),
                     "vector": [float(x) for x in q.reshape(-1)]})
    write_jsonl(out / "queries.jsonl", rows)
    return f"inspect: {len(rows)} vectors of width {len(rows[0]['vector']) if rows else 0}", \
        _artifacts(out, ["queries.jsonl"])


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

CONFIGS = {"train": TrainConfig, "eval": EvalConfig, "gen-qa": GenQAConfig,
           "gen-discrn": GenDisCRnConfig, "inspect": InspectConfig}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modalign")
    ap.add_argument("command", choices=sorted(CONFIGS))
    ap.add_argument("--config", help="YAML config for the command")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory (default: $MODALIGN_OUT or the config's out_dir)")
    ap.add_argument("--oracle-endpoint", help="HTTP endpoint of a text-generation oracle")
    ap.add_argument("--replay-transcript", help="replay a recorded oracle transcript")
    ap.add_argument("--checkpoint", help="inspect: checkpoint path (overrides config)")
    return ap


def _load(command: str, path, seed):
    cls = CONFIGS[command]
    if cls is TrainConfig:
        cfg = TrainConfig.from_yaml(path) if path else TrainConfig()
    else:
        cfg = load_flat(cls, path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = _load(args.command, args.config, args.seed)
        if args.checkpoint and isinstance(cfg, InspectConfig):
            cfg = replace(cfg, checkpoint=args.checkpoint)
    except (ConfigError, TypeError, ValueError, OSError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or os.environ.get("MODALIGN_OUT") or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    manifest = RunManifest(args.command, args.config, _config_dict(cfg), cfg.seed, build_id(), str(out),
                           time.strftime("%Y-%m-%dT%H:%M:%S"))
    if args.oracle_endpoint:
        manifest.config["oracle_endpoint"] = args.oracle_endpoint
    if args.replay_transcript:
        manifest.config["replay_transcript"] = args.replay_transcript
    try:
        if args.command in ("gen-qa", "gen-discrn"):
            from .datagen import make_oracle
            oracle = make_oracle(args.oracle_endpoint, args.replay_transcript, seed=cfg.seed)
            fn = command_gen_qa if args.command == "gen-qa" else command_gen_discrn
            summary, artifacts = fn(cfg, out, oracle)
        else:
            fn = {"train": command_train, "eval": command_eval, "inspect": command_inspect}[args.command]
            summary, artifacts = fn(cfg, out)
    except ConfigError as e:
        log.error("config error: %s", e)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # surfaced as a nonzero exit with details in the log
        log.exception("%s failed", args.command)
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        root.removeHandler(handler)
        handler.close()
    manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest.artifacts = artifacts
    manifest.write()
    print(summary)
    return EXIT_OK


def _config_dict(cfg) -> dict:
    return cfg.to_dict() if hasattr(cfg, "to_dict") else asdict(cfg)


if __name__ == "__main__":
    sys.exit(main())
