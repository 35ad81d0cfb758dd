"""Run the toy alignment benchmark and print the variant comparison table.

    python scripts/run_benchmark.py --variants full linear no_prefix
"""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

import torch

from modalign.benchmark import VARIANTS, BenchmarkConfig, report, run_benchmark
from modalign.encoders import MODALITIES


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--modalities", nargs="+", default=list(MODALITIES), choices=MODALITIES)
    ap.add_argument("--variants", nargs="+", default=["full"], choices=sorted(VARIANTS))
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/benchmark")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    bench = BenchmarkConfig(tuple(args.modalities), tuple(args.variants), args.iterations, args.seed,
                            out_dir=args.out)
    results = run_benchmark(bench)
    text = report(results)
    print(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    rows = [{k: v for k, v in asdict(r).items() if k != "generations"} for r in results.values()]
    (out / "results.json").write_text(json.dumps({"config": asdict(bench), "runs": rows}, indent=1) + "\n")


if __name__ == "__main__":
    main()
