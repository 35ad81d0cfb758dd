"""Pretrain the toy frozen LM and write it to src/modalign/data/toy_lm.ckpt.

Runs in single precision for speed; weights are stored as float64.
"""
import argparse
import logging
from pathlib import Path

import torch

from modalign import numkernel as nk
from modalign import toylm

OUT = Path(__file__).resolve().parents[1] / "src" / "modalign" / "data" / "toy_lm.ckpt"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=toylm.PretrainConfig.steps)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layers", type=int, default=toylm.PretrainConfig.layers)
    ap.add_argument("--out", default=str(OUT))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    nk.set_precision("single")
    cfg = toylm.PretrainConfig(steps=args.steps, seed=args.seed, layers=args.layers)
    lm = toylm.pretrain(cfg)
    print("synthetic exact match:", toylm.evaluate(lm, n=200))
    lm.params = {k: v.detach().to(torch.float64) for k, v in lm.params.items()}
    digest = lm.save(args.out, {"pretrain": dict(cfg.__dict__)})
    print(f"wrote {args.out} sha256={digest}")


if __name__ == "__main__":
    main()
