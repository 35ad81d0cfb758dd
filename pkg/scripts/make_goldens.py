"""Regenerate the committed test goldens under tests/fixtures.

* golden_qa.jsonl / golden_discrn.jsonl: the stub-oracle CLI pipelines.
* cider_corpus.json: a small captioning corpus with CIDEr scores computed
  here by a dense matrix implementation that shares no code with the package.

Review the diff before committing regenerated files.
"""
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from modalign import cli

FIX = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

CIDER_CORPUS = [
    ("a small red cube on the table", ["a small red cube sits on a table", "a red cube on the table"]),
    ("a dog barks at the mailman", ["a dog is barking loudly", "the dog barks at a man at the door"]),
    ("rain on a roof", ["rain falls on a metal roof", "heavy rain on the roof of a house"]),
    ("a man plays a violin on stage", ["a man plays the violin", "a violinist performs on a stage"]),
    ("", ["a cat sleeps on the sofa"]),
]


def dense_cider(cands, refs, n_max=4):
    """CIDEr via explicit tf-idf matrices over the corpus n-gram vocabulary."""
    def grams(s, n):
        t = s.lower().split()
        return [" ".join(t[i:i + n]) for i in range(len(t) - n + 1)]

    N = len(cands)
    scores = np.zeros(N)
    for n in range(1, n_max + 1):
        vocab = sorted({g for c, rs in zip(cands, refs) for s in [c, *rs] for g in grams(s, n)})
        col = {g: j for j, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for rs in refs:
            present = np.zeros(len(vocab), dtype=bool)
            for r in rs:
                for g in grams(r, n):
                    present[col[g]] = True
            df += present
        idf = math.log(N) - np.log(np.maximum(df, 1.0))

        def vec(s):
            v = np.zeros(len(vocab))
            for g in grams(s, n):
                v[col[g]] += 1
            return v * idf

        for i, (c, rs) in enumerate(zip(cands, refs)):
            if not c.strip():
                continue
            cv = vec(c)
            for r in rs:
                rv = vec(r)
                denom = np.linalg.norm(cv) * np.linalg.norm(rv)
                scores[i] += (cv @ rv / denom if denom else 0.0) / (n_max * len(rs))
    return 100 * scores


def run_cli(command, config: dict, name: str):
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "c.yaml"
        cfg.write_text(yaml.safe_dump(config))
        out = Path(tmp) / "out"
        if cli.main([command, "--config", str(cfg), "--out", str(out)]) != 0:
            sys.exit(f"{command} failed")
        artifact = "qa.jsonl" if command == "gen-qa" else "discrn.jsonl"
        shutil.copy(out / artifact, FIX / name)


def main():
    run_cli("gen-qa", {"captions": str(FIX / "captions.txt"), "seed": 0}, "golden_qa.jsonl")
    run_cli("gen-discrn", {"pool_a": str(FIX / "pool.jsonl"), "pool_b": str(FIX / "pool.jsonl"), "seed": 0},
            "golden_discrn.jsonl")
    cands = [c for c, _ in CIDER_CORPUS]
    refs = [r for _, r in CIDER_CORPUS]
    per_item = dense_cider(cands, refs)
    doc = {"candidates": cands, "references": refs, "per_item": per_item.tolist(), "corpus": float(per_item.mean())}
    (FIX / "cider_corpus.json").write_text(json.dumps(doc, indent=1) + "\n")
    print("per-item CIDEr:", np.round(per_item, 4).tolist(), "corpus:", round(float(per_item.mean()), 4))


if __name__ == "__main__":
    main()
