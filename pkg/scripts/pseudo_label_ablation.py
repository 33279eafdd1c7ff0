"""Labelled-only encoder vs. the same encoder retrained with pseudo-labelled videos.

    python3 scripts/pseudo_label_ablation.py --labeled-fraction 0.1 --out results/pseudo.json
    python3 scripts/pseudo_label_ablation.py --hard --rounds 2
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tempoparse.encoder import EncoderConfig
from tempoparse.pipeline import pseudo_label_ablation
from tempoparse.synthgen import GeneratorConfig, generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--labeled-fraction", type=float, default=0.1)
    ap.add_argument("--videos", type=int, default=250)
    ap.add_argument("--corpus-seed", type=int, default=123)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--sigma", type=float, default=5.0)
    ap.add_argument("--M", type=int, default=10)
    ap.add_argument("--hard", action="store_true", help="one-hot pseudo-targets")
    ap.add_argument("--rounds", type=int, default=1)
    ap.add_argument("--scene-sigma", type=float, help="generator scene offset override")
    ap.add_argument("--out", default="results/pseudo.json")
    args = ap.parse_args()

    gen = GeneratorConfig() if args.scene_sigma is None else GeneratorConfig(scene_sigma=args.scene_sigma)
    corpus = generate_corpus(gen, args.videos, args.corpus_seed)
    res = pseudo_label_ablation(
        corpus, EncoderConfig(), range(args.seeds), args.labeled_fraction,
        sigma=args.sigma, M=args.M, hard=args.hard, rounds=args.rounds,
    )
    for key in ("tool_bacc", "outside_bacc", "tool_acc", "inout_acc"):
        b = np.mean([r[key] for r in res["baseline"]])
        p = np.mean([r[key] for r in res["pseudo"]])
        print(f"{key:13s} baseline {b:.4f}  pseudo {p:.4f}  ({100 * (p - b):+.2f} points)")
    rates = [r["acceptance_rate"] for r in res["reports"]]
    print(f"filter acceptance rate {np.mean(rates):.3f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"args": vars(args), **res}, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
