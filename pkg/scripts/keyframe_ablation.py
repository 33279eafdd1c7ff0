"""Encoder trained on key frames vs. frames drawn uniformly from labelled segments.

    python3 scripts/keyframe_ablation.py --p-blur 0.3 0.5 --out results/keyframe.json
"""

import argparse
import json
from pathlib import Path

import numpy as np

from tempoparse.encoder import EncoderConfig
from tempoparse.pipeline import keyframe_ablation
from tempoparse.synthgen import GeneratorConfig, generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p-blur", type=float, nargs="+", default=[0.3])
    ap.add_argument("--videos", type=int, default=250)
    ap.add_argument("--corpus-seed", type=int, default=123)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--out", default="results/keyframe.json")
    args = ap.parse_args()

    rows = []
    for p_blur in args.p_blur:
        corpus = generate_corpus(GeneratorConfig(p_blur=p_blur), args.videos, args.corpus_seed)
        res = keyframe_ablation(corpus, EncoderConfig(steps=args.steps), range(args.seeds))
        summary = {
            s: {k: float(np.mean([r[k] for r in runs])) for k in runs[0]} for s, runs in res.items()
        }
        rows.append({"p_blur": p_blur, "runs": res, "mean": summary})
        print(f"p_blur={p_blur}: segment accuracy keyframe {summary['keyframe']['segment_acc']:.4f}"
              f"  random {summary['random_segment']['segment_acc']:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
