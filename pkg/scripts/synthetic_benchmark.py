"""Full pipeline on a synthetic corpus: key-frame encoder -> temporal net, 5-run protocol.

    python3 scripts/synthetic_benchmark.py --out results/benchmark.json
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from tempoparse.config import EvalConfig, PipelineConfig, load_config
from tempoparse.pipeline import run_protocol
from tempoparse.synthgen import generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON pipeline config (defaults otherwise)")
    ap.add_argument("--videos", type=int, default=250, help="corpus size; 80%% train")
    ap.add_argument("--corpus-seed", type=int, default=2024)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--epochs", type=int, help="temporal-net epochs override")
    ap.add_argument("--out", default="results/benchmark.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg.evaluation = EvalConfig(n_runs=args.runs)
    if args.epochs:
        cfg.temporal = replace(cfg.temporal, epochs=args.epochs)
    t0 = time.time()
    corpus = generate_corpus(cfg.generator, args.videos, args.corpus_seed)
    result, _ = run_protocol(corpus, cfg)
    out = {**result.to_dict(), "config": cfg.to_dict(), "config_hash": cfg.hash(),
           "videos": args.videos, "corpus_seed": args.corpus_seed, "seconds": round(time.time() - t0, 1)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    avg = result.average()
    print(f"average balanced accuracy {avg['mean']:.4f} +- {avg['std']:.4f}")
    for name, v in result.per_label().items():
        print(f"  {name:13s} {v['mean']:.4f} +- {v['std']:.4f}")


if __name__ == "__main__":
    main()
