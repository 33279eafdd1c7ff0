"""Command-line entry point.

    tempoparse simulate        synthetic corpus (or unlabelled pool) on disk
    tempoparse train-encoder   key-frame encoder checkpoint
    tempoparse pseudo-label    pseudo-labelled corpus plus filter report
    tempoparse train-temporal  multi-stage temporal network checkpoint
    tempoparse evaluate        per-label balanced accuracy JSON
    tempoparse parse           per-video report JSON and timeline CSV

Every verb takes ``--config`` (a JSON file); flags override the file and
``TEMPOPARSE_SEED`` overrides the seed.  The hash of the effective config is
written into every artifact.  Exit codes: 0 ok, 2 config error, 3 missing
artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from filelock import SoftFileLock, Timeout

from .config import PipelineConfig, load_config
from .encoder import load_encoder, save_encoder, train_encoder
from .errors import ConfigInvalid, MissingArtifact, TempoparseError
from .evaluation import evaluate
from .parsing import build_report, export_timeline, parse_stream, read_timeline
from .pipeline import ModelStack, run_protocol, temporal_samples
from .pseudolabel import as_unlabeled, build_pseudo_dataset, make_gaussian_kernel
from .schema import Corpus, default_schema
from .storage import read_corpus, write_corpus, write_json
from .synthgen import generate_corpus
from .tempnet import load_temporal, save_temporal, train_temporal

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("tempoparse")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def locked(target: Path):
    """Refuse to run two verbs on the same output at once."""
    lock = SoftFileLock(str(target) + ".lock")
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CliError(f"{target} is locked by another run (remove {lock.lock_file} if stale)", EXIT_RUNTIME)
    try:
        yield
    finally:
        lock.release()


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing {what}: {p}")
    return p


def _write_log(path: Path, cfg_hash: str, verb: str, entries) -> None:
    lines = [json.dumps({"config_hash": cfg_hash, "verb": verb}, sort_keys=True)]
    lines += [json.dumps(e, sort_keys=True) for e in entries]
    path.write_text("\n".join(lines) + "\n")


def _train_split(corpus: Corpus) -> Corpus:
    train = corpus.subset("train")
    return train if train.records else corpus


def _parse_weights(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    out = {}
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(f"label weight {item!r} is not name=value")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigInvalid(f"label weight {item!r} is not numeric") from None
    return out


def effective_config(args) -> PipelineConfig:
    """Config file, then environment seed, then command-line flags."""
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    enc = {k: getattr(args, a) for k, a in (("strategy", "strategy"), ("steps", "steps"), ("lr", "encoder_lr"),
                                             ("batch_size", "batch_size"), ("quota", "quota"))
           if getattr(args, a, None) is not None}
    if enc:
        cfg.encoder = replace(cfg.encoder, **enc)
    kern = {k: getattr(args, a) for k, a in (("sigma", "kernel_sigma"), ("M", "kernel_M"))
            if getattr(args, a, None) is not None}
    if getattr(args, "hard", False):
        kern["hard"] = True
    if kern:
        cfg.kernel = replace(cfg.kernel, **kern)
    temp = {k: getattr(args, a) for k, a in (("stages", "stages"), ("layers", "layers"), ("filters", "filters"),
                                              ("lambda_smooth", "lambda_smooth"), ("lr", "temporal_lr"),
                                              ("epochs", "epochs"))
            if getattr(args, a, None) is not None}
    weights = _parse_weights(getattr(args, "label_weights", None))
    if weights is not None:
        temp["label_weights"] = weights
    if temp:
        cfg.temporal = replace(cfg.temporal, **temp)
    if getattr(args, "runs", None) is not None:
        cfg.evaluation = replace(cfg.evaluation, n_runs=args.runs, seeds=None)
    if getattr(args, "min_duration", None) is not None:
        cfg.evaluation = replace(cfg.evaluation, min_duration=args.min_duration)
    cfg.validate()
    return cfg


def cmd_simulate(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory {out} is not empty", EXIT_RUNTIME)
    with locked(out):
        corpus = generate_corpus(cfg.generator, args.n, cfg.seed)
        if args.unlabeled:
            records = as_unlabeled(corpus.records)
            corpus = Corpus(corpus.schema, records, {r.id: "train" for r in records})
        write_corpus(replace(corpus, config_hash=cfg.hash()), out)
    print(f"wrote {len(corpus.records)} videos to {out}")


def cmd_train_encoder(args, cfg: PipelineConfig) -> None:
    corpus = read_corpus(_require(args.corpus, "corpus"))
    pseudo = read_corpus(_require(args.pseudo, "pseudo-labelled corpus")) if args.pseudo else None
    out = Path(args.out)
    with locked(out):
        enc_cfg = replace(cfg.encoder, seed=cfg.seed)
        model, history = train_encoder(_train_split(corpus), enc_cfg, pseudo=pseudo)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_encoder(model, out, step=enc_cfg.steps, config_hash=cfg.hash())
        _write_log(Path(str(out) + ".log.jsonl"), cfg.hash(), "train-encoder", history)
    print(f"encoder checkpoint written to {out}")


def cmd_pseudo_label(args, cfg: PipelineConfig) -> None:
    model, _ = load_encoder(_require(args.encoder, "encoder checkpoint"))
    pool = read_corpus(_require(args.pool, "unlabelled pool"))
    out = Path(args.out)
    with locked(out):
        kernel = make_gaussian_kernel(cfg.kernel.sigma, cfg.kernel.M)
        pseudo, report = build_pseudo_dataset(model, pool, kernel, hard=cfg.kernel.hard)
        write_corpus(replace(pseudo, config_hash=cfg.hash()), out)
        write_json(out / "filter_report.json", {**report.to_dict(), "config_hash": cfg.hash()})
        _write_log(out / "log.jsonl", cfg.hash(), "pseudo-label", [report.to_dict()])
    print(f"{report.accepted}/{report.total} videos accepted, written to {out}")


def cmd_train_temporal(args, cfg: PipelineConfig) -> None:
    encoder, _ = load_encoder(_require(args.encoder, "encoder checkpoint"))
    corpus = _train_split(read_corpus(_require(args.corpus, "corpus")))
    out = Path(args.out)
    with locked(out):
        samples = temporal_samples(encoder, corpus.records, corpus.schema)
        t_cfg = replace(cfg.temporal, seed=cfg.seed)
        model, history = train_temporal(samples, corpus.schema, t_cfg)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_temporal(model, out, step=len(history), config_hash=cfg.hash())
        _write_log(Path(str(out) + ".log.jsonl"), cfg.hash(), "train-temporal", history)
    print(f"temporal checkpoint written to {out}")


def _load_stacks(encoders, temporals) -> list[ModelStack]:
    if len(encoders) != len(temporals):
        raise ConfigInvalid("--encoder and --temporal must be given the same number of times")
    stacks = []
    for e, t in zip(encoders, temporals):
        enc, _ = load_encoder(_require(e, "encoder checkpoint"))
        tmp, _ = load_temporal(_require(t, "temporal checkpoint"))
        stacks.append(ModelStack(enc, tmp))
    return stacks


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    corpus = read_corpus(_require(args.corpus, "corpus"))
    out = Path(args.out)
    with locked(out):
        if args.encoder or args.temporal:
            stacks = _load_stacks(args.encoder or [], args.temporal or [])
            test = corpus.subset("test")
            result = evaluate(stacks, test.records, corpus.schema)
        else:
            result, _ = run_protocol(corpus, cfg)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, {**result.to_dict(), "config_hash": cfg.hash()})
    avg = result.average()
    print(f"average balanced accuracy {avg['mean']:.4f} +- {avg['std']:.4f} over {len(result.runs)} runs")


def cmd_parse(args, cfg: PipelineConfig) -> None:
    out = Path(args.out)
    min_duration = cfg.evaluation.min_duration
    with locked(out):
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if args.timeline:
            schema = read_corpus(_require(args.corpus, "corpus")).schema if args.corpus else default_schema()
            for path in args.timeline:
                stream = read_timeline(_require(path, "timeline"), schema)
                vid = Path(path).name.removesuffix(".csv").removesuffix(".timeline")
                written += _emit(out, vid, stream, min_duration, args.fps, cfg.hash(), timeline=False)
        else:
            if not (args.encoder and args.temporal and args.corpus):
                raise ConfigInvalid("parse needs --corpus, --encoder and --temporal (or --timeline)")
            (stack,) = _load_stacks([args.encoder], [args.temporal])
            corpus = read_corpus(_require(args.corpus, "corpus"))
            records = corpus.records
            if args.video:
                missing = sorted(set(args.video) - {r.id for r in records})
                if missing:
                    raise MissingArtifact(f"videos not in corpus: {missing}")
                records = [r for r in records if r.id in set(args.video)]
            for rec in records:
                fps = args.fps if args.fps is not None else rec.fps
                written += _emit(out, rec.id, stack.stream(rec), min_duration, fps, cfg.hash())
        write_json(out / "manifest.json", {"config_hash": cfg.hash(), "files": sorted(written)})
    print(f"parsed {len(written)} artifacts into {out}")


def _emit(out: Path, vid: str, stream, min_duration: int, fps, cfg_hash: str, timeline: bool = True) -> list[str]:
    fps = 30.0 if fps is None else fps
    report = build_report(parse_stream(stream, min_duration, vid, fps))
    write_json(out / f"{vid}.report.json", {**report.to_dict(), "config_hash": cfg_hash})
    names = [f"{vid}.report.json"]
    if timeline:
        export_timeline(stream, out / f"{vid}.timeline.csv")
        names.append(f"{vid}.timeline.csv")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config; flags override its values")
    common.add_argument("--seed", type=int, help="master seed (also settable through TEMPOPARSE_SEED)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="tempoparse", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory (must be empty or absent)")
    p.add_argument("--n", type=int, required=True, help="number of videos")
    p.add_argument("--unlabeled", action="store_true", help="strip annotations to make an unlabelled pool")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-encoder", parents=[common], help="train the key-frame encoder")
    p.add_argument("--corpus", required=True, help="labelled corpus directory (its train split is used)")
    p.add_argument("--pseudo", help="pseudo-labelled corpus to add through the soft-target loss")
    p.add_argument("--out", required=True, help="checkpoint path; the log goes to <out>.log.jsonl")
    p.add_argument("--strategy", choices=["keyframe", "random_segment"], help="frame sampling strategy")
    p.add_argument("--steps", type=int, help="optimisation steps")
    p.add_argument("--lr", dest="encoder_lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, help="frames per step")
    p.add_argument("--quota", type=int, help="frames drawn per class per sampling round")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("pseudo-label", parents=[common], help="pseudo-label an unlabelled pool")
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--pool", required=True, help="unlabelled corpus directory")
    p.add_argument("--out", required=True, help="output pseudo corpus directory")
    p.add_argument("--kernel-sigma", type=float, help="Gaussian kernel width (default 5)")
    p.add_argument("--kernel-M", type=int, help="kernel half-size, 2M+1 taps (default 10)")
    p.add_argument("--hard", action="store_true", help="emit one-hot instead of smoothed targets")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-temporal", parents=[common], help="train the multi-stage temporal network")
    p.add_argument("--encoder", required=True, help="encoder checkpoint used to embed frames")
    p.add_argument("--corpus", required=True, help="labelled corpus directory (its train split is used)")
    p.add_argument("--out", required=True, help="checkpoint path; the log goes to <out>.log.jsonl")
    p.add_argument("--stages", type=int, help="number of stages (default 2)")
    p.add_argument("--layers", type=int, help="dilated layers per stage (default 13)")
    p.add_argument("--filters", type=int, help="channels per layer (default 64)")
    p.add_argument("--lambda", dest="lambda_smooth", type=float, help="smoothing loss factor (default 0.15)")
    p.add_argument("--lr", dest="temporal_lr", type=float, help="Adam learning rate")
    p.add_argument("--epochs", type=int, help="passes over the training videos")
    p.add_argument("--label-weights", help="per-group loss weights, e.g. tool=1,segment=2,inout=1")
    p.set_defaults(func=cmd_train_temporal)

    p = sub.add_parser("evaluate", parents=[common], help="per-label balanced accuracy on the test split")
    p.add_argument("--corpus", required=True, help="corpus directory with train and test splits")
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("--runs", type=int, help="retrain and score this many times with seeds seed, seed+1, ...")
    p.add_argument("--encoder", action="append", help="score a trained encoder (repeat, paired with --temporal)")
    p.add_argument("--temporal", action="append", help="score a trained temporal network (repeat)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("parse", parents=[common], help="procedure reports and timelines")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--corpus", help="corpus directory with the videos to parse")
    p.add_argument("--encoder", help="encoder checkpoint")
    p.add_argument("--temporal", help="temporal checkpoint")
    p.add_argument("--video", action="append", help="restrict to these video ids (repeatable)")
    p.add_argument("--timeline", action="append", help="parse an existing timeline CSV instead of running models")
    p.add_argument("--min-duration", type=int, help="shortest kept segment in frames (default 15)")
    p.add_argument("--fps", type=float, help="frame rate for time metrics (default: the video's)")
    p.set_defaults(func=cmd_parse)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TempoparseError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
