"""Command-line entry point: ``iaa <subcommand> ...``.

Every subcommand is a thin wrapper over the library. Results go to stdout as
JSON (or ``key: value`` lines with ``--human``); errors go to stderr as a JSON
object and set the exit code (2 config, 3 data, 4 numerical).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, generate
from .config import ExperimentConfig, load_config, override, parse_sigma
from .core import Dataset, load_dataset, save_dataset
from .correction import correct_covariance
from .correlation import correlation_report, global_distance_profile, metric_sweep
from .errors import ConfigError, DataError, IAAError, NumericalError
from .evaluation import evaluate, similarity_histogram
from .stats import estimate_class_stats, estimate_global_covariance, stats_from_json, stats_to_json
from .trainer import config_to_dict, decode_encoder, encode_encoder, train
from .world import make_synthetic_world


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _human(obj, prefix="") -> str:
    lines = []
    for key in sorted(obj):
        value = obj[key]
        if isinstance(value, dict):
            lines.append(_human(value, f"{prefix}{key}."))
        else:
            lines.append(f"{prefix}{key}: {value}")
    return "\n".join(x for x in lines if x)


def _emit(args, summary: dict) -> None:
    if args.human:
        sys.stdout.write(_human(summary) + "\n")
    else:
        sys.stdout.write(_dump(summary))


def _write_text(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _read_json(path) -> dict:
    try:
        text = sys.stdin.read() if path in (None, "-") else Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"input is not valid JSON: {exc}") from None


def _load(args, path=None) -> Dataset:
    return load_dataset(path or args.input, format=args.format, header=args.header)


def _embed(args, dataset: Dataset) -> Dataset:
    if not getattr(args, "encoder", None):
        return dataset
    try:
        encoder = decode_encoder(Path(args.encoder).read_bytes())
    except FileNotFoundError:
        raise DataError(f"no such file: {args.encoder}") from None
    if encoder.d_in != dataset.dim:
        raise DataError(f"encoder expects {encoder.d_in} input columns, dataset has {dataset.dim}")
    return Dataset(encoder.embed(dataset.embeddings), dataset.labels, dataset.name)


# --- configuration ------------------------------------------------------------


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    cfg = override(cfg, "root", seed=args.seed, threads=args.threads)
    cmd = args.command
    if cmd == "synth":
        cfg = override(
            cfg,
            "world",
            classes=args.classes,
            dim_in=args.dim,
            dim_emb=args.emb_dim,
            corr_knob=args.corr,
            min_samples=args.min_samples,
            max_samples=args.max_samples,
            heldout_classes=args.heldout,
            spread=args.spread,
            anisotropy=args.anisotropy,
        )
    if cmd in ("stats", "correct", "generate", "correlate"):
        cfg = override(cfg, "root", stats_mode=getattr(args, "mode", None))
    if cmd in ("correlate", "correct", "generate"):
        cfg = override(cfg, "metric", p=args.p)
        if args.p is not None:
            cfg = override(cfg, "correction", metric=cfg.metric)
    if cmd in ("correct", "generate"):
        cfg = override(
            cfg,
            "correction",
            k=args.k,
            beta=args.beta,
            gamma=args.gamma,
            tau=args.tau,
            sigma_m=args.sigma_m,
            sigma_cv=args.sigma_cv,
            include_self=True if args.include_self else None,
        )
    if cmd in ("generate", "train"):
        cfg = override(cfg, "augment", lam=args.lam, m=args.m, strategy=args.strategy)
    if cmd == "train":
        cfg = override(cfg, "loss", variant=args.loss)
        cfg = override(cfg, "train", epochs=args.epochs, lr=args.lr, ablation=True if args.ablation else None)
        cfg.train_config(augment=not args.baseline)  # validate early
    if cmd == "eval" and args.ks:
        cfg = override(cfg, "eval", ks=list(args.ks))
    if cfg.stats_mode not in ("diagonal", "full"):
        raise ConfigError(f"stats_mode must be 'diagonal' or 'full', got {cfg.stats_mode!r}")
    return cfg


# --- subcommands ----------------------------------------------------------------


def cmd_synth(args, cfg):
    w = cfg.world
    seed = cfg.resolved_seed()
    try:
        world = make_synthetic_world(
            w.classes,
            w.dim_in,
            w.dim_emb or w.dim_in,
            (w.min_samples, w.max_samples),
            w.corr_knob,
            seed,
            heldout_classes=w.heldout_classes,
            spread=w.spread,
            input_noise=w.input_noise,
            anisotropy=w.anisotropy,
            rotate_variance=w.rotate_variance,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_dataset(world.train, args.output, args.format)
    summary = {"output": args.output, "n": len(world.train), "dim": world.train.dim, "classes": w.classes, "seed": seed}
    if args.heldout_output:
        if world.heldout is None:
            raise ConfigError("--heldout-output needs --heldout > 0")
        save_dataset(world.heldout, args.heldout_output, args.format)
        summary["heldout_output"] = args.heldout_output
    if args.truth:
        Path(args.truth).write_text(_dump({"seed": seed, "classes": world.truth()}))
    _emit(args, summary)


def cmd_stats(args, cfg):
    dataset = _load(args)
    stats = estimate_class_stats(dataset, mode=cfg.stats_mode, workers=cfg.threads)
    doc = stats_to_json(stats, estimate_global_covariance(stats))
    _write_text(args.output, _dump(doc))


def _stats_input(args, cfg):
    """Statistics from a stats JSON (``--stats``) or estimated from a dataset."""
    if args.stats:
        return stats_from_json(_read_json(args.stats))
    dataset = _load(args)
    stats = estimate_class_stats(dataset, mode=cfg.stats_mode, workers=cfg.threads)
    return stats, estimate_global_covariance(stats)


def cmd_correlate(args, cfg):
    if not args.stats and not args.input:
        raise ConfigError("correlate needs a dataset or --stats")
    stats, global_stats = _stats_input(args, cfg)
    report = correlation_report(stats, cfg.metric)
    doc = report.to_json()
    if args.sweep:
        doc["sweep"] = metric_sweep(stats)
    if args.profile:
        dists, ref = global_distance_profile(stats, global_stats, cfg.metric)
        doc["global_profile"] = {"distances": dists.tolist(), "reference": ref}
    if args.curves:
        Path(args.curves).write_text(report.curves_csv())
    _write_text(args.output, _dump(doc))


def cmd_correct(args, cfg):
    stats, global_stats = stats_from_json(_read_json(args.input))
    corrected = correct_covariance(stats, global_stats, cfg.correction, workers=cfg.threads)
    _write_text(args.output, _dump(corrected.to_json(global_stats)))


def cmd_generate(args, cfg):
    dataset = _load(args)
    if args.stats:
        stats, _ = stats_from_json(_read_json(args.stats))
    else:
        stats = estimate_class_stats(dataset, mode=cfg.stats_mode, workers=cfg.threads)
        if not args.no_correct:
            g = estimate_global_covariance(stats)
            stats = correct_covariance(stats, g, cfg.correction, workers=cfg.threads).stats
    seed = cfg.resolved_seed()
    aug = AugmentConfig(cfg.augment.lam, cfg.augment.m, cfg.augment.strategy, seed, cfg.augment.renormalize)
    known = {s.class_id for s in stats}
    missing = sorted(set(dataset.labels.tolist()) - known)
    if missing:
        raise DataError(f"no statistics for classes {missing[:10]}")
    syn = generate(dataset.embeddings, dataset.labels, stats, aug, key=(args.epoch, args.batch))
    if len(syn) == 0:
        raise ConfigError("nothing to generate (M = 0)")
    save_dataset(Dataset(syn.samples, syn.labels), args.output, args.format)
    sidecar = {
        "origin_indices": syn.origin.tolist(),
        "lambda": aug.lam,
        "M": aug.m,
        "strategy": aug.strategy,
        "seed": seed,
        "epoch": args.epoch,
        "batch": args.batch,
    }
    Path(str(args.output) + ".json").write_text(_dump(sidecar))
    _emit(args, {"output": args.output, "n": len(syn), "seed": seed, "strategy": aug.strategy})


def cmd_train(args, cfg):
    dataset = _load(args)
    eval_set = _load(args, args.eval) if args.eval else None
    tcfg = cfg.train_config(augment=not args.baseline)
    encoder, runlog = train(dataset, tcfg, eval_dataset=eval_set, workers=cfg.threads)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "encoder.iaae").write_bytes(encode_encoder(encoder))
    (out / "runlog.jsonl").write_text(runlog.to_jsonl(include_time=args.timing))
    resolved = cfg.to_dict()
    resolved["seed"] = tcfg.seed
    resolved["resolved_train"] = config_to_dict(tcfg)
    (out / "config.json").write_text(_dump(resolved))
    last = runlog.records[-1] if runlog.records else {}
    _emit(args, {"output": str(out), "seed": tcfg.seed, "final_loss": last.get("loss"), "metrics": last.get("metrics")})


def cmd_eval(args, cfg):
    dataset = _embed(args, _load(args))
    ks = [int(k) for k in cfg.eval.ks]
    m = evaluate(dataset.embeddings, dataset.labels, ks=ks, workers=cfg.threads)
    doc = {f"recall@{k}": m[f"recall@{k}"] for k in ks}
    doc.update(rp=m["rp"], map_at_r=m["map_at_r"], n_queries=m["n_queries"])
    if args.output:
        Path(args.output).write_text(_dump(doc))
    _emit(args, doc)


def cmd_histogram(args, cfg):
    dataset = _embed(args, _load(args))
    edges, pos, neg = similarity_histogram(dataset.embeddings, dataset.labels)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "positive", "negative"])
    for lo, hi, p, n in zip(edges[:-1], edges[1:], pos, neg):
        w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(p), int(n)])
    _write_text(args.output, buf.getvalue())


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "correlate": cmd_correlate,
    "correct": cmd_correct,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "histogram": cmd_histogram,
}


# --- parser -------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config, then $IAA_SEED, then 0)")
    p.add_argument("--threads", type=int, default=None, help="worker cap; 1 runs serially")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--human", action="store_true", help="human-readable stdout instead of JSON")


def _data_io(p, positional=True, required=True):
    if positional:
        p.add_argument("input", nargs=None if required else "?", help="dataset file (.iaad or .csv)")
    p.add_argument("--format", choices=("iaad", "csv"), default=None, help="override suffix-based format detection")
    p.add_argument("--header", action="store_true", help="skip the first CSV line")


def _correction_flags(p):
    p.add_argument("--k", type=int, default=None, help="neighbor count")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--sigma-m", type=parse_sigma, default=None, help="mean kernel width ('inf' disables)")
    p.add_argument("--sigma-cv", type=parse_sigma, default=None, help="covariance kernel width ('inf' disables)")
    p.add_argument("--include-self", action="store_true", help="let a class appear in its own neighbor set")


def _augment_flags(p):
    p.add_argument("--lam", type=float, default=None, help="noise scale lambda")
    p.add_argument("--m", type=int, default=None, help="synthetic samples per original")
    p.add_argument("--strategy", choices=("dynamic", "fixed"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iaa", description="Intra-class adaptive augmentation toolkit")
    parser.add_argument("--version", action="version", version=f"iaa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="draw a synthetic labeled world")
    _common(p)
    _data_io(p, positional=False)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None, help="feature dimension")
    p.add_argument("--emb-dim", type=int, default=None, help="latent dimension (default: --dim)")
    p.add_argument("--corr", type=float, default=None, help="mean/covariance coupling in [0, 1]")
    p.add_argument("--min-samples", type=int, default=None)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--spread", type=float, default=None)
    p.add_argument("--anisotropy", type=float, default=None)
    p.add_argument("--heldout", type=int, default=None, help="number of held-out classes")
    p.add_argument("--heldout-output", default=None)
    p.add_argument("--truth", default=None, help="write true class distributions as JSON")

    p = sub.add_parser("stats", help="estimate per-class means and covariances")
    _common(p)
    _data_io(p)
    p.add_argument("--mode", choices=("diagonal", "full"), default=None)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("correlate", help="mean/covariance distance correlation report")
    _common(p)
    _data_io(p, required=False)
    p.add_argument("--stats", default=None, help="stats JSON instead of a dataset")
    p.add_argument("--mode", choices=("diagonal", "full"), default=None)
    p.add_argument("--p", type=int, default=None, help="norm order")
    p.add_argument("--sweep", action="store_true", help="include every metric variant")
    p.add_argument("--profile", action="store_true", help="include distances to the global covariance")
    p.add_argument("--curves", default=None, help="write rank curves CSV here")
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("correct", help="neighbor-correct covariances in a stats JSON")
    _common(p)
    p.add_argument("input", nargs="?", default="-", help="stats JSON (default: stdin)")
    p.add_argument("--p", type=int, default=None, help="norm order for class distances")
    _correction_flags(p)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("generate", help="draw synthetic samples around embeddings")
    _common(p)
    _data_io(p)
    p.add_argument("--stats", default=None, help="stats JSON (default: estimate from the input)")
    p.add_argument("--no-correct", action="store_true", help="skip correction when estimating")
    p.add_argument("--mode", choices=("diagonal", "full"), default=None)
    p.add_argument("--p", type=int, default=None)
    _correction_flags(p)
    _augment_flags(p)
    p.add_argument("--epoch", type=int, default=0, help="RNG key component")
    p.add_argument("--batch", type=int, default=0, help="RNG key component")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train an encoder")
    _common(p)
    _data_io(p)
    p.add_argument("--eval", default=None, help="held-out dataset evaluated every epoch")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--loss", choices=("contrastive", "triplet", "ms"), default=None)
    _augment_flags(p)
    p.add_argument("--baseline", action="store_true", help="train without augmentation")
    p.add_argument("--ablation", action="store_true", help="allow ablation-only settings")
    p.add_argument("--timing", action="store_true", help="record wall time in the run log")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("eval", help="retrieval metrics")
    _common(p)
    _data_io(p)
    p.add_argument("--encoder", default=None, help="embed the input with this encoder first")
    p.add_argument("--ks", type=int, nargs="+", default=None)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("histogram", help="cosine similarity histogram of positive and negative pairs")
    _common(p)
    _data_io(p)
    p.add_argument("--encoder", default=None)
    p.add_argument("-o", "--output", default=None)
    return parser


def _fail(exc: Exception, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    state = getattr(exc, "state", None)
    if state:
        doc["state"] = state
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args)
        if args.print_config:
            sys.stdout.write(_dump(cfg.to_dict()))
            return 0
        COMMANDS[args.command](args, cfg)
        return 0
    except IAAError as exc:
        return _fail(exc, exc.exit_code)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(NumericalError(str(exc)), 4)
    except (ValueError, OSError) as exc:
        return _fail(DataError(str(exc)), 3)


if __name__ == "__main__":
    sys.exit(main())
