"""Command-line front end: synth, train, extract, eval, diagnose, sweep.

Every command resolves an output directory (the --out flag, else a
timestamped directory under $PARTPOOL_OUTPUT_ROOT or ./runs), writes the
effective configuration next to its artifacts, and is reproducible from
(config, seed). Exit codes: 0 success, 2 configuration error, 3 data or
checkpoint error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnose as diag
from .config import (
    EvalConfig,
    RunConfig,
    SynthConfig,
    config_to_dict,
    load_run_config,
)
from .data import generate_synthetic, load_directory, save_dataset
from .errors import ConfigError, DataError, NumericAbortError, PartPoolError
from .model import Model
from .retrieval import build_index, evaluate_manifest, extract_split, query_descriptors
from .rpp import build_rpp_head
from .train import fit, induced_training, write_log

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PARTPOOL_OUTPUT_ROOT"
TRAIN_MODES = ("ide", "pcb", "variant1", "variant2", "rpp", "rpp-no-induction")


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _resolve_out(explicit: str | None, command: str) -> Path:
    if explicit:
        out = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = _output_root() / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective_config(cfg, out_dir: Path) -> None:
    doc = config_to_dict(cfg)
    (out_dir / "config_used.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"size {text!r} must look like 48x16")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{text!r} must be a comma-separated list of integers")


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _base_config(args)
    synth = cfg.synth
    overrides = {}
    if args.num_ids is not None:
        overrides["num_ids"] = args.num_ids
    if args.imgs_per_id is not None:
        overrides["imgs_per_id"] = args.imgs_per_id
    if args.bands is not None:
        overrides["bands"] = args.bands
    if args.shift is not None:
        overrides["shift_rows"] = args.shift
    if args.size is not None:
        overrides["image_size"] = _parse_size(args.size)
    if args.noise is not None:
        overrides["noise"] = args.noise
    synth = dataclasses.replace(synth, **overrides)
    synth.validate()
    out = _resolve_out(args.out, "synth")
    manifest = generate_synthetic(
        num_ids=synth.num_ids,
        imgs_per_id=synth.imgs_per_id,
        bands=synth.bands,
        shift_rows=synth.shift_rows,
        seed=args.seed,
        image_size=synth.image_size,
        noise=synth.noise,
        query_fraction=synth.query_fraction,
    )
    save_dataset(manifest, out, force=args.force)
    _write_effective_config(dataclasses.replace(cfg, synth=synth, seed=args.seed), out)
    counts = {s: len(manifest.split(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {out} ({counts['train']} train / {counts['query']} query / "
          f"{counts['gallery']} gallery, {manifest.num_identities} train identities)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _apply_train_overrides(cfg: RunConfig, args) -> RunConfig:
    head = cfg.head
    if args.p is not None:
        if args.mode == "ide":
            log.info("mode ide pools globally; ignoring --p %d", args.p)
        else:
            head = dataclasses.replace(head, p=args.p)
    if args.r is not None:
        head = dataclasses.replace(head, r=args.r)
    sched = cfg.schedule
    sched_over = {}
    if args.epochs is not None:
        sched_over["total_epochs"] = args.epochs
        if sched.decay_epoch >= args.epochs:
            sched_over["decay_epoch"] = max(0, args.epochs * 2 // 3)
    if args.batch_size is not None:
        sched_over["batch_size"] = args.batch_size
    if args.lr is not None:
        sched_over["base_lr"] = args.lr
    if args.rpp_epochs is not None:
        sched_over["rpp_epochs"] = args.rpp_epochs
    if sched_over:
        sched = dataclasses.replace(sched, **sched_over)
    return dataclasses.replace(cfg, mode=args.mode, head=head, schedule=sched, seed=args.seed)


def cmd_train(args) -> int:
    cfg = _apply_train_overrides(_base_config(args), args)
    cfg.validate()
    no_induction = args.no_induction or args.mode == "rpp-no-induction"
    if args.mode == "rpp" and not no_induction and not getattr(args, "from_ckpt", None):
        raise ConfigError(
            "--mode rpp needs --from <trained pcb checkpoint>, or --no-induction"
        )
    manifest = load_directory(args.data)
    out = _resolve_out(args.out, "train")
    _write_effective_config(cfg, out)

    if args.mode in ("rpp", "rpp-no-induction"):
        pcb = None
        if not no_induction:
            pcb = Model.load(args.from_ckpt)
        model, records = induced_training(
            manifest, cfg, pcb=pcb, no_induction=no_induction, snapshot_dir=str(out)
        )
    else:
        init = Model.load(args.pretrain) if args.pretrain else None
        model, records = fit(manifest, cfg, mode=args.mode, snapshot_dir=str(out),
                             init_from=init)

    ckpt = out / "checkpoint.npz"
    model.save(ckpt)
    write_log(records, out / "train_log.jsonl")
    final = records[-1]["mean_loss"] if records else float("nan")
    print(f"trained {args.mode} for {len(records)} epochs; final loss {final:.4f}; "
          f"checkpoint {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    model = Model.load(args.ckpt)
    manifest = load_directory(args.data)
    samples = manifest.split(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    vectors = extract_split(model, samples, args.kind)
    out = _resolve_out(args.out, "extract")
    np.save(out / "descriptors.npy", vectors)
    per = model.cfg.backbone.out_channels if args.kind == "G" else model.cfg.head.r
    sidecar = {
        "kind": args.kind,
        "p": model.cfg.head.effective_p,
        "per_part_dim": per,
        "dim": int(vectors.shape[1]),
        "count": int(vectors.shape[0]),
        "split": args.split,
        "checkpoint_sha256": _sha256(Path(args.ckpt)),
        "paths": [s.path for s in samples],
    }
    (out / "descriptors.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"extracted {vectors.shape[0]} x {vectors.shape[1]} {args.kind} descriptors to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = Model.load(args.ckpt)
    manifest = load_directory(args.data)
    ranks = _parse_ints(args.ranks)
    eval_cfg = EvalConfig(ranks=ranks, kind=args.kind, metric=args.metric)
    eval_cfg.validate()
    result = evaluate_manifest(
        manifest, model, kind=args.kind, ranks=ranks, metric=args.metric
    )
    out = _resolve_out(args.out, "eval")
    doc = result.to_json_dict(ranks)
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_effective_config(eval_cfg, out)
    pieces = ", ".join(f"rank-{k}={result.rank(k):.4f}" for k in ranks)
    print(f"{pieces}, mAP={result.mean_ap:.4f} "
          f"({result.num_evaluated} evaluated, {result.num_skipped} skipped)")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    model = Model.load(args.ckpt)
    manifest = load_directory(args.data)
    samples = manifest.split(args.split)[: args.count]
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    out = _resolve_out(args.out, "diagnose")
    p = model.cfg.head.effective_p
    m_rows = model.tensor_shape[0]
    summary: dict = {"count": len(samples), "p": p, "outlier_rates": []}
    refined = model.cfg.pooling == "rpp"
    boundary_pred, boundary_unif = [], []
    bands = args.bands or p
    from .heads import uniform_pool

    for i, s in enumerate(samples):
        x = ((s.pixels - model.input_mean) / model.input_std)[None]
        fw = model.forward(x, train=False)
        g = uniform_pool(fw.T[0], p)
        pm = diag.nearest_part_map(fw.T[0], g)
        diag.render_part_map(pm, out / f"nearest_{i:03d}.png")
        diag.write_grid(pm, out / f"nearest_{i:03d}.txt")
        summary["outlier_rates"].append(diag.outlier_rate(fw.T[0], g))
        if refined:
            rm = diag.rpp_argmax_map(fw.A[0], empty_eps=model.cfg.rpp.eps)
            diag.render_part_map(rm, out / f"rpp_{i:03d}.png")
            diag.write_grid(rm, out / f"rpp_{i:03d}.txt")
            collapse = diag.part_collapse(fw.A[0], fw.g[0], empty_eps=model.cfg.rpp.eps)
            summary.setdefault("collapse", []).append(collapse)
            if s.shift is not None and p >= 2:
                true_rows = diag.band_boundaries_in_tensor(
                    s.pixels.shape[0], bands, s.shift, m_rows
                )
                if len(true_rows) == p - 1:
                    boundary_pred.append(
                        float(np.abs(diag.boundary_positions(rm.labels, p) - true_rows).mean())
                    )
                    boundary_unif.append(
                        float(np.abs(diag.uniform_boundaries(m_rows, p) - true_rows).mean())
                    )
    summary["mean_outlier_rate"] = float(np.mean(summary["outlier_rates"]))
    if boundary_pred:
        summary["boundary_error_refined"] = float(np.mean(boundary_pred))
        summary["boundary_error_uniform"] = float(np.mean(boundary_unif))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"diagnosed {len(samples)} images; mean outlier rate "
          f"{summary['mean_outlier_rate']:.4f}; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_values(axis: str, text: str):
    if axis == "p":
        return list(_parse_ints(text))
    if axis == "input":
        return [_parse_size(v) for v in text.split(",")]
    if axis == "downsample":
        vals = text.split(",")
        for v in vals:
            if v not in ("half", "full"):
                raise ConfigError("downsample values must be 'half' or 'full'")
        return vals
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _sweep_run_config(cfg: RunConfig, axis: str, value, seed: int) -> RunConfig:
    backbone, head, synth = cfg.backbone, cfg.head, cfg.synth
    if axis == "p":
        head = dataclasses.replace(head, p=value)
    elif axis == "input":
        backbone = dataclasses.replace(backbone, input_size=value)
        synth = dataclasses.replace(synth, image_size=value)
    elif axis == "downsample":
        backbone = dataclasses.replace(backbone, halve_last_downsample=(value == "half"))
    return dataclasses.replace(
        cfg, backbone=backbone, head=head, synth=synth, seed=seed
    )


def run_sweep(cfg: RunConfig, axis: str, values, seeds, mode: str,
              out_dir: Path) -> diag.SweepReport:
    """Train and evaluate one model per (value, seed); returns the report.

    Refined-pooling runs also record the empty/duplicate-part diagnostic,
    computed over a handful of query images."""
    datasets: dict = {}
    configs, results = [], []
    for value in values:
        for seed in seeds:
            rc = _sweep_run_config(cfg, axis, value, seed)
            rc.validate()
            synth_key = (rc.synth.image_size, rc.synth.shift_rows)
            if synth_key not in datasets:
                datasets[synth_key] = generate_synthetic(
                    num_ids=rc.synth.num_ids,
                    imgs_per_id=rc.synth.imgs_per_id,
                    bands=rc.synth.bands,
                    shift_rows=rc.synth.shift_rows,
                    seed=rc.seed,
                    image_size=rc.synth.image_size,
                    noise=rc.synth.noise,
                    query_fraction=rc.synth.query_fraction,
                )
            manifest = datasets[synth_key]
            if mode == "rpp":
                model, _ = induced_training(manifest, rc)
            else:
                model, _ = fit(manifest, rc, mode=mode)
            res = evaluate_manifest(manifest, model, kind=cfg.eval.kind,
                                    ranks=cfg.eval.ranks, metric=cfg.eval.metric)
            row = {axis: value if axis != "input" else f"{value[0]}x{value[1]}",
                   "seed": seed}
            if mode == "rpp":
                fired = 0
                queries = manifest.split("query")[:8]
                for s in queries:
                    x = ((s.pixels - model.input_mean) / model.input_std)[None]
                    fw = model.forward(x, train=False)
                    collapse = diag.part_collapse(fw.A[0], fw.g[0],
                                                  empty_eps=model.cfg.rpp.eps)
                    fired += int(collapse["fired"])
                row["collapse_images"] = fired
                row["collapse_fired"] = fired > 0
            configs.append(row)
            results.append(res)
            log.info("sweep %s=%s seed=%d rank1=%.4f", axis, value, seed, res.rank(1))
    report = diag.sweep_report(axis, configs, results)
    diag.write_report(report, out_dir)
    return report


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    values = _sweep_values(args.axis, args.values)
    seeds = list(_parse_ints(args.seeds)) if args.seeds else [args.seed]
    out = _resolve_out(args.out, "sweep")
    _write_effective_config(cfg, out)
    report = run_sweep(cfg, args.axis, values, seeds, args.mode, out)
    print(f"swept {args.axis} over {len(values)} values x {len(seeds)} seeds; "
          f"report in {out}")
    for row in report.rows:
        print(f"  {args.axis}={row[args.axis]} seed={row['seed']} "
              f"rank1={row['rank1']:.4f} mAP={row['mAP']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partpool",
        description="Part-pooled appearance descriptors: synthesize data, "
                    "train, extract, evaluate, diagnose, sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic banded-identity dataset")
    sp.add_argument("--out")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--num-ids", type=int)
    sp.add_argument("--imgs-per-id", type=int)
    sp.add_argument("--bands", type=int)
    sp.add_argument("--shift", type=int)
    sp.add_argument("--size")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--mode", choices=TRAIN_MODES, default="pcb")
    tp.add_argument("--out")
    tp.add_argument("--config")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--p", type=int)
    tp.add_argument("--r", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--rpp-epochs", type=int)
    tp.add_argument("--batch-size", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--from", dest="from_ckpt")
    tp.add_argument("--no-induction", action="store_true")
    tp.add_argument("--pretrain")
    tp.set_defaults(func=cmd_train)

    xp = sub.add_parser("extract", help="dump descriptors for one split")
    xp.add_argument("--ckpt", required=True)
    xp.add_argument("--data", required=True)
    xp.add_argument("--split", choices=("train", "query", "gallery"), default="gallery")
    xp.add_argument("--kind", choices=("G", "H"), default="G")
    xp.add_argument("--out")
    xp.set_defaults(func=cmd_extract)

    ep = sub.add_parser("eval", help="rank query against gallery and report CMC/mAP")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--kind", choices=("G", "H"), default="G")
    ep.add_argument("--ranks", default="1,5,10")
    ep.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    ep.add_argument("--out")
    ep.set_defaults(func=cmd_eval)

    dp = sub.add_parser("diagnose", help="part-membership maps and misalignment stats")
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--data", required=True)
    dp.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    dp.add_argument("--count", type=int, default=4)
    dp.add_argument("--bands", type=int)
    dp.add_argument("--out")
    dp.set_defaults(func=cmd_diagnose)

    wp = sub.add_parser("sweep", help="train/eval across p, input sizes, or downsample")
    wp.add_argument("--axis", choices=("p", "input", "downsample"), required=True)
    wp.add_argument("--values", required=True)
    wp.add_argument("--seeds")
    wp.add_argument("--mode", choices=("pcb", "ide", "variant1", "variant2", "rpp"),
                    default="pcb")
    wp.add_argument("--config")
    wp.add_argument("--seed", type=int, default=0)
    wp.add_argument("--out")
    wp.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return 2
    except DataError as e:
        log.error("data error: %s", e)
        return 3
    except NumericAbortError as e:
        log.error("numeric abort: %s (%s)", e, e.diagnostics)
        return 4
    except PartPoolError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
