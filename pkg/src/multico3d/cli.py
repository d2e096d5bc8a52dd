"""Command-line entry point: ``multico3d <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 numeric failure,
3 I/O or format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .container import FormatError
from .diffkernel import ContractError, DimensionError, EvaluationError
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .sampler import STRATEGIES
from .synthgen import PRESETS as DATA_PRESETS
from .synthgen import EmptyHistogramError, GenerationError, load_dataset, make_dataset, overlap_stats, save_dataset

log = logging.getLogger("multico3d")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
RATIOS = ("1/8", "1/4", "1/2", "1")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def threads() -> int:
    """Worker cap from MC3D_THREADS (default 1)."""
    raw = os.environ.get("MC3D_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MC3D_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MC3D_THREADS must be a positive integer, got {raw!r}")
    return n


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, args, config: dict | None, artifacts) -> Path:
    """Record what ran (RunManifest) next to its outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config is not None:
        (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    manifest = {
        "subcommand": args.command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config": config,
        "seed": config.get("seed") if config else getattr(args, "seed", None),
        "output_dir": str(out),
        "argv": sys.argv[1:],
        "artifacts": {str(Path(p).relative_to(out) if Path(p).is_relative_to(out) else p): _sha256(Path(p))
                      for p in artifacts},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _train_config(args, **flags):
    from .trainer import resolve_config
    return resolve_config(args.config, args.preset, seed=args.seed, lr=args.lr, **flags)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    manifest, volumes = make_dataset(args.preset, args.classes, args.extent, args.subjects, args.validation,
                                     args.test, args.novel, args.seed)
    out = save_dataset(manifest, volumes, args.out)
    files = [out / "manifest.json"] + [out / s["id"] / f for s in manifest.subjects for f in ("input.t", "labels.t")]
    params = dict(manifest.params, seed=args.seed)
    write_manifest(out, args, params, files)
    print(f"wrote {len(manifest.subjects)} subjects to {out} "
          f"(base classes {manifest.base_classes}, novel classes {manifest.novel_classes})")


def cmd_overlap_stats(args):
    from .evalkit import overlap_histogram_csv

    manifest, volumes = load_dataset(args.data)
    ids = manifest.ids(args.split) if args.split else [s["id"] for s in manifest.subjects]
    if not ids:
        raise UsageError(f"dataset has no {args.split} subjects")
    pooled = np.concatenate([volumes[i].labels.reshape(volumes[i].labels.shape[0], -1) for i in ids], axis=1)
    text = overlap_histogram_csv(overlap_stats(pooled))
    sys.stdout.write(text)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        write_manifest(path.parent, args, None, [path])


def cmd_train_base(args):
    from .trainer import train_base

    cfg = _train_config(args, base_epochs=args.epochs)
    manifest, volumes = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt = train_base(manifest, volumes, cfg, metrics_path=out / "metrics.csv")
    save_checkpoint(ckpt, out / "base.ckpt")
    write_manifest(out, args, cfg.to_dict(), [out / "base.ckpt", out / "metrics.csv"])
    print(f"base step done in {time.perf_counter() - t0:.1f}s -> {out / 'base.ckpt'}")


def cmd_train_novel(args):
    from .trainer import train_novel

    cfg = _train_config(
        args, novel_epochs=args.epochs,
        use_dis=False if args.no_dis else None, use_vc=False if args.no_vc else None,
        use_dw=False if args.no_dw else None, strategy=args.strategy, ratio=args.ratio, theta=args.theta,
        n_s=args.ns, tau=args.tau)
    manifest, volumes = load_dataset(args.data)
    base = load_checkpoint(args.base_ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt = train_novel(base, manifest, volumes, cfg, metrics_path=out / "metrics.csv")
    save_checkpoint(ckpt, out / "novel.ckpt")
    write_manifest(out, args, cfg.to_dict(), [out / "novel.ckpt", out / "metrics.csv"])
    print(f"novel step done in {time.perf_counter() - t0:.1f}s -> {out / 'novel.ckpt'}")


def cmd_eval(args):
    from .evalkit import evaluate

    manifest, volumes = load_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate(ckpt, manifest, volumes, role=args.split, threshold=args.threshold)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        summary = path.with_suffix(".json")
        summary.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
        write_manifest(path.parent, args, None, [path, summary])


def cmd_gradcheck(args):
    from .gradsuite import check_losses, check_model, check_ops

    t0 = time.perf_counter()
    results = check_ops(args.points) + check_losses(args.instances) + [check_model(args.instances)]
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<24} n={r.instances:<4d} max_rel_err={r.max_error:.3e}  ({r.seconds:.2f}s)")
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        if "," in text or "-" in text.lstrip("-"):
            out = []
            for part in text.split(","):
                lo, _, hi = part.partition("-")
                out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
            return out
        return list(range(int(text)))
    except ValueError:
        raise UsageError(f"--seeds expects a count (5), a list (0,3,7) or a range (0-4), got {text!r}") from None


def cmd_ablate(args):
    from .evalkit import DEFAULT_ROWS, run_ablation

    cfg = _train_config(args)
    seeds = _parse_seeds(args.seeds)
    rows = tuple(args.rows.split(",")) if args.rows else DEFAULT_ROWS
    dataset = load_dataset(args.data) if args.data else None
    out = Path(args.out)
    t0 = time.perf_counter()
    matrix = run_ablation(cfg, seeds, rows, dataset=dataset, data_seed=args.data_seed, out_dir=out,
                          progress=lambda m: log.info(m), workers=threads())
    sys.stdout.write(matrix.summary_csv())
    files = [p for p in (out / "ablation.csv", out / "ablation_summary.csv", out / "ratio_sweep.csv") if p.exists()]
    write_manifest(out, args, dict(cfg.to_dict(), seeds=seeds, rows=list(rows), data_seed=args.data_seed), files)
    print(f"ablation: {len(seeds)} seeds x {len(rows)} rows in {time.perf_counter() - t0:.1f}s -> {out}")


# ---------------------------------------------------------------- parser

def _config_flags(p, preset_default=None):
    p.add_argument("--config", type=Path, help="JSON config file (may name a 'preset')")
    p.add_argument("--preset", choices=("paper", "desk", "bench"), default=preset_default,
                   help="training preset (default: the config file's, else desk)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multico3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-label dataset")
    p.add_argument("--preset", choices=sorted(DATA_PRESETS), default="hcp-like")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--extent", type=int, default=32)
    p.add_argument("--subjects", type=int, default=12, help="base-train subjects")
    p.add_argument("--validation", type=int, default=0)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--novel", type=int, default=4, help="novel classes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("overlap-stats", help="label-count histogram of a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", help="restrict to one subject role")
    p.add_argument("--out", type=Path, help="also write the CSV here")
    p.set_defaults(func=cmd_overlap_stats)

    p = sub.add_parser("train-base", help="train the step t-1 (base) model")
    p.add_argument("--data", type=Path, required=True)
    _config_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-novel", help="one-shot novel step from a base checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base-ckpt", type=Path, required=True)
    _config_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-dis", action="store_true", help="disable the distillation loss")
    p.add_argument("--no-vc", action="store_true", help="disable the voxel contrast loss")
    p.add_argument("--no-dw", action="store_true", help="disable dynamic loss weighting")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--ratio", choices=RATIOS)
    p.add_argument("--theta", type=float)
    p.add_argument("--ns", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_novel)

    p = sub.add_parser("eval", help="per-class Dice report")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=100, help="random points per op")
    p.add_argument("--instances", type=int, default=20, help="instances per loss and for the model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="full ablation matrix")
    _config_flags(p, preset_default=None)
    p.add_argument("--seeds", default="5", help="count (5), list (0,3,7) or range (0-4)")
    p.add_argument("--rows", help="comma-separated ablation rows (default: all)")
    p.add_argument("--data", type=Path, help="existing dataset (default: generate one)")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "ablate" else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "ablate" and args.preset is None and args.config is None:
        args.preset = "bench"
    from .trainer import ConfigError
    try:
        threads()
        return args.func(args) or EXIT_OK
    except (UsageError, ConfigError, GenerationError, EmptyHistogramError, DimensionError, ContractError) as exc:
        print(f"multico3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, EvaluationError) as exc:
        print(f"multico3d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, CheckpointError, OSError) as exc:
        print(f"multico3d: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
