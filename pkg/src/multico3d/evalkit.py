"""Dice evaluation, forgetting, and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffkernel import DimensionError
from .model import Checkpoint, predict_volume
from .synthgen import DatasetManifest, MultiLabelVolume, make_dataset
from .trainer import ConfigError, NovelStepTrace, TrainConfig, train_base, train_novel

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("config", "seed", "base_mean", "novel_mean", "all_mean", "forgetting")


def dice(pred, label, threshold: float = 0.5) -> float:
    """Dice of ``pred >= threshold`` against a binary label; 1.0 when both are empty."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise DimensionError(f"dice: shapes {pred.shape} and {label.shape} differ")
    a = pred >= threshold
    b = label.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


@dataclass
class DiceReport:
    per_class: dict[int, float]
    base_classes: list[int]
    novel_classes: list[int]
    subjects: int
    threshold: float = 0.5

    @property
    def base_mean(self) -> float:
        return _mean([self.per_class[c] for c in self.base_classes if c in self.per_class])

    @property
    def novel_mean(self) -> float:
        return _mean([self.per_class[c] for c in self.novel_classes if c in self.per_class])

    @property
    def all_mean(self) -> float:
        return _mean(list(self.per_class.values()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "group", "dice"])
        for c in sorted(self.per_class):
            group = "base" if c in self.base_classes else "novel"
            w.writerow([c, group, f"{self.per_class[c]:.10f}"])
        for name, v in (("base_mean", self.base_mean), ("novel_mean", self.novel_mean), ("all_mean", self.all_mean)):
            if not np.isnan(v):
                w.writerow([name, "summary", f"{v:.10f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"subjects": self.subjects, "threshold": self.threshold, "base_mean": self.base_mean,
               "all_mean": self.all_mean}
        if any(c in self.per_class for c in self.novel_classes):
            out["novel_mean"] = self.novel_mean
        return out


def evaluate(ckpt: Checkpoint, manifest: DatasetManifest, volumes: dict[str, MultiLabelVolume],
             role: str = "test", threshold: float = 0.5) -> DiceReport:
    """Per-class Dice averaged over subjects, for every head the checkpoint has."""
    model = ckpt.build()
    heads = list(manifest.base_classes)
    for key in ("base_classes", "novel_classes"):
        recorded = ckpt.meta.get(key)
        if recorded is not None and list(recorded) != list(getattr(manifest, key)):
            raise ConfigError(f"checkpoint was trained with {key} {list(recorded)}, "
                              f"dataset has {list(getattr(manifest, key))}")
    if model.config.n_base != len(manifest.base_classes):
        raise ConfigError("checkpoint base head does not match the dataset's base classes")
    if model.config.n_novel:
        if model.config.n_novel != len(manifest.novel_classes):
            raise ConfigError("checkpoint novel head does not match the dataset's novel classes")
        heads += list(manifest.novel_classes)
    ids = manifest.ids(role)
    if not ids:
        raise ConfigError(f"dataset has no {role} subjects")
    scores = {c: [] for c in heads}
    for sid in ids:
        vol = volumes[sid]
        probs = predict_volume(model, vol.input)
        for k, c in enumerate(heads):
            scores[c].append(dice(probs[k], vol.labels[c], threshold))
    per_class = {c: float(np.mean(v)) for c, v in scores.items()}
    return DiceReport(per_class, list(manifest.base_classes), list(manifest.novel_classes), len(ids), threshold)


@dataclass
class ForgettingDelta:
    per_class: dict[int, float]

    @property
    def mean(self) -> float:
        return _mean(list(self.per_class.values()))


def forgetting_delta(before: DiceReport, after: DiceReport) -> ForgettingDelta:
    if before.base_classes != after.base_classes:
        raise ConfigError("reports use different class splits")
    return ForgettingDelta({c: before.per_class[c] - after.per_class[c] for c in before.base_classes})


# ---------------------------------------------------------------- ablation

ABLATION_CONFIGS = {
    "lwf": dict(use_dis=False, use_vc=False, use_dw=False),
    "lwf+dis": dict(use_dis=True, use_vc=False, use_dw=False),
    "lwf+dis+vc": dict(use_dis=True, use_vc=True, use_dw=False),
    "lwf+dis+vc+dw": dict(use_dis=True, use_vc=True, use_dw=True),
    "sampling:random": dict(strategy="random"),
    "sampling:balanced": dict(strategy="balanced"),
    "sampling:balanced+hard": dict(strategy="balanced+hard"),
    "ratio:1/8": dict(ratio="1/8"),
    "ratio:1/4": dict(ratio="1/4"),
    "ratio:1/2": dict(ratio="1/2"),
    "ratio:1": dict(ratio="1"),
}
DEFAULT_ROWS = ("lwf", "lwf+dis", "lwf+dis+vc", "lwf+dis+vc+dw", "sampling:random", "sampling:balanced",
                "sampling:balanced+hard", "ratio:1/8", "ratio:1")


@dataclass
class AblationCell:
    config: str
    seed: int
    report: DiceReport
    forgetting: float
    vc_seconds_per_epoch: float
    settings: dict


@dataclass
class AblationMatrix:
    cells: list[AblationCell] = field(default_factory=list)
    base_reports: dict[int, DiceReport] = field(default_factory=dict)

    def rows(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.config not in seen:
                seen.append(c.config)
        return seen

    def values(self, config: str, column: str) -> list[float]:
        out = []
        for c in self.cells:
            if c.config == config:
                out.append(c.forgetting if column == "forgetting" else getattr(c.report, column))
        return out

    def median(self, config: str, column: str = "all_mean") -> float:
        return float(np.median(self.values(config, column)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for c in self.cells:
            w.writerow([c.config, c.seed, f"{c.report.base_mean:.10f}", f"{c.report.novel_mean:.10f}",
                        f"{c.report.all_mean:.10f}", f"{c.forgetting:.10f}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("config", "seeds", "median_base", "median_novel", "median_all", "median_forgetting"))
        for r in self.rows():
            w.writerow([r, len(self.values(r, "all_mean"))] +
                       [f"{self.median(r, k):.10f}" for k in ("base_mean", "novel_mean", "all_mean", "forgetting")])
        return buf.getvalue()

    def ratio_sweep_csv(self) -> str:
        """x,y series (ratio, median all-class Dice, median L_VC seconds/epoch)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("ratio", "median_all", "median_vc_seconds_per_epoch"))
        for r in self.rows():
            if r.startswith("ratio:"):
                secs = [c.vc_seconds_per_epoch for c in self.cells if c.config == r]
                w.writerow([r.split(":", 1)[1], f"{self.median(r):.10f}", f"{float(np.median(secs)):.10f}"])
        return buf.getvalue()


def _settings_key(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def _ablation_seed(base_config: TrainConfig, seed: int, rows, manifest, volumes, progress=None):
    """Base step plus every configured novel step for one seed."""
    cfg0 = base_config.with_overrides(seed=seed)
    t0 = time.perf_counter()
    base_ckpt = train_base(manifest, volumes, cfg0)
    before = evaluate(base_ckpt, manifest, volumes)
    if progress:
        progress(f"seed {seed}: base step {time.perf_counter() - t0:.1f}s, base Dice {before.base_mean:.4f}")
    cells = []
    done: dict[str, tuple] = {}
    for row in rows:
        cfg = cfg0.with_overrides(**ABLATION_CONFIGS[row])
        key = _settings_key(cfg)
        if key not in done:
            t1 = time.perf_counter()
            trace = NovelStepTrace()
            ckpt = train_novel(base_ckpt, manifest, volumes, cfg, trace=trace)
            report = evaluate(ckpt, manifest, volumes)
            vc = float(np.mean(trace.vc_seconds)) if trace.vc_seconds else 0.0
            done[key] = (report, vc)
            if progress:
                progress(f"seed {seed}: {row} {time.perf_counter() - t1:.1f}s, all Dice {report.all_mean:.4f}")
        report, vc = done[key]
        cells.append(AblationCell(row, seed, report, forgetting_delta(before, report).mean, vc, cfg.to_dict()))
    return before, cells


def _ablation_job(args):
    return _ablation_seed(*args)


def run_ablation(base_config: TrainConfig, seeds, rows=DEFAULT_ROWS, dataset=None, data_seed: int = 0,
                 out_dir=None, progress=None, workers: int = 1) -> AblationMatrix:
    """Train the base model once per seed, then each configured novel step.

    Rows whose resolved settings coincide (e.g. ``lwf+dis+vc+dw`` and the
    default sampling/ratio rows) are trained once and reported under each
    name. With ``workers > 1`` seeds run in separate processes; results are
    merged in seed order, so the matrix does not depend on scheduling.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    unknown = [r for r in rows if r not in ABLATION_CONFIGS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}")
    if dataset is None:
        dataset = make_dataset(seed=data_seed)
    manifest, volumes = dataset
    if workers > 1 and len(seeds) > 1:
        jobs = [(base_config, s, tuple(rows), manifest, volumes) for s in seeds]
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            results = list(pool.map(_ablation_job, jobs))
        if progress:
            for s, (before, _) in zip(seeds, results):
                progress(f"seed {s}: base Dice {before.base_mean:.4f}")
    else:
        results = [_ablation_seed(base_config, s, rows, manifest, volumes, progress) for s in seeds]
    matrix = AblationMatrix()
    for s, (before, cells) in zip(seeds, results):
        matrix.base_reports[s] = before
        matrix.cells.extend(cells)
    matrix.cells.sort(key=lambda c: (rows.index(c.config), seeds.index(c.seed)))
    if out_dir is not None:
        write_ablation(matrix, out_dir)
    return matrix


def write_ablation(matrix: AblationMatrix, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(matrix.to_csv())
    (out / "ablation_summary.csv").write_text(matrix.summary_csv())
    sweep = matrix.ratio_sweep_csv()
    if sweep.count("\n") > 1:
        (out / "ratio_sweep.csv").write_text(sweep)
    return out


def overlap_histogram_csv(fractions) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("labels_per_voxel", "fraction"))
    for k, f in enumerate(fractions, start=1):
        w.writerow([k, f"{f:.12f}"])
    return buf.getvalue()
