"""Two-step incremental training: base step, then one-shot novel step."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import diffkernel as dk
from .losses import (LOSS_NAMES, LossWeightState, distillation_loss, segmentation_loss, total_loss,
                     voxel_contrast_loss)
from .model import Checkpoint, ModelConfig, SegModel, input_slices, lwf_init, volume_slices
from .sampler import STRATEGIES, draw_samples, parse_ratio, partition_regions, select_batch_subset
from .synthgen import AugmentParams, DatasetManifest, MultiLabelVolume, sample_augment_params

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_seg", "L_dis", "L_VC", "w1", "w2", "w3", "total")
COLUMN = {"seg": "L_seg", "dis": "L_dis", "vc": "L_VC"}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.002
    novel_lr: float | None = None  # None = lr
    optimizer: str = "adamax"
    base_epochs: int = 40
    novel_epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    tau: float = 1.0
    n_s: int = 5
    theta: float = 2.0
    ratio: str = "1/8"
    strategy: str = "balanced+hard"
    use_dis: bool = True
    use_vc: bool = True
    use_dw: bool = True
    s_init: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalize_embeddings: bool = False
    augment_base: bool = True
    augment_oneshot: bool = False
    base_slices_per_epoch: int = 0  # 0 = every slice of every subject
    novel_slices_per_epoch: int = 0
    widths: tuple[int, ...] = (16, 32)
    skips: bool = True
    dropout: float = 0.4
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.s_init = tuple(float(v) for v in self.s_init)
        if self.novel_lr is not None and self.novel_lr <= 0:
            raise ConfigError("novel_lr must be > 0")
        if self.lr <= 0 or self.batch_size < 1 or self.base_epochs < 0 or self.novel_epochs < 0:
            raise ConfigError("rates and counts must be positive")
        if self.tau <= 0 or self.n_s < 1 or self.theta < 1:
            raise ConfigError("tau > 0, n_s >= 1 and theta >= 1 are required")
        if self.optimizer != "adamax":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        try:
            self.ratio = str(parse_ratio(self.ratio))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["s_init"] = list(self.s_init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def model_config(self, n_base: int, n_novel: int = 0) -> ModelConfig:
        return ModelConfig(widths=self.widths, n_base=n_base, n_novel=n_novel, dropout=self.dropout,
                           skips=self.skips, dtype=self.dtype)


PRESETS = {
    "paper": dict(base_epochs=200, novel_epochs=200, batch_size=48),
    "desk": dict(),
    "bench": dict(lr=0.01, novel_lr=0.005, normalize_embeddings=True, base_epochs=40, novel_epochs=40,
                  widths=(8, 16), augment_base=False,
                  base_slices_per_epoch=192, novel_slices_per_epoch=48),
}


def preset_config(name: str = "desk", **kw) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown config preset {name!r}")
    return TrainConfig(**{**PRESETS[name], **kw})


def read_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw


def resolve_config(path=None, preset: str | None = None, **overrides) -> TrainConfig:
    """Preset defaults, then the config file, then explicit overrides.

    ``preset`` (a flag) beats a ``"preset"`` key in the file; overrides that
    are None are ignored.
    """
    raw = read_config_file(path) if path else {}
    name = preset or raw.pop("preset", "desk")
    raw.pop("preset", None)
    unknown = set(raw) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    merged = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return preset_config(name, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    return resolve_config(path)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamax_step(params: list[dk.Parameter], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One Adamax update in place; parameters without a gradient see g = 0."""
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = lr / (1 - b1 ** state.t)
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
        m = state.m.get(p.name)
        u = state.u.get(p.name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        u = np.abs(g) if u is None else np.maximum(b2 * u, np.abs(g))
        state.m[p.name] = m
        state.u[p.name] = u
        p.value = (p.value - step * m / (u + state.eps)).astype(p.value.dtype)


# ---------------------------------------------------------------- slice batches

def _slice_table(volumes: list[MultiLabelVolume]):
    """(subject, axis, index) triples of every slice."""
    table = []
    for s, vol in enumerate(volumes):
        for axis in range(3):
            for i in range(vol.input.shape[axis + 1]):
                table.append((s, axis, i))
    return table


def _batches(table, batch_size, rng, limit=0):
    """Shuffle, optionally subsample, then emit single-axis batches in
    round-robin axis order."""
    order = rng.permutation(len(table))
    if limit:
        order = order[:limit]
    per_axis = {0: [], 1: [], 2: []}
    for k in order:
        per_axis[table[k][1]].append(k)
    chunks = {a: [v[i:i + batch_size] for i in range(0, len(v), batch_size)] for a, v in per_axis.items()}
    out = []
    while any(chunks.values()):
        for a in range(3):
            if chunks[a]:
                out.append(chunks[a].pop(0))
    return out


def _slice(vol: MultiLabelVolume, axis: int, i: int):
    x = input_slices(vol.input, axis)[i]
    y = volume_slices(vol.labels, axis)[i]
    return x, y


def augment_slice(x: np.ndarray, y: np.ndarray, params: AugmentParams, rng: np.random.Generator):
    """In-plane augmentation of one [C, H, W] slice and its labels."""
    if not params.is_spatial_identity:
        c, s = np.cos(params.angle), np.sin(params.angle)
        inv = np.array([[1.0, 0, 0], [0, c / params.zoom, s / params.zoom], [0, -s / params.zoom, c / params.zoom]])
        centre = np.array([0.0, (x.shape[1] - 1) / 2, (x.shape[2] - 1) / 2])
        offset = centre - inv @ (centre + np.array([0.0, *params.shift]))
        x = ndimage.affine_transform(x.astype(np.float64), inv, offset=offset, order=1, mode="constant")
        y = ndimage.affine_transform(y, inv, offset=offset, order=0, mode="constant")
    if params.flip_axis is not None:
        ax = 1 + params.flip_axis % 2
        x = np.flip(x, ax).copy()
        x[ax::3] *= -1  # in-plane component j sits at offset 1 + j of each peak
        y = np.flip(y, ax)
    if params.noise_var > 0:
        x = x + rng.normal(0.0, np.sqrt(params.noise_var), size=x.shape)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def _assemble(volumes, table, idx, classes, dtype, augment, rng):
    xs, ys = [], []
    for k in idx:
        s, axis, i = table[k]
        x, y = _slice(volumes[s], axis, i)
        y = y[classes]
        if augment:
            x, y = augment_slice(x, y, sample_augment_params(rng, (1, *x.shape[1:])), rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs).astype(dtype), np.stack(ys).astype(np.uint8)


class MetricLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, row: dict):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] if c == "epoch" else f"{row[c]:.10g}" for c in METRIC_COLUMNS])


def _check_finite(value: float, what: str, epoch: int, batch: int):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------- base step

def train_base(manifest: DatasetManifest, volumes: dict[str, MultiLabelVolume], config: TrainConfig,
               metrics_path=None) -> Checkpoint:
    """Train encoder + base decoder with BCE over the base classes."""
    ids = manifest.ids("base-train")
    if not ids:
        raise ConfigError("dataset has no base-train subjects")
    vols = [volumes[i] for i in ids]
    classes = list(manifest.base_classes)
    model = SegModel(config.model_config(len(classes)), seed=config.seed)
    params = model.trainable()
    opt = OptimizerState()
    table = _slice_table(vols)
    metrics = MetricLog(metrics_path)
    for epoch in range(config.base_epochs):
        rng = np.random.default_rng([config.seed, epoch, 1])
        seg_sum, n = 0.0, 0
        for b, idx in enumerate(_batches(table, config.batch_size, rng, config.base_slices_per_epoch)):
            x, y = _assemble(vols, table, idx, classes, config.dtype, config.augment_base, rng)
            base, _, _ = model.forward(x, rng=rng, heads=("base",))
            loss = segmentation_loss(base, y)
            _check_finite(loss.item(), "L_seg", epoch, b)
            grads = dk.backward(loss)
            adamax_step(params, grads, opt, config.lr)
            seg_sum += loss.item()
            n += 1
        mean = seg_sum / max(n, 1)
        metrics.append(dict(epoch=epoch, L_seg=mean, L_dis=0.0, L_VC=0.0, w1=1.0, w2=1.0, w3=1.0, total=mean))
        log.info("base epoch %d: L_seg %.5f", epoch, mean)
    return Checkpoint.of(model, step=0, seed=config.seed, epoch=config.base_epochs,
                         base_classes=classes, config=config.to_dict(), metrics=_summary(metrics))


def _summary(metrics: MetricLog) -> list[dict]:
    return [{k: (round(v, 10) if isinstance(v, float) else v) for k, v in r.items()} for r in metrics.rows]


# ---------------------------------------------------------------- novel step

@dataclass
class NovelStepTrace:
    """Diagnostics of one novel-step run."""
    vc_seconds: list[float] = field(default_factory=list)  # per epoch
    vc_elements: list[int] = field(default_factory=list)  # per batch
    batch_sizes: list[int] = field(default_factory=list)
    graph_ops: set = field(default_factory=set)  # union over all batches


def train_novel(base_ckpt: Checkpoint, manifest: DatasetManifest, volumes: dict[str, MultiLabelVolume],
                config: TrainConfig, metrics_path=None, trace: NovelStepTrace | None = None) -> Checkpoint:
    """One-shot novel step on the single novel-oneshot subject."""
    import time

    if base_ckpt is None:
        raise ConfigError("a base checkpoint is required")
    ids = manifest.ids("novel-oneshot")
    if len(ids) != 1:
        raise ConfigError("exactly one novel-oneshot subject is required")
    base_classes, novel_classes = list(manifest.base_classes), list(manifest.novel_classes)
    base_model = base_ckpt.build()
    if base_model.config.n_base != len(base_classes):
        raise ConfigError("base checkpoint heads do not match the dataset's base classes")
    frozen, model = lwf_init(base_model, len(novel_classes), seed=config.seed)
    frozen_state = {k: p.value.copy() for k, p in frozen.params.items()}
    vol = volumes[ids[0]]
    table = _slice_table([vol])
    # frozen-model targets are fixed: precompute per slice
    xs = np.stack([_slice(vol, a, i)[0] for _, a, i in table]).astype(config.dtype)
    y_novel = np.stack([_slice(vol, a, i)[1][novel_classes] for _, a, i in table])
    z_old = frozen.predict(xs)  # [S, m, H, W]
    pseudo = (z_old >= 0.5).astype(np.uint8)
    multi = np.concatenate([pseudo, y_novel], axis=1)  # label vectors over m + n classes
    partitions: dict = {}

    state = LossWeightState.create(config.s_init, dtype=config.dtype) if config.use_dw else None
    params = model.trainable() + ([state.s] if state is not None else [])
    opt = OptimizerState()
    metrics = MetricLog(metrics_path)
    trace = trace if trace is not None else NovelStepTrace()
    ratio = Fraction(config.ratio)
    for epoch in range(config.novel_epochs):
        rng = np.random.default_rng([config.seed, epoch, 2])
        sums = dict(seg=0.0, dis=0.0, vc=0.0, total=0.0)
        n = 0
        vc_time = 0.0
        for b, idx in enumerate(_batches(table, config.batch_size, rng, config.novel_slices_per_epoch)):
            idx = np.asarray(idx)
            x, y, zo, ml = xs[idx], y_novel[idx], z_old[idx], multi[idx]
            if config.augment_oneshot:
                x, y, zo, ml = _augment_oneshot(x, y, zo, ml, rng)
            base, novel, emb = model.forward(x, rng=rng, heads=("base", "novel") if config.use_dis else ("novel",))
            seg_e = segmentation_loss(novel, y, per_element=True)
            comps = {"seg": dk.mean(seg_e)}
            sort_key = seg_e.value.astype(np.float64)
            if config.use_dis:
                dis_e = distillation_loss(zo, base, per_element=True)
                comps["dis"] = dk.mean(dis_e)
                sort_key = sort_key + dis_e.value
            for k, c in comps.items():
                _check_finite(c.item(), COLUMN[k], epoch, b)
            if config.use_vc:
                t0 = time.perf_counter()
                sel = select_batch_subset(sort_key, ratio).selected
                trace.vc_elements.append(int(sel.size))
                comps["vc"] = _vc_term(emb, ml, idx, sel, partitions, config, epoch, b)
                vc_time += time.perf_counter() - t0
            loss = total_loss(comps, state)
            _check_finite(loss.item(), "total loss", epoch, b)
            trace.graph_ops |= dk.graph_ops(loss)
            trace.batch_sizes.append(int(idx.size))
            grads = dk.backward(loss)
            adamax_step(params, grads, opt, config.novel_lr or config.lr)
            for k in ("seg", "dis", "vc"):
                sums[k] += comps[k].item() if k in comps else 0.0
            sums["total"] += loss.item()
            n += 1
        trace.vc_seconds.append(vc_time)
        w = state.weights if state is not None else np.ones(3)
        row = dict(epoch=epoch, L_seg=sums["seg"] / n, L_dis=sums["dis"] / n, L_VC=sums["vc"] / n,
                   w1=float(w[0]), w2=float(w[1]), w3=float(w[2]), total=sums["total"] / n)
        metrics.append(row)
        shown = " ".join(f"{COLUMN[k]} {row[COLUMN[k]]:.5f}" for k in comps)
        log.info("novel epoch %d: %s total %.5f", epoch, shown, row["total"])
    for k, p in frozen.params.items():
        if not np.array_equal(p.value, frozen_state[k]):
            raise RuntimeError(f"frozen base parameter {k} changed during the novel step")
    meta = dict(seed=config.seed, epoch=config.novel_epochs, base_classes=base_classes,
                novel_classes=novel_classes, config=config.to_dict(), metrics=_summary(metrics))
    if state is not None:
        meta["loss_weights_s"] = [float(v) for v in state.s.value]
    return Checkpoint.of(model, step=1, **meta)


def _augment_oneshot(x, y, zo, ml, rng):
    out = [[], [], [], []]
    for k in range(x.shape[0]):
        p = sample_augment_params(rng, (1, *x.shape[2:]))
        stacked = np.concatenate([y[k], ml[k]]).astype(np.uint8)
        xa, ya = augment_slice(x[k], stacked, p, rng)
        za, _ = augment_slice(zo[k], stacked[:0], replace(p, noise_var=0.0), rng)
        out[0].append(xa)
        out[1].append(ya[: y.shape[1]])
        out[2].append(np.clip(za, 0.0, 1.0))
        out[3].append(ya[y.shape[1]:])
    return (np.stack(out[0]).astype(x.dtype), np.stack(out[1]), np.stack(out[2]).astype(zo.dtype),
            np.stack(out[3]))


def _vc_term(emb: dk.Node, multi: np.ndarray, slice_ids, selected, partitions, config: TrainConfig,
             epoch: int, batch: int) -> dk.Node:
    """L_VC over the selected batch elements."""
    B, E, H, W = emb.shape
    HW = H * W
    K = multi.shape[1]
    anchors, members = [], []
    for b in selected:
        sid = int(slice_ids[b])
        parts = None
        if config.strategy == "balanced+hard" and not config.augment_oneshot:
            parts = {}
            for c in range(K):
                key = (sid, c)
                if key not in partitions:
                    partitions[key] = partition_regions(multi[b, c], config.theta)
                parts[c] = partitions[key]
        ss = draw_samples(multi[b], config.n_s, seed=(config.seed, epoch, batch, sid), strategy=config.strategy,
                          theta=config.theta, partitions=parts)
        if len(ss):
            anchors.append(ss.anchors + b * HW)
            members.append(ss.members + b * HW)
    if not anchors:
        return dk.const(np.zeros((), dtype=emb.dtype))
    anchors = np.concatenate(anchors)
    members = np.concatenate(members)
    rows = np.unique(np.concatenate([anchors, members.reshape(-1)]))
    local = {int(r): i for i, r in enumerate(rows)}
    flat = dk.reshape(dk.transpose(emb, (0, 2, 3, 1)), (B * HW, E))
    z = dk.gather_rows(flat, rows)
    labels = np.moveaxis(multi, 1, -1).reshape(B * HW, K)[rows]
    a_loc = np.array([local[int(r)] for r in anchors])
    m_loc = np.vectorize(lambda r: local[int(r)])(members)
    return voxel_contrast_loss(z, labels, a_loc, m_loc, tau=config.tau, normalize=config.normalize_embeddings)
