"""Synthetic multi-label "tract" volumes.

Every class is a tube of voxels around a smooth centerline. Classes are laid
out in bundles that share a trunk and fan out near their ends, so nearby
classes overlap heavily, the way real fiber tracts do. The nine input channels
mimic fODF peaks: three peak slots of three direction components each.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .container import FormatError, load_tensor, save_tensor

log = logging.getLogger(__name__)

ROLES = ("base-train", "novel-oneshot", "validation", "test")
N_PEAKS = 3
IN_CHANNELS = 3 * N_PEAKS


class GenerationError(ValueError):
    pass


class EmptyHistogramError(ValueError):
    pass


@dataclass(frozen=True)
class Preset:
    name: str
    n_sets: int  # bundles of spatially close classes
    radius: float  # tube radius as a fraction of the extent
    trunk_spread: float  # class offset from the bundle trunk at mid-curve, fraction of extent
    fan_spread: float  # class offset at the curve ends, fraction of extent
    center_pull: float  # how strongly bundle midpoints gather at the volume centre (0..1)
    jitter: float  # per-subject control-point jitter, fraction of extent
    noise: float  # input noise std
    min_multi: float  # declared target: fraction of labeled voxels with >= 2 labels
    min_three: float  # declared target: fraction with >= 3 labels


PRESETS = {
    "hcp-like": Preset("hcp-like", n_sets=4, radius=0.12, trunk_spread=0.01, fan_spread=0.035,
                       center_pull=0.8, jitter=0.02, noise=0.05, min_multi=0.60, min_three=0.20),
    "moderate": Preset("moderate", n_sets=6, radius=0.12, trunk_spread=0.03, fan_spread=0.07,
                       center_pull=0.8, jitter=0.02, noise=0.05, min_multi=0.40, min_three=0.15),
    "sparse": Preset("sparse", n_sets=6, radius=0.08, trunk_spread=0.25, fan_spread=0.3,
                     center_pull=0.0, jitter=0.02, noise=0.05, min_multi=0.0, min_three=0.0),
}


@dataclass(frozen=True)
class TractSpec:
    class_id: int
    set_id: int
    control: np.ndarray  # [3, 3] quadratic Bezier control points (voxel coordinates)
    radius: float


@dataclass
class MultiLabelVolume:
    input: np.ndarray  # [C_in, D, H, W] float32
    labels: np.ndarray  # [C_lab, D, H, W] uint8
    subject_id: str = "subject"

    def __post_init__(self):
        if self.input.shape[1:] != self.labels.shape[1:]:
            raise ValueError(f"input {self.input.shape} and labels {self.labels.shape} extents differ")
        if self.labels.dtype != np.uint8 or self.labels.max(initial=0) > 1:
            raise ValueError("labels must be binary uint8")


@dataclass
class DatasetManifest:
    subjects: list[dict]  # {"id": str, "role": str}
    base_classes: list[int]
    novel_classes: list[int]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel class sets overlap")
        roles = [s["role"] for s in self.subjects]
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown subject roles {sorted(unknown)}")
        if roles.count("novel-oneshot") != 1:
            raise ValueError("exactly one novel-oneshot subject is required")

    def ids(self, role: str) -> list[str]:
        return [s["id"] for s in self.subjects if s["role"] == role]


# ---------------------------------------------------------------- generation

def _bezier(control: np.ndarray, n: int):
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2 = control
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    tan = 2 * (1 - t) * (p1 - p0) + 2 * t * (p2 - p1)
    tan /= np.maximum(np.linalg.norm(tan, axis=1, keepdims=True), 1e-12)
    return pts, tan


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def tract_layout(class_count: int, extent, preset: Preset, anatomy_seed: int = 0) -> list[TractSpec]:
    """The shared tract anatomy of a dataset: class centerlines grouped in bundles."""
    ext = np.asarray(extent, dtype=float)
    size = float(ext.min())
    rng = np.random.default_rng([anatomy_seed, 7919])
    n_sets = max(1, min(preset.n_sets, class_count))
    centre = (ext - 1) / 2
    specs = [c % n_sets for c in range(class_count)]
    trunks = []
    for s in range(n_sets):
        direction = _random_unit(rng)
        mid = centre + (1 - preset.center_pull) * rng.uniform(-0.3, 0.3, 3) * size
        half = 0.45 * size
        bend = rng.normal(scale=0.1 * size, size=3)
        trunks.append(np.stack([mid - half * direction, mid + bend, mid + half * direction]))
    out = []
    for c, s in enumerate(specs):
        trunk = trunks[s]
        offs = np.stack([
            rng.normal(scale=preset.fan_spread * size, size=3),
            rng.normal(scale=preset.trunk_spread * size, size=3),
            rng.normal(scale=preset.fan_spread * size, size=3),
        ])
        control = np.clip(trunk + offs, 0, ext - 1)
        radius = preset.radius * size * rng.uniform(0.75, 1.25)
        out.append(TractSpec(c, s, control, max(1.0, radius)))
    return out


def rasterize(specs: list[TractSpec], extent, rng=None, jitter: float = 0.0, samples: int = 96):
    """Binary masks [C, D, H, W] and per-voxel unit tangents [C, 3, D, H, W]."""
    ext = tuple(int(e) for e in extent)
    grid = np.stack(np.meshgrid(*[np.arange(e, dtype=float) for e in ext], indexing="ij"), -1).reshape(-1, 3)
    size = float(min(ext))
    masks = np.zeros((len(specs), *ext), dtype=np.uint8)
    tangents = np.zeros((len(specs), 3, *ext), dtype=np.float64)
    for k, spec in enumerate(specs):
        control = spec.control
        radius = spec.radius
        if rng is not None and jitter > 0:
            control = np.clip(control + rng.normal(scale=jitter * size, size=control.shape), 0, np.array(ext) - 1)
            radius = max(1.0, radius * (1 + rng.uniform(-0.1, 0.1)))
        pts, tan = _bezier(control, samples)
        d2 = (grid * grid).sum(1)[:, None] - 2.0 * grid @ pts.T + (pts * pts).sum(1)[None, :]
        nearest = np.argmin(d2, axis=1)
        inside = d2[np.arange(len(grid)), nearest] <= radius * radius
        masks[k] = inside.reshape(ext)
        tangents[k] = (tan[nearest] * inside[:, None]).T.reshape(3, *ext)
    return masks, tangents


def peak_channels(masks: np.ndarray, tangents: np.ndarray) -> np.ndarray:
    """Fold per-class directions into three peak slots (9 channels).

    Classes are visited in id order; the first three at a voxel take slots
    0..2, any further class is added (sign-aligned) to the slot it is most
    parallel to.
    """
    ext = masks.shape[1:]
    slots = np.zeros((N_PEAKS, 3, *ext))
    count = np.zeros(ext, dtype=np.int64)
    for c in range(masks.shape[0]):
        m = masks[c].astype(bool)
        v = tangents[c]
        for k in range(N_PEAKS):
            sel = m & (count == k)
            slots[k][:, sel] = v[:, sel]
        full = m & (count >= N_PEAKS)
        if full.any():
            cos = np.einsum("kd...,d...->k...", slots[:, :, full], v[:, full])
            norms = np.linalg.norm(slots[:, :, full], axis=1) + 1e-12
            best = np.argmax(np.abs(cos) / norms, axis=0)
            sign = np.sign(cos[best, np.arange(best.size)])
            sign[sign == 0] = 1
            idx = np.flatnonzero(full.reshape(-1))
            flat = slots.reshape(N_PEAKS, 3, -1)
            for k in range(N_PEAKS):
                pick = best == k
                flat[k][:, idx[pick]] += sign[pick] * v.reshape(3, -1)[:, idx[pick]]
        count += m
    return slots.reshape(IN_CHANNELS, *ext)


def _targets_met(stats: np.ndarray, preset: Preset) -> tuple[bool, str]:
    multi = float(stats[1:].sum())
    three = float(stats[2:].sum())
    ok = multi >= preset.min_multi and three >= preset.min_three
    msg = (f"preset {preset.name!r}: multi-label fraction {multi:.3f} (target >= {preset.min_multi}), "
           f">=3-label fraction {three:.3f} (target >= {preset.min_three})")
    return ok, msg


def generate_subject(seed: int, extent=32, class_count: int = 12, preset: str | Preset = "hcp-like",
                     anatomy_seed: int = 0, subject_id: str | None = None,
                     check_targets: bool = True) -> MultiLabelVolume:
    """Generate one subject. Deterministic in (seed, anatomy_seed, parameters)."""
    if class_count < 2:
        raise GenerationError("class_count must be >= 2")
    ext = (extent,) * 3 if np.isscalar(extent) else tuple(extent)
    if min(ext) < 16:
        raise GenerationError(f"extent {ext} too small: need >= 16 per axis")
    p = PRESETS[preset] if isinstance(preset, str) else preset
    specs = tract_layout(class_count, ext, p, anatomy_seed)
    rng = np.random.default_rng([seed, 104729])
    masks, tangents = rasterize(specs, ext, rng, p.jitter)
    if not masks.any():
        raise GenerationError(f"preset {p.name!r} produced no labeled voxels at extent {ext}")
    if check_targets:
        ok, msg = _targets_met(overlap_stats(masks), p)
        if not ok:
            raise GenerationError(f"{msg} unreachable at extent {ext} with {class_count} classes")
    x = peak_channels(masks, tangents)
    x = x + rng.normal(scale=p.noise, size=x.shape)
    return MultiLabelVolume(x.astype(np.float32), masks, subject_id or f"s{seed}")


def class_sets(class_count: int, extent, preset: str | Preset = "hcp-like", anatomy_seed: int = 0) -> list[list[int]]:
    """Classes grouped by the bundle (spatially close centerlines) they belong to."""
    p = PRESETS[preset] if isinstance(preset, str) else preset
    ext = (extent,) * 3 if np.isscalar(extent) else tuple(extent)
    groups: dict[int, list[int]] = {}
    for spec in tract_layout(class_count, ext, p, anatomy_seed):
        groups.setdefault(spec.set_id, []).append(spec.class_id)
    return [groups[k] for k in sorted(groups)]


def split_classes(sets: list[list[int]], n_novel: int, seed: int) -> tuple[list[int], list[int]]:
    """Assign whole sets to novel until ``n_novel`` classes are chosen."""
    rng = np.random.default_rng([seed, 31])
    order = rng.permutation(len(sets))
    novel: list[int] = []
    for i in order:
        if len(novel) >= n_novel:
            break
        novel.extend(sets[i])
    novel = sorted(novel[:n_novel])
    base = sorted(c for s in sets for c in s if c not in novel)
    return base, novel


def make_dataset(preset: str = "hcp-like", class_count: int = 12, extent=32, n_base_train: int = 12,
                 n_validation: int = 0, n_test: int = 4, n_novel: int = 4, seed: int = 0):
    """Generate a full dataset. Returns (manifest, {subject_id: volume})."""
    if not 1 <= n_novel < class_count:
        raise GenerationError("n_novel must be in [1, class_count)")
    base, novel = split_classes(class_sets(class_count, extent, preset, seed), n_novel, seed)
    roles = (["base-train"] * n_base_train + ["novel-oneshot"] + ["validation"] * n_validation
             + ["test"] * n_test)
    child = np.random.SeedSequence(seed).generate_state(len(roles))
    subjects, volumes = [], {}
    for i, (role, s) in enumerate(zip(roles, child)):
        sid = f"sub{i:03d}"
        volumes[sid] = generate_subject(int(s), extent, class_count, preset, anatomy_seed=seed,
                                        subject_id=sid, check_targets=(i == 0))
        subjects.append({"id": sid, "role": role, "seed": int(s)})
    params = {"preset": preset, "class_count": class_count, "extent": extent,
              "n_base_train": n_base_train, "n_validation": n_validation, "n_test": n_test,
              "n_novel": n_novel}
    return DatasetManifest(subjects, base, novel, seed, params), volumes


# ---------------------------------------------------------------- statistics

def overlap_stats(labels: np.ndarray) -> np.ndarray:
    """Fraction of labeled voxels carrying exactly k labels, for k = 1..C.

    Entry ``k - 1`` of the result is the fraction for k labels.
    """
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    counts = labels.reshape(labels.shape[0], -1).sum(axis=0)
    counts = counts[counts > 0]
    if counts.size == 0:
        raise EmptyHistogramError("no labeled voxels")
    hist = np.bincount(counts, minlength=labels.shape[0] + 1)[1:]
    return hist / counts.size


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    zoom: float = 1.0
    flip_axis: int | None = None  # spatial axis 0..2
    shift: tuple[float, float] = (0.0, 0.0)
    noise_var: float = 0.0

    @property
    def is_spatial_identity(self) -> bool:
        return self.angle == 0 and self.zoom == 1 and self.shift == (0.0, 0.0)


def sample_augment_params(rng: np.random.Generator, extent) -> AugmentParams:
    """Draw augmentation magnitudes; shifts scale with extent / 144."""
    ext = (extent,) * 3 if np.isscalar(extent) else tuple(extent)
    scale = min(ext[1:]) / 144.0
    flip = int(rng.integers(0, 3)) if rng.random() < 0.5 else None
    return AugmentParams(
        angle=float(rng.uniform(-np.pi / 4, np.pi / 4)),
        zoom=float(rng.uniform(0.9, 1.5)),
        flip_axis=flip,
        shift=(float(rng.uniform(-10, 10) * scale), float(rng.uniform(-10, 10) * scale)),
        noise_var=float(rng.uniform(0.0, 0.05)),
    )


def flip(volume: MultiLabelVolume, axis: int) -> MultiLabelVolume:
    """Mirror along a spatial axis; the peak component along that axis changes sign."""
    x = np.flip(volume.input, axis + 1).copy()
    x[axis::3] *= -1
    return MultiLabelVolume(x, np.flip(volume.labels, axis + 1).copy(), volume.subject_id)


def _affine(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    # rotation + zoom in the (H, W) plane about the centre, then shift
    c, s = np.cos(params.angle), np.sin(params.angle)
    inv = np.array([[1, 0, 0], [0, c, s], [0, -s, c]]) / np.array([1, params.zoom, params.zoom])[:, None]
    inv[0, 0] = 1.0
    centre = (np.array(arr.shape[1:]) - 1) / 2
    shift = np.array([0.0, *params.shift])
    offset = centre - inv @ (centre + shift)
    out = np.empty_like(arr)
    for ch in range(arr.shape[0]):
        out[ch] = ndimage.affine_transform(arr[ch], inv, offset=offset, order=order, mode="constant", cval=0.0)
    return out


def apply_augment(volume: MultiLabelVolume, params: AugmentParams, rng: np.random.Generator | None = None):
    x, y = volume.input, volume.labels
    if not params.is_spatial_identity:
        x = _affine(x.astype(np.float64), params, order=1).astype(volume.input.dtype)
        y = (_affine(y, params, order=0) > 0).astype(np.uint8)
    out = MultiLabelVolume(x, y, volume.subject_id)
    if params.flip_axis is not None:
        out = flip(out, params.flip_axis)
    if params.noise_var > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = rng.normal(0.0, np.sqrt(params.noise_var), size=out.input.shape)
        out = MultiLabelVolume((out.input + noise).astype(volume.input.dtype), out.labels, volume.subject_id)
    return out


def augment(volume: MultiLabelVolume, seed) -> MultiLabelVolume:
    rng = np.random.default_rng(seed)
    params = sample_augment_params(rng, volume.input.shape[1:])
    return apply_augment(volume, params, rng)


# ---------------------------------------------------------------- persistence

def save_dataset(manifest: DatasetManifest, volumes: dict[str, MultiLabelVolume], directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for s in manifest.subjects:
        vol = volumes[s["id"]]
        sub = root / s["id"]
        sub.mkdir(exist_ok=True)
        save_tensor(sub / "input.t", vol.input)
        save_tensor(sub / "labels.t", vol.labels)
    (root / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return root


def load_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return DatasetManifest(**raw)


def load_dataset(directory) -> tuple[DatasetManifest, dict[str, MultiLabelVolume]]:
    root = Path(directory)
    manifest = load_manifest(root)
    volumes = {}
    for s in manifest.subjects:
        x = load_tensor(root / s["id"] / "input.t")
        y = load_tensor(root / s["id"] / "labels.t")
        if x.shape[1:] != y.shape[1:]:
            raise FormatError(f"{root / s['id']}: input and labels extents differ")
        volumes[s["id"]] = MultiLabelVolume(x, y, s["id"])
    return manifest, volumes
