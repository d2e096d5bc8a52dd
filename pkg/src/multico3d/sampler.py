"""Region partition by boundary distance, contrastive sample drawing, and
loss-sorted batch subset selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)

STRATEGIES = ("random", "balanced", "balanced+hard")
RATIOS = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))


def squared_edt(target: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every voxel to the nearest True
    voxel of ``target`` (inf when ``target`` is empty).

    One separable pass per axis; each pass is a dense 1D min-plus transform
    f'(x) = min_i (x - i)^2 + f(i).
    """
    target = np.asarray(target, dtype=bool)
    f = np.where(target, 0.0, np.inf)
    for axis in range(f.ndim):
        n = f.shape[axis]
        pos = np.arange(n, dtype=float)
        sq = (pos[:, None] - pos[None, :]) ** 2  # [x, i]
        g = np.moveaxis(f, axis, -1)
        g = np.min(g[..., None, :] + sq, axis=-1)
        f = np.moveaxis(g, -1, axis)
    return f


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Distance of each voxel to the nearest voxel carrying the opposite label."""
    mask = np.asarray(mask, dtype=bool)
    inside = squared_edt(~mask)
    outside = squared_edt(mask)
    return np.sqrt(np.where(mask, inside, outside))


@dataclass
class RegionPartition:
    inner: np.ndarray  # flat voxel indices
    outer: np.ndarray
    background: np.ndarray
    theta: float


def partition_regions(mask: np.ndarray, theta: float = 2.0) -> RegionPartition:
    if theta < 1:
        raise ValueError("theta must be >= 1")
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    m = mask.astype(bool).reshape(-1)
    d = boundary_distance(mask).reshape(-1)
    near = d <= theta
    return RegionPartition(
        inner=np.flatnonzero(m & ~near),
        outer=np.flatnonzero(near),
        background=np.flatnonzero(~m & ~near),
        theta=theta,
    )


@dataclass
class SampleSet:
    """Per anchor: its class, voxel index, and member voxel indices.

    ``anchor_labels`` [A, K] and ``member_labels`` [A, M, K] hold the binary
    multi-label vector of each sampled voxel.
    """
    class_ids: np.ndarray  # [A]
    anchors: np.ndarray  # [A]
    members: np.ndarray  # [A, M]
    anchor_labels: np.ndarray
    member_labels: np.ndarray
    skipped: dict

    def __len__(self):
        return len(self.anchors)


def _take(rng, pool, k, what, cls):
    if pool.size >= k:
        return rng.choice(pool, size=k, replace=False)
    log.debug("class %d: %s region has %d voxels < %d, sampling with replacement", cls, what, pool.size, k)
    return rng.choice(pool, size=k, replace=True)


def draw_samples(labels: np.ndarray, n_s: int = 5, seed=0, strategy: str = "balanced+hard",
                 theta: float = 2.0, partitions: dict | None = None, classes=None) -> SampleSet:
    """Draw anchors and contrastive samples from a multi-label image.

    ``labels`` is [K, *spatial] binary. One anchor per class present in the
    image, plus ``n_s`` draws per region (see ``strategy``). Classes whose
    required region is empty are skipped and reported in ``skipped``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    labels = np.asarray(labels)
    K = labels.shape[0]
    flat = labels.reshape(K, -1)
    n_vox = flat.shape[1]
    seed = tuple(np.atleast_1d(seed).tolist())
    classes = range(K) if classes is None else classes
    out_cls, out_anchor, out_members, skipped = [], [], [], {}
    for c in classes:
        in_mask = np.flatnonzero(flat[c])
        if in_mask.size == 0:
            skipped[c] = "empty mask"
            continue
        rng = np.random.default_rng([*seed, c])
        if strategy == "balanced+hard":
            part = partitions[c] if partitions is not None and c in partitions else \
                partition_regions(labels[c], theta)
            missing = [n for n in ("inner", "outer", "background") if getattr(part, n).size == 0]
            if missing:
                skipped[c] = f"empty {'/'.join(missing)} region"
                log.debug("class %d skipped: %s", c, skipped[c])
                continue
            anchor = rng.choice(part.inner)
            inner = part.inner[part.inner != anchor]
            if inner.size == 0:
                skipped[c] = "inner region holds only the anchor"
                continue
            members = np.concatenate([
                _take(rng, inner, n_s, "inner", c),
                _take(rng, part.outer, n_s, "outer", c),
                _take(rng, part.background, n_s, "background", c),
            ])
        elif strategy == "balanced":
            out_mask = np.flatnonzero(flat[c] == 0)
            anchor = rng.choice(in_mask)
            rest = in_mask[in_mask != anchor]
            if rest.size == 0 or out_mask.size == 0:
                skipped[c] = "empty in-mask or out-of-mask pool"
                continue
            members = np.concatenate([_take(rng, rest, n_s, "in-mask", c),
                                      _take(rng, out_mask, n_s, "out-of-mask", c)])
        else:
            anchor = rng.choice(in_mask)
            pool = np.delete(np.arange(n_vox), anchor)
            members = _take(rng, pool, 3 * n_s, "image", c)
        out_cls.append(c)
        out_anchor.append(int(anchor))
        out_members.append(members)
    A = len(out_anchor)
    M = out_members[0].size if A else 0
    anchors = np.asarray(out_anchor, dtype=np.intp)
    members = np.asarray(out_members, dtype=np.intp).reshape(A, M)
    return SampleSet(
        class_ids=np.asarray(out_cls, dtype=np.intp),
        anchors=anchors,
        members=members,
        anchor_labels=flat[:, anchors].T.astype(np.float64),
        member_labels=np.moveaxis(flat[:, members], 0, -1).astype(np.float64).reshape(A, M, K),
        skipped=skipped,
    )


@dataclass
class BatchSelection:
    losses: np.ndarray
    order: np.ndarray  # element indices sorted by loss (stable)
    selected: np.ndarray  # element indices, in sorted order


def parse_ratio(ratio) -> Fraction:
    r = Fraction(ratio).limit_denominator(64) if not isinstance(ratio, str) else Fraction(ratio)
    if r not in RATIOS:
        raise ValueError(f"ratio {ratio} not in {[str(x) for x in RATIOS]}")
    return r


def select_batch_subset(losses, ratio=Fraction(1, 8)) -> BatchSelection:
    """Evenly spaced picks over the loss-sorted batch: sorted positions
    floor((i + 0.5) * B / k) for i < k = ceil(B * ratio)."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    r = parse_ratio(ratio)
    B = losses.size
    k = math.ceil(B * r)
    order = np.argsort(losses, kind="stable")
    pos = [((2 * i + 1) * B) // (2 * k) for i in range(k)]
    return BatchSelection(losses, order, order[pos])
