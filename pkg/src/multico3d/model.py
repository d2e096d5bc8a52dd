"""Shared-encoder segmentation network with a base head and a novel head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .container import FormatError, read_tensor, write_tensor
from .diffkernel import DimensionError, Parameter

CKPT_MAGIC = b"MC3DCKPT"
CKPT_VERSION = 1
COMPONENTS = ("encoder", "decoder_base", "decoder_novel")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 9
    widths: tuple[int, ...] = (16, 32)
    n_base: int = 8
    n_novel: int = 0
    dropout: float = 0.4
    skips: bool = True
    dtype: str = "float64"

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def glorot(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SegModel:
    """Encoder E, base decoder D_b and (optionally) novel decoder D_n.

    Parameters live in ``params`` keyed by dotted names whose first segment is
    the component they belong to.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng([seed, 17])
        for name, shape in self.param_shapes().items():
            if params is not None:
                value = params[name]
            elif name.endswith(".b"):
                value = np.zeros(shape, dtype=config.dtype)
            else:
                value = glorot(rng, shape, config.dtype)
            self.params[name] = Parameter(name, np.asarray(value, dtype=config.dtype))

    # ------------------------------------------------------------ structure

    def param_shapes(self) -> dict[str, tuple]:
        cfg = self.config
        shapes = {}
        c_in = cfg.in_channels
        for i, w in enumerate(cfg.widths):
            shapes[f"encoder.{i}.w"] = (w, c_in, 3, 3)
            shapes[f"encoder.{i}.b"] = (w,)
            c_in = w
        heads = [("decoder_base", cfg.n_base)]
        if cfg.n_novel > 0:
            heads.append(("decoder_novel", cfg.n_novel))
        for comp, n_out in heads:
            c = cfg.widths[-1]
            for j in range(cfg.depth):
                level = cfg.depth - 1 - j
                out_c = cfg.widths[level - 1] if level > 0 else cfg.widths[0]
                skip_c = cfg.widths[level] if cfg.skips else 0
                shapes[f"{comp}.{j}.w"] = (out_c, c + skip_c, 3, 3)
                shapes[f"{comp}.{j}.b"] = (out_c,)
                c = out_c
            shapes[f"{comp}.head.w"] = (n_out, c, 1, 1)
            shapes[f"{comp}.head.b"] = (n_out,)
        return shapes

    def component(self, name: str) -> dict[str, Parameter]:
        return {k: p for k, p in self.params.items() if k.split(".", 1)[0] == name}

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def freeze(self, *components: str):
        for comp in components or COMPONENTS:
            for p in self.component(comp).values():
                p.trainable = False
                p.requires_grad = False

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    # ------------------------------------------------------------ forward

    def _check(self, x: np.ndarray):
        H, W = x.shape[-2:]
        q = 2 ** self.config.depth
        if H % q or W % q:
            raise DimensionError(f"slice extents {(H, W)} must be divisible by {q} (2^depth)")
        if x.shape[-3] != self.config.in_channels:
            raise DimensionError(f"expected {self.config.in_channels} input channels, got {x.shape[-3]}")

    def _decode(self, comp: str, feat, skips):
        h = feat
        cfg = self.config
        for j in range(cfg.depth):
            level = cfg.depth - 1 - j
            h = dk.upsample2x(h)
            if cfg.skips:
                h = dk.concat([h, skips[level]], axis=-3)
            h = dk.relu(dk.conv2d(h, self.params[f"{comp}.{j}.w"], self.params[f"{comp}.{j}.b"]))
        logits = dk.conv2d(h, self.params[f"{comp}.head.w"], self.params[f"{comp}.head.b"])
        return dk.sigmoid(logits)

    def forward(self, x, rng: np.random.Generator | None = None, heads=("base", "novel")):
        """Run one slice [C_in, H, W] or a batch [N, C_in, H, W].

        Returns (base probs, novel probs or None, embeddings). Dropout is
        active only when ``rng`` is given (training).
        """
        xv = x.value if isinstance(x, dk.Node) else np.asarray(x, dtype=self.config.dtype)
        self._check(xv)
        h = x if isinstance(x, dk.Node) else dk.const(xv)
        skips = []
        for i in range(self.config.depth):
            h = dk.relu(dk.conv2d(h, self.params[f"encoder.{i}.w"], self.params[f"encoder.{i}.b"]))
            skips.append(h)
            h = dk.maxpool2x(h)
            h = dk.dropout(h, self.config.dropout, rng)
        feat = h
        emb = feat
        for _ in range(self.config.depth):
            emb = dk.upsample2x(emb)
        base = self._decode("decoder_base", feat, skips) if "base" in heads else None
        novel = None
        if self.config.n_novel > 0 and "novel" in heads:
            novel = self._decode("decoder_novel", feat, skips)
        return base, novel, emb

    def predict(self, x: np.ndarray, batch: int = 32) -> np.ndarray:
        """Evaluation-mode probabilities [N, m + n, H, W] for a slice batch."""
        out = []
        for i in range(0, x.shape[0], batch):
            base, novel, _ = self.forward(x[i:i + batch])
            parts = [base.value] + ([novel.value] if novel is not None else [])
            out.append(np.concatenate(parts, axis=1))
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- slicing

def axis_channel_order(axis: int, n_peaks: int = 3) -> list[int]:
    """Channel permutation for slices cut along ``axis``: inside every peak
    slot the component along the slicing axis comes first, then the two
    in-plane components in ascending axis order."""
    comps = [axis] + [a for a in range(3) if a != axis]
    return [3 * k + c for k in range(n_peaks) for c in comps]


def volume_slices(volume: np.ndarray, axis: int) -> np.ndarray:
    """All slices of [C, D, H, W] along spatial ``axis`` as [n, C, P, Q]."""
    v = np.moveaxis(volume, axis + 1, 0)
    return v


def input_slices(x: np.ndarray, axis: int) -> np.ndarray:
    return volume_slices(x, axis)[:, axis_channel_order(axis, x.shape[0] // 3)]


def predict_volume(model: SegModel, volume: np.ndarray, batch: int = 32) -> np.ndarray:
    """Average of the three per-axis slice-stacked predictions, [m + n, D, H, W]."""
    volume = np.asarray(volume, dtype=model.config.dtype)
    q = 2 ** model.config.depth
    if any(e % q for e in volume.shape[1:]):
        raise DimensionError(f"volume extents {volume.shape[1:]} must be divisible by {q}")
    acc = None
    for axis in range(3):
        pred = model.predict(input_slices(volume, axis), batch)  # [n, K, P, Q]
        pred = np.moveaxis(pred, 0, axis + 1)
        acc = pred if acc is None else acc + pred
    return acc / 3.0


# ---------------------------------------------------------------- LwF

def lwf_init(base: SegModel, n_novel: int, seed: int = 0) -> tuple[SegModel, SegModel]:
    """(frozen copy of the base model, novel model initialised from it).

    The novel model inherits encoder and base decoder weights; its novel
    decoder is freshly initialised from ``seed``.
    """
    if base.config.n_novel != 0:
        raise CheckpointError("lwf_init expects a step t-1 model without a novel head")
    frozen = SegModel(base.config, params=base.state())
    frozen.freeze()
    cfg = replace(base.config, n_novel=n_novel)
    fresh = SegModel(cfg, seed=seed + 1000003)
    params = fresh.state()
    for k, v in base.state().items():
        params[k] = v
    return frozen, SegModel(cfg, params=params)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def of(cls, model: SegModel, step: int, **meta):
        return cls(model.config, model.state(), step, meta)

    def build(self) -> SegModel:
        expected = set(SegModel(self.config).param_shapes())
        got = set(self.params)
        if expected != got:
            raise CheckpointError(f"parameter mismatch: missing {sorted(expected - got)}, "
                                  f"unexpected {sorted(got - expected)}")
        model = SegModel(self.config, params=self.params)
        for name, shape in model.param_shapes().items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"parameter {name}: shape {self.params[name].shape} != {shape}")
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    header = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step, "meta": ckpt.meta,
                         "names": names}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            write_tensor(fh, ckpt.params[n])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", head[8:])
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(n))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt config block") from exc
        params = {}
        for name in header["names"]:
            try:
                params[name] = read_tensor(fh, f"{path}:{name}")
            except FormatError as exc:
                raise CheckpointError(str(exc)) from exc
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, header["step"], header["meta"])
