"""Finite-difference gradient checks for every op, loss, and the model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffkernel as dk
from .losses import LossWeightState, distillation_loss, segmentation_loss, total_loss, voxel_contrast_loss
from .model import ModelConfig, SegModel

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    seconds: float
    tolerance: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _weighted_sum(node: dk.Node, w: np.ndarray) -> dk.Node:
    return dk.sum(dk.mul(node, dk.const(w)))


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, np.ndarray]]:
    """Scalar test functions f(x) = <w, op(x, ...)> keyed by op kind."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    sq = rng.normal(size=(4, 2))
    img = rng.normal(size=(2, 4, 4))
    # pool inputs and relu inputs stay >= 10 steps away from ties / zero
    distinct = rng.permutation(np.linspace(-2.0, 2.0, 32)).reshape(2, 4, 4)
    off_zero = np.where(np.abs(a) < 10 * STEP, 10 * STEP, a)
    ker = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    emb = rng.normal(size=(5, 3))
    w34 = rng.normal(size=(3, 4))
    w_img = rng.normal(size=(3, 4, 4))
    w_rows = np.arange(1.0, 4.0)
    w_up = rng.normal(size=(2, 8, 8))
    w_43 = rng.normal(size=(4, 3))
    w_52 = rng.normal(size=(5, 2))
    w_5 = rng.normal(size=5)
    w_38 = rng.normal(size=(3, 8))
    w_22 = rng.normal(size=(2, 2))

    cases = {
        "add": (lambda x: _weighted_sum(dk.add(x, dk.const(b)), w34), a),
        "sub": (lambda x: _weighted_sum(dk.sub(dk.const(b), x), w34), a),
        "mul": (lambda x: _weighted_sum(dk.mul(x, x), w34), a),
        "div": (lambda x: _weighted_sum(dk.div(dk.const(b), dk.add(dk.mul(x, x), 1.0)), w34), a),
        "matmul": (lambda x: _weighted_sum(dk.matmul(x, dk.const(sq)), np.ones((3, 2))), a),
        "conv2d": (lambda x: _weighted_sum(dk.conv2d(x, dk.const(ker), dk.const(bias)), w_img), img),
        "conv2d.kernel": (lambda k: _weighted_sum(dk.conv2d(dk.const(img), k), w_img), ker),
        "upsample2x": (lambda x: _weighted_sum(dk.upsample2x(x), w_up), img),
        "maxpool2x": (lambda x: _weighted_sum(dk.maxpool2x(x), np.arange(8.0).reshape(2, 2, 2)), distinct),
        "relu": (lambda x: _weighted_sum(dk.relu(x), w34), off_zero),
        "sigmoid": (lambda x: _weighted_sum(dk.sigmoid(x), w34), a),
        "log": (lambda x: _weighted_sum(dk.log(dk.sigmoid(x)), w34), a),
        "exp": (lambda x: _weighted_sum(dk.exp(x), w34), a),
        "sum": (lambda x: _weighted_sum(dk.sum(dk.mul(x, x), axis=1), w_rows), a),
        "mean": (lambda x: dk.sum(dk.mul(dk.mean(dk.exp(x), axis=0), dk.const(np.arange(1.0, 5.0)))), a),
        "logsumexp": (lambda x: _weighted_sum(dk.logsumexp(x, axis=1), w_rows), a),
        "gather_rows": (lambda x: _weighted_sum(dk.gather_rows(x, [2, 0, 2, 4]), w_43), emb),
        "pairwise_distance": (lambda x: _weighted_sum(dk.pairwise_distance(x, dk.const(emb[:2])),
                                                      w_52), emb),
        "row_distance": (lambda x: _weighted_sum(dk.row_distance(x, dk.const(emb[::-1].copy())),
                                                 w_5), emb),
        "concat": (lambda x: _weighted_sum(dk.concat([x, dk.mul(x, x)], axis=1), w_38), a),
        "slice": (lambda x: _weighted_sum(dk.slice(x, (slice(0, 2), slice(1, 3))), w_22), a),
        "reshape": (lambda x: _weighted_sum(dk.reshape(dk.exp(x), (4, 3)), w_43), a),
        "transpose": (lambda x: _weighted_sum(dk.transpose(dk.exp(x)), w_43), a),
        "normalize_rows": (lambda x: _weighted_sum(dk.normalize_rows(x), w34), a),
    }
    return cases


def check_ops(points: int = 100, seed: int = 0) -> list[CheckResult]:
    """Every op kind at ``points`` random points."""
    results: dict[str, CheckResult] = {}
    for i in range(points):
        rng = np.random.default_rng([seed, i])
        for name, (fn, x) in _op_cases(rng).items():
            t0 = time.perf_counter()
            rep = dk.grad_check(fn, x, STEP, TOL)
            prev = results.get(name)
            dt = time.perf_counter() - t0
            if prev is None:
                results[name] = CheckResult(name, 1, rep.max_error, dt)
            else:
                prev.instances += 1
                prev.max_error = max(prev.max_error, rep.max_error)
                prev.seconds += dt
    return list(results.values())


def _probs(rng, shape):
    # keep probabilities away from the clamp band
    return rng.uniform(0.05, 0.95, size=shape)


def _repeat(name: str, instances: int, seed: int, make: Callable) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        fn, x = make(np.random.default_rng([seed, i]))
        worst = max(worst, dk.grad_check(fn, x, STEP, TOL).max_error)
    return CheckResult(name, instances, worst, time.perf_counter() - t0)


def check_losses(instances: int = 20, seed: int = 1) -> list[CheckResult]:
    def seg(rng):
        y = rng.integers(0, 2, size=(3, 10))
        return (lambda z: segmentation_loss(z, y)), _probs(rng, (3, 10))

    def dis(rng):
        z_old = rng.uniform(0.0, 1.0, size=(3, 10))
        return (lambda z: distillation_loss(z_old, z)), _probs(rng, (3, 10))

    def vc(rng):
        S = int(rng.integers(6, 11))
        labels = rng.integers(0, 2, size=(S, 4))
        labels[:, 0] = 1  # no skipped anchors
        anchors = rng.choice(S, size=3, replace=False)
        tau = float(rng.uniform(0.5, 2.0))
        return (lambda e: voxel_contrast_loss(e, labels, anchors, tau=tau)), rng.normal(size=(S, 3))

    def dw(rng):
        comps = rng.uniform(0.1, 3.0, size=3)

        def fn(s):
            state = LossWeightState(s)
            return total_loss({n: dk.const(c) for n, c in zip(("seg", "dis", "vc"), comps)}, state)
        return fn, rng.normal(size=3)

    def dw_components(rng):
        s = rng.normal(size=3)

        def fn(c):
            state = LossWeightState(dk.const(s))
            parts = {n: dk.slice(c, k) for k, n in enumerate(("seg", "dis", "vc"))}
            return total_loss(parts, state)
        return fn, rng.uniform(0.1, 3.0, size=3)

    return [
        _repeat("L_seg", instances, seed, seg),
        _repeat("L_dis", instances, seed, dis),
        _repeat("L_VC", instances, seed, vc),
        _repeat("total(DW) wrt s", instances, seed, dw),
        _repeat("total(DW) wrt losses", instances, seed, dw_components),
    ]


def small_model(seed: int = 0) -> SegModel:
    cfg = ModelConfig(in_channels=1, widths=(2, 3), n_base=2, n_novel=1, dropout=0.0, dtype="float64")
    return SegModel(cfg, seed=seed)


def model_loss(model: SegModel, x: np.ndarray, y_base, y_novel, z_old, labels_emb) -> dk.Node:
    base, novel, emb = model.forward(x[None])
    parts = {
        "seg": segmentation_loss(novel, y_novel[None]),
        "dis": distillation_loss(z_old[None], base),
    }
    E = emb.shape[1]
    flat = dk.reshape(dk.transpose(emb, (0, 2, 3, 1)), (-1, E))
    rows = np.arange(0, flat.shape[0], 7)
    parts["vc"] = voxel_contrast_loss(dk.gather_rows(flat, rows), labels_emb[rows], [0, 1, 2])
    return total_loss(parts, LossWeightState(dk.const(np.array([0.1, -0.2, 0.3]))))


def check_model(instances: int = 20, seed: int = 2) -> CheckResult:
    """Gradient of the combined loss w.r.t. every model parameter, 1x8x8 input."""
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        model = small_model(seed=i)
        for p in model.params.values():
            p.value = p.value + rng.normal(scale=0.1, size=p.shape)
        x = rng.normal(size=(1, 8, 8))
        y_novel = rng.integers(0, 2, size=(1, 8, 8))
        y_base = rng.integers(0, 2, size=(2, 8, 8))
        z_old = rng.uniform(0.05, 0.95, size=(2, 8, 8))
        labels = rng.integers(0, 2, size=(64, 3))
        labels[:, 0] = 1
        for name in list(model.params):
            original = model.params[name]

            def fn(node, name=name):
                model.params[name] = node
                try:
                    return model_loss(model, x, y_base, y_novel, z_old, labels)
                finally:
                    model.params[name] = original
            worst = max(worst, dk.grad_check(fn, original.value, STEP, TOL).max_error)
    return CheckResult("model", instances, worst, time.perf_counter() - t0)


def run_suite(op_points: int = 100, instances: int = 20) -> list[CheckResult]:
    return check_ops(op_points) + check_losses(instances) + [check_model(instances)]
