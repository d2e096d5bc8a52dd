"""Uncertainty-weighted distillation, novel-class BCE, multi-label voxel
contrast, and homoscedastic loss weighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import ContractError, DimensionError, Node, Parameter

LOSS_NAMES = ("seg", "dis", "vc")


def uncertainty_map(z_base_old) -> np.ndarray:
    """Confidence of the frozen model's base-class probabilities, |2z - 1|.

    Returned as a plain array: it weights the distillation target and carries
    no gradient.
    """
    z = np.asarray(z_base_old.value if isinstance(z_base_old, Node) else z_base_old, dtype=np.float64)
    return np.where(z > 0.5, 2 * z - 1, 1 - 2 * z)


def _bce_terms(target: np.ndarray, pred: Node, weight: np.ndarray | None) -> Node:
    t = dk.const(target.astype(pred.dtype, copy=False))
    pos = dk.mul(t, dk.log(pred))
    negt = dk.const((1 - target).astype(pred.dtype, copy=False))
    neg = dk.mul(negt, dk.log(dk.sub(1.0, pred)))
    terms = dk.add(pos, neg)
    if weight is not None:
        terms = dk.mul(dk.const(weight.astype(pred.dtype, copy=False)), terms)
    return dk.neg(terms)


def _reduce(terms: Node, per_element: bool) -> Node:
    # per-class voxel means then class mean == mean over everything (equal voxel counts)
    if per_element:
        axes = tuple(range(1, terms.value.ndim))
        return dk.mean(terms, axis=axes)
    return dk.mean(terms)


def distillation_loss(z_base_old, z_base_new: Node, um=None, per_element: bool = False) -> Node:
    """Uncertainty-weighted soft-target cross entropy between the frozen
    model's base probabilities and the current model's.

    Inputs are [m, voxels] (or [batch, m, voxels] with ``per_element`` giving
    one loss per batch element).
    """
    z_old = np.asarray(z_base_old, dtype=np.float64)
    if z_old.shape != z_base_new.shape:
        raise DimensionError(f"distillation_loss: shapes {z_old.shape} and {z_base_new.shape} differ")
    um = uncertainty_map(z_old) if um is None else np.asarray(um, dtype=np.float64)
    return _reduce(_bce_terms(z_old, z_base_new, um), per_element)


def segmentation_loss(z_novel: Node, y_novel, per_element: bool = False) -> Node:
    y = np.asarray(y_novel)
    if y.shape != z_novel.shape:
        raise DimensionError(f"segmentation_loss: shapes {z_novel.shape} and {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("segmentation_loss: labels must be binary")
    return _reduce(_bce_terms(y.astype(np.float64), z_novel, None), per_element)


def label_similarity(y_p, y_q) -> float:
    y_p = np.asarray(y_p)
    y_q = np.asarray(y_q)
    if y_p.shape != y_q.shape:
        raise DimensionError(f"label_similarity: lengths {y_p.shape} and {y_q.shape} differ")
    return float(y_p @ y_q)


def dynamic_coefficients(anchor_label, member_labels) -> np.ndarray | None:
    """beta for every member of g(p); None when the anchor shares no label
    with any member (the anchor is then skipped)."""
    c = np.asarray(member_labels, dtype=np.float64) @ np.asarray(anchor_label, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return None
    return c / total


def dynamic_coefficient(anchor_label, q: int, member_labels) -> float:
    beta = dynamic_coefficients(anchor_label, member_labels)
    return 0.0 if beta is None else float(beta[q])


def voxel_contrast_loss(embeddings: Node, labels, anchors, members=None, tau: float = 1.0,
                        normalize: bool = False) -> Node:
    """Multi-label voxel contrast over sampled voxel embeddings.

    ``embeddings`` is [S, E], ``labels`` [S, K] binary. Each anchor row p is
    contrasted against ``members[a]`` (default: every other row). Per anchor
    the pair terms -beta_pq * log softmax_q(-d(z_p, z_q) / tau) are summed;
    the result is the mean over anchors that are not skipped.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    labels = np.asarray(labels, dtype=np.float64)
    S = embeddings.shape[0]
    if labels.shape[0] != S:
        raise DimensionError(f"voxel_contrast_loss: {S} embeddings but {labels.shape[0]} label rows")
    anchors = np.asarray(anchors, dtype=np.intp).reshape(-1)
    if members is None:
        members = np.array([[k for k in range(S) if k != p] for p in anchors], dtype=np.intp).reshape(len(anchors), -1)
    members = np.asarray(members, dtype=np.intp)
    if members.ndim != 2 or members.shape[0] != anchors.size:
        raise DimensionError(f"voxel_contrast_loss: members {members.shape} do not match {anchors.size} anchors")
    M = members.shape[1]
    keep, betas = [], []
    if M >= 1:
        for a, p in enumerate(anchors):
            beta = dynamic_coefficients(labels[p], labels[members[a]])
            if beta is not None:
                keep.append(a)
                betas.append(beta)
    if not keep:
        return dk.const(np.zeros((), dtype=embeddings.dtype))
    keep = np.asarray(keep)
    A = keep.size
    beta = np.asarray(betas, dtype=embeddings.dtype)
    z = dk.normalize_rows(embeddings) if normalize else embeddings
    za = dk.gather_rows(z, np.repeat(anchors[keep], M))
    zq = dk.gather_rows(z, members[keep].reshape(-1))
    d = dk.reshape(dk.row_distance(za, zq), (A, M))
    logits = dk.mul(d, -1.0 / tau)
    lse = dk.logsumexp(logits, axis=1)
    pulled = dk.sum(dk.mul(dk.const(beta), logits))
    return dk.div(dk.sub(dk.sum(lse), pulled), float(A))


@dataclass
class LossWeightState:
    """Learnable log-variances s for (seg, dis, vc); weights are exp(-s)."""
    s: Parameter

    @classmethod
    def create(cls, init=(0.0, 0.0, 0.0), dtype=np.float64):
        return cls(Parameter("loss_weights.s", np.asarray(init, dtype=dtype)))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.s.value)


def total_loss(components: dict[str, Node], state: LossWeightState | None = None) -> Node:
    """Combine the enabled component losses.

    With ``state`` each term is exp(-s_i) * L_i + s_i; without it the plain
    sum. Components absent from ``components`` contribute nothing, including
    their s_i term.
    """
    names = [n for n in LOSS_NAMES if n in components]
    if not names:
        raise ContractError("total_loss needs at least one component")
    for n in names:
        v = components[n].value
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite {n} loss: {v}")
    total = None
    for n in names:
        L = components[n]
        if state is not None:
            s_i = dk.slice(state.s, LOSS_NAMES.index(n))
            term = dk.add(dk.mul(dk.exp(dk.neg(s_i)), L), s_i)
        else:
            term = L
        total = term if total is None else dk.add(total, term)
    return total
