"""Brute-force reference implementations, written from the formulas with
plain loops and no shared code with the package."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

EPS = 1e-7


def clamp(p):
    return min(max(p, EPS), 1 - EPS)


def conv2d(x, w, b=None):
    """Direct stride-1 zero-padded convolution, x [C,H,W], w [O,C,kh,kw]."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += x[c, ii, jj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def uncertainty(z):
    return 2 * z - 1 if z > 0.5 else 1 - 2 * z


def distillation(z_old, z_new):
    """Per-class voxel mean of um-weighted soft cross-entropy, then class mean."""
    m = z_old.shape[0]
    total = 0.0
    for i in range(m):
        a, b = z_old[i].reshape(-1), z_new[i].reshape(-1)
        s = 0.0
        for v in range(a.size):
            p = clamp(b[v])
            s += uncertainty(a[v]) * (a[v] * math.log(p) + (1 - a[v]) * math.log(1 - p))
        total += -s / a.size
    return total / m


def segmentation(z, y):
    n = z.shape[0]
    total = 0.0
    for j in range(n):
        zz, yy = z[j].reshape(-1), y[j].reshape(-1)
        s = 0.0
        for v in range(zz.size):
            p = clamp(zz[v])
            s += yy[v] * math.log(p) + (1 - yy[v]) * math.log(1 - p)
        total += -s / zz.size
    return total / n


def similarity(a, b):
    c = 0
    for u, v in zip(a, b):
        c += int(u) * int(v)
    return c


def betas(anchor_label, member_labels):
    cs = [similarity(anchor_label, q) for q in member_labels]
    total = sum(cs)
    if total == 0:
        return None
    return [c / total for c in cs]


def euclid(a, b):
    return math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(a, b)))


def voxel_contrast(emb, labels, anchors, members=None, tau=1.0):
    """Mean over non-skipped anchors of sum_q -beta_pq log softmax(-d/tau)."""
    S = len(emb)
    per_anchor = []
    for a, p in enumerate(anchors):
        group = [k for k in range(S) if k != p] if members is None else list(members[a])
        beta = betas(labels[p], [labels[q] for q in group])
        if beta is None or len(group) < 1:
            continue
        logits = [-euclid(emb[p], emb[q]) / tau for q in group]
        top = max(logits)
        denom = sum(math.exp(l - top) for l in logits)
        s = 0.0
        for bq, l in zip(beta, logits):
            s += -bq * (l - top - math.log(denom))
        per_anchor.append(s)
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def supcon(emb, classes, anchors, tau=1.0):
    """Supervised contrastive loss with negative Euclidean distance as the
    similarity: for every anchor, the mean over its positives P(p) of
    -log(exp(s_pq) / sum_{k != p} exp(s_pk)); then the mean over anchors
    that have at least one positive."""
    S = len(emb)
    vals = []
    for p in anchors:
        positives = [q for q in range(S) if q != p and classes[q] == classes[p]]
        if not positives:
            continue
        others = [k for k in range(S) if k != p]
        log_denom = math.log(sum(math.exp(-euclid(emb[p], emb[k]) / tau) for k in others))
        vals.append(sum(-(-euclid(emb[p], emb[q]) / tau - log_denom) for q in positives) / len(positives))
    return sum(vals) / len(vals) if vals else 0.0


def total(losses, s=None):
    out = 0.0
    for i, L in enumerate(losses):
        out += L if s is None else math.exp(-s[i]) * L + s[i]
    return out


def dice(pred, label, threshold=0.5):
    inter = a = b = 0
    for p, y in zip(np.asarray(pred).reshape(-1), np.asarray(label).reshape(-1)):
        pa = p >= threshold
        a += pa
        b += int(y)
        inter += pa and y
    return 1.0 if a + b == 0 else 2 * inter / (a + b)


def overlap_counts(labels):
    """Histogram of labels-per-voxel over labeled voxels, by explicit voxel loop."""
    C = labels.shape[0]
    flat = labels.reshape(C, -1)
    hist = [0] * C
    n = 0
    for v in range(flat.shape[1]):
        k = sum(int(flat[c, v]) for c in range(C))
        if k:
            hist[k - 1] += 1
            n += 1
    return [h / n for h in hist]


def partition(mask, theta):
    """All-pairs nearest-opposite-voxel distance partition of an N-d mask."""
    m = np.asarray(mask).astype(bool)
    coords = np.argwhere(np.ones_like(m))
    flat = m.reshape(-1)
    inner, outer, background = [], [], []
    for v, cv in enumerate(coords):
        best = math.inf
        for u, cu in enumerate(coords):
            if flat[u] != flat[v]:
                best = min(best, math.sqrt(sum((int(a) - int(b)) ** 2 for a, b in zip(cv, cu))))
        if best <= theta:
            outer.append(v)
        elif flat[v]:
            inner.append(v)
        else:
            background.append(v)
    return inner, outer, background


def batch_subset(losses, ratio):
    B = len(losses)
    r = Fraction(ratio)
    k = -(-B * r.numerator // r.denominator)
    order = sorted(range(B), key=lambda i: (losses[i], i))
    return [order[math.floor((i + Fraction(1, 2)) * B / k)] for i in range(k)]


def adamax(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adamax over a sequence of gradients for a flat parameter."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    u = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            u[i] = max(b2 * u[i], abs(gi))
            theta[i] -= lr / (1 - b1 ** t) * m[i] / (u[i] + eps)
    return theta


def slice_stack_average(predict_slice, volume, n_peaks=3):
    """Three-axis average: slice along each axis, reorder each peak slot so
    the slicing-axis component leads, predict, restack, average."""
    C, D, H, W = volume.shape
    acc = None
    for axis in range(3):
        perm = []
        for k in range(n_peaks):
            perm += [3 * k + axis] + [3 * k + a for a in range(3) if a != axis]
        pieces = []
        for i in range(volume.shape[axis + 1]):
            sl = [slice(None)] * 4
            sl[axis + 1] = i
            pieces.append(predict_slice(volume[tuple(sl)][perm]))
        vol = np.stack(pieces, axis=axis + 1)
        acc = vol if acc is None else acc + vol
    return acc / 3.0
