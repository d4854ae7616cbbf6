"""Training objectives.

Every loss works on Tensors (graph-tracked) and accepts plain arrays where a
pure value is enough. Batch reductions are means so the fixed loss weights are
independent of ray counts; the patch smoothness term keeps its literal
double-offset sum over one patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda_D: float = 0.1
    lambda_N: float = 0.05
    lambda_E: float = 0.05
    lambda_S: float = 0.04
    lambda_bs: float = 0.1
    lambda_op: float = 0.1
    lambda_rd: float = 0.1
    epsilon_op: float = 0.05

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossBundle:
    """Scalar components plus their weighted total (all plain floats)."""

    rgb: float = 0.0
    depth: float = 0.0
    normal: float = 0.0
    semantic: float = 0.0
    eikonal: float = 0.0
    bg_smooth: float = 0.0
    obj_point: float = 0.0
    rev_depth: float = 0.0
    total: float = 0.0

    def components(self):
        return {k: getattr(self, k) for k in
                ("rgb", "depth", "normal", "semantic", "eikonal",
                 "bg_smooth", "obj_point", "rev_depth")}


def rgb_loss(pred, gt):
    """Mean over rays of the per-ray L1 color difference (summed channels)."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("color batch shapes differ")
    return ad.reduce_mean(ad.reduce_sum(ad.absolute(pred - gt), axis=-1))


def fit_scale_shift(pred, cue):
    """Closed-form (w, q) minimizing sum((w*pred + q - cue)^2).

    Solved from the 2x2 normal equations; gradients flow through the solve.
    Degenerate systems (constant pred) fall back to w=1, q=mean(cue-pred).
    """
    pred = ad.as_tensor(pred)
    cue = np.asarray(cue.data if isinstance(cue, Tensor) else cue, dtype=np.float64)
    n = pred.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to fit scale/shift")
    sx = ad.reduce_sum(pred)
    sxx = ad.reduce_sum(ad.square(pred))
    sy = float(cue.sum())
    sxy = ad.reduce_sum(ad.mul(pred, cue))
    det = ad.sub(ad.mul(sxx, float(n)), ad.square(sx))
    var = float(det.data) / (n * n)
    if var < 1e-12:
        w = ad.constant(1.0)
        q = ad.mul(ad.sub(sy / n, ad.mul(sx, 1.0 / n)), 1.0)
        return w, q
    w = ad.div(ad.sub(ad.mul(sxy, float(n)), ad.mul(sx, sy)), det)
    q = ad.div(ad.sub(ad.mul(sxx, sy), ad.mul(sx, sxy)), det)
    return w, q


def depth_consistency(pred, cue):
    """Mean squared residual after per-batch scale/shift alignment."""
    pred = ad.as_tensor(pred)
    cue = np.asarray(cue.data if isinstance(cue, Tensor) else cue, dtype=np.float64)
    w, q = fit_scale_shift(pred, cue)
    r = ad.sub(ad.add(ad.mul(pred, w), q), cue)
    return ad.reduce_mean(ad.square(r))


def normal_consistency(pred, cue):
    """Mean over rays of ||n_hat - n_bar||_1 + |1 - n_hat . n_bar|.

    Both inputs must be unit length in a shared frame.
    """
    pred = ad.as_tensor(pred)
    cue = np.asarray(cue.data if isinstance(cue, Tensor) else cue, dtype=np.float64)
    norms_p = np.linalg.norm(pred.data, axis=-1)
    norms_c = np.linalg.norm(cue, axis=-1)
    if np.any(norms_p < 1e-9) or np.any(norms_c < 1e-9):
        raise ValueError("zero-length normal in normal_consistency")
    l1 = ad.reduce_sum(ad.absolute(pred - cue), axis=-1)
    dot = ad.reduce_sum(ad.mul(pred, cue), axis=-1)
    ang = ad.absolute(ad.sub(1.0, dot))
    return ad.reduce_mean(l1 + ang)


def semantic_loss(sem_logits, gt_label):
    """Cross entropy of softmax(composited logits) against math labels 1..k."""
    logits = ad.as_tensor(sem_logits)
    if logits.data.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(gt_label, dtype=np.int64))
    k = logits.shape[-1]
    if labels.min() < 1 or labels.max() > k:
        raise ValueError(f"labels must be in 1..{k}")
    # stable log-softmax: x - max - log(sum(exp(x - max)))
    mx = np.max(logits.data, axis=-1, keepdims=True)
    shifted = ad.sub(logits, mx)
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=-1, keepdims=True))
    logsm = ad.sub(shifted, lse)
    picked = ad.take_along(logsm, (labels - 1)[:, None], axis=1)
    return ad.mul(ad.reduce_mean(picked), -1.0)


def eikonal_loss(scene_grad_norms):
    """Mean of (||grad|| - 1)^2 over the supplied gradient norms."""
    g = ad.as_tensor(scene_grad_norms)
    return ad.reduce_mean(ad.square(ad.sub(g, 1.0)))


def patch_smoothness(depth_patch, normal_patch, mask_patch):
    """Multi-offset absolute-difference smoothness over one P x P patch.

    For offsets 2^d, d in 0..3, anchors (m, n) range over [0, P-1-2^d]^2 and
    each anchor contributes mask[m,n] * (|D[m,n]-D[m,n+o]| + |D[m,n]-D[m+o,n]|),
    likewise per-channel for normals. The mask is a constant gate.
    """
    d = ad.as_tensor(depth_patch)
    nrm = ad.as_tensor(normal_patch)
    mask = np.asarray(mask_patch.data if isinstance(mask_patch, Tensor) else mask_patch,
                      dtype=np.float64)
    p = d.shape[0]
    if d.shape[1] != p or nrm.shape[:2] != (p, p) or mask.shape != (p, p):
        raise ValueError("patch shapes disagree")
    if p < 9:
        raise ValueError("patch must be at least 9x9 for the largest offset")
    total = ad.constant(0.0)
    for dd in range(4):
        o = 2**dd
        lim = p - o
        m = mask[:lim, :lim]
        dh = ad.absolute(ad.sub(d[:lim, :lim], d[:lim, o:o + lim]))
        dv = ad.absolute(ad.sub(d[:lim, :lim], d[o:o + lim, :lim]))
        total = total + ad.reduce_sum(ad.mul(dh + dv, m))
        nh = ad.reduce_sum(ad.absolute(ad.sub(nrm[:lim, :lim], nrm[:lim, o:o + lim])), axis=-1)
        nv = ad.reduce_sum(ad.absolute(ad.sub(nrm[:lim, :lim], nrm[o:o + lim, :lim])), axis=-1)
        total = total + ad.reduce_sum(ad.mul(nh + nv, m))
    return total


def patch_smoothness_bruteforce(depth, normal, mask):
    """Literal double-loop oracle for patch_smoothness (values only)."""
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    p = depth.shape[0]
    total = 0.0
    for dd in range(4):
        o = 2**dd
        for m in range(p - o):
            for n in range(p - o):
                g = mask[m, n]
                total += g * (abs(depth[m, n] - depth[m, n + o])
                              + abs(depth[m, n] - depth[m + o, n]))
                for c in range(3):
                    total += g * (abs(normal[m, n, c] - normal[m, n + o, c])
                                  + abs(normal[m, n, c] - normal[m + o, n, c]))
    return total


def find_zero_crossing(bg_sdf, t):
    """First positive-to-negative crossing depth of the background SDF.

    Returns the linearly interpolated t' or None when the SDF never crosses
    from s_i > 0 to s_{i+1} <= 0.
    """
    s = np.asarray(bg_sdf.data if isinstance(bg_sdf, Tensor) else bg_sdf, dtype=np.float64)
    tv = np.asarray(t, dtype=np.float64)
    hits = np.nonzero((s[:-1] > 0) & (s[1:] <= 0))[0]
    if len(hits) == 0:
        return None
    i = int(hits[0])
    return float(tv[i] + s[i] * (tv[i + 1] - tv[i]) / (s[i] - s[i + 1]))


def find_zero_crossing_batch(bg_sdf: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized find_zero_crossing over (B, n) rays; NaN marks no crossing."""
    s = np.asarray(bg_sdf, dtype=np.float64)
    cross = (s[:, :-1] > 0) & (s[:, 1:] <= 0)
    has = cross.any(axis=1)
    first = np.argmax(cross, axis=1)
    rows = np.arange(s.shape[0])
    i = first
    si, sj = s[rows, i], s[rows, i + 1]
    ti, tj = t[rows, i], t[rows, i + 1]
    denom = np.where(si == sj, 1.0, si - sj)
    tp = ti + si * (tj - ti) / denom
    return np.where(has, tp, np.nan)


def object_point_sdf_loss(obj_sdfs, t, t_prime, epsilon_op: float):
    """Mean hinge max(0, eps - s_j) over object heads at points behind t'."""
    s = ad.as_tensor(obj_sdfs)
    tv = np.asarray(t, dtype=np.float64)
    if t_prime is None or not np.isfinite(t_prime):
        return ad.constant(0.0)
    behind = tv > t_prime
    if not behind.any():
        return ad.constant(0.0)
    hinge = ad.relu(ad.sub(epsilon_op, s))
    gated = ad.mul(hinge, behind[:, None].astype(np.float64))
    return ad.div(ad.reduce_sum(gated), float(behind.sum() * s.shape[-1]))


def object_point_sdf_loss_bruteforce(obj_sdfs, t, t_prime, epsilon_op):
    """Double-loop oracle for the object point loss (values only)."""
    s = np.asarray(obj_sdfs, dtype=np.float64)
    if t_prime is None or not np.isfinite(t_prime):
        return 0.0
    acc, cnt = 0.0, 0
    for i in range(s.shape[0]):
        if t[i] > t_prime:
            cnt += 1
            for j in range(s.shape[1]):
                acc += max(0.0, epsilon_op - s[i, j])
    return acc / (cnt * s.shape[1]) if cnt else 0.0


def reversed_depth_loss(d_o, d_b):
    """max(0, d_b - d_o): penalizes the object's back face poking out."""
    return ad.relu(ad.sub(ad.as_tensor(d_b), ad.as_tensor(d_o)))


def total_loss(components: dict, weights: LossWeights):
    """Weighted Eq.-style sum; raises naming any non-finite component."""
    for name, c in components.items():
        v = c.data if isinstance(c, Tensor) else c
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite loss component: {name}")
    lam = {"rgb": 1.0, "depth": weights.lambda_D, "normal": weights.lambda_N,
           "eikonal": weights.lambda_E, "semantic": weights.lambda_S,
           "bg_smooth": weights.lambda_bs, "obj_point": weights.lambda_op,
           "rev_depth": weights.lambda_rd}
    total = ad.constant(0.0)
    for name, c in components.items():
        total = total + ad.mul(ad.as_tensor(c), lam[name])
    return total
