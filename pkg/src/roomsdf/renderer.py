"""Camera rays, bounded sampling and alpha compositing of the field.

Rays march from a fixed near bound to their exit from the bounding sphere.
Alphas follow the sigmoid-ratio construction on consecutive scene-SDF samples
with the shared learnable sharpness u; color, depth, normal and semantic
logits are composited with one weight vector per ray. Depth (and the reversed
depths) are normalized by the accumulated weight so they stay inside the
sampled interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .field import semantic_transform
from .losses import find_zero_crossing_batch

WEIGHT_EPS = 1e-12
ALPHA_CAP = 1.0 - 1e-12


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    intrinsics: np.ndarray
    cam_to_world: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        r = self.rotation
        if abs(np.linalg.det(r) - 1.0) > 1e-6 or np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation block must be orthonormal with det +1")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]


@dataclass
class RendererConfig:
    n_coarse: int = 64
    n_importance: int = 64
    near: float = 0.05
    sphere_radius: float = 1.2

    def __post_init__(self):
        if self.near < 0 or self.n_coarse < 2:
            raise ValueError("invalid renderer config")


@dataclass
class RaySampleSet:
    """Everything sampled along a batch of rays (Tensors track the graph)."""

    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray                 # (B, n) strictly increasing
    points: np.ndarray            # (B, n, 3)
    sdf: Tensor                   # (B, n, k)
    alpha: Tensor                 # (B, n), last entry zero
    transmittance: Tensor         # (B, n), T_0 = 1
    weights: Tensor               # (B, n)
    feature: Tensor | None = None
    jac: Tensor | None = None     # (B*n, 3, k) flattened point Jacobian
    scene_grad: Tensor | None = None  # (B, n, 3)
    t_prime: np.ndarray | None = None  # (B,), NaN = no crossing
    valid: np.ndarray | None = None    # (B,) rays that hit the sphere


@dataclass
class RenderOutputs:
    color: Tensor | None
    depth: Tensor
    normal: Tensor
    sem_logits: Tensor
    mask_nonbg: np.ndarray
    weights: Tensor
    d_o: Tensor | None = None
    d_b: Tensor | None = None
    rd_valid: np.ndarray | None = None


def generate_ray(camera: Camera, pixel):
    """World ray through the center of integer pixel (x, y)."""
    x, y = pixel
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    k = camera.intrinsics
    d_cam = np.array([(x + 0.5 - k[0, 2]) / k[0, 0],
                      (y + 0.5 - k[1, 2]) / k[1, 1], 1.0])
    d = camera.rotation @ d_cam
    d /= np.linalg.norm(d)
    return camera.position.copy(), d


def pixel_rays(camera: Camera, xs: np.ndarray, ys: np.ndarray):
    """Vectorized generate_ray for integer pixel arrays."""
    k = camera.intrinsics
    d_cam = np.stack([(xs + 0.5 - k[0, 2]) / k[0, 0],
                      (ys + 0.5 - k[1, 2]) / k[1, 1],
                      np.ones_like(xs, dtype=np.float64)], axis=-1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def camera_ray_grid(camera: Camera):
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    return pixel_rays(camera, xs.astype(np.float64), ys.astype(np.float64))


def ray_sphere_far(origins: np.ndarray, dirs: np.ndarray, radius: float) -> np.ndarray:
    """Exit depth of each ray from the bounding sphere; NaN when it misses."""
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    far = -b + np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc > 0) & (far > 0), far, np.nan)


def stratified_samples(near, far, n, rng, B):
    """One uniform draw per stratum: ascending (B, n) depths."""
    edges = np.linspace(0.0, 1.0, n + 1)
    u = rng.uniform(size=(B, n))
    frac = edges[:-1] + u * (1.0 / n)
    nearc = np.broadcast_to(np.asarray(near, dtype=np.float64).reshape(-1, 1), (B, n))
    farc = np.broadcast_to(np.asarray(far, dtype=np.float64).reshape(-1, 1), (B, n))
    return nearc + (farc - nearc) * frac


def sample_pdf(t: np.ndarray, weights: np.ndarray, n_new: int, rng) -> np.ndarray:
    """Inverse-CDF resampling of interval midweights (piecewise linear)."""
    B, n = t.shape
    w = 0.5 * (weights[:, 1:] + weights[:, :-1]) + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(pdf, axis=1)], axis=1)
    u = rng.uniform(size=(B, n_new))
    # per-row searchsorted via the global-offset trick
    offs = np.arange(B)[:, None]
    j = np.searchsorted((cdf + 2.0 * offs).ravel(),
                        (u + 2.0 * offs).ravel(), side="right").reshape(B, n_new)
    j = np.clip(j - 1 - offs * cdf.shape[1], 0, n - 2).astype(np.int64)
    rows = np.arange(B)[:, None]
    c0, c1 = cdf[rows, j], cdf[rows, j + 1]
    denom = np.where(c1 - c0 < 1e-12, 1.0, c1 - c0)
    frac = (u - c0) / denom
    return t[rows, j] + frac * (t[rows, j + 1] - t[rows, j])


def merge_sorted(t_a: np.ndarray, t_b: np.ndarray) -> np.ndarray:
    """Merge two per-ray depth sets, sorted and strictly increasing."""
    t = np.sort(np.concatenate([t_a, t_b], axis=1), axis=1)
    # collapse exact duplicates by an epsilon bump (keeps rectangular shape)
    for _ in range(2):
        dup = np.diff(t, axis=1) <= 0
        if not dup.any():
            break
        t[:, 1:][dup] = np.nextafter(t[:, 1:][dup], np.inf)
        t = np.sort(t, axis=1)
    return t


def alpha_from_sdf(s_i, s_next, u):
    """max((Phi_u(s_i) - Phi_u(s_next)) / Phi_u(s_i), 0), denominator clamped."""
    tape = isinstance(s_i, Tensor) or isinstance(s_next, Tensor) or isinstance(u, Tensor)
    if tape:
        s_i, s_next, u = ad.as_tensor(s_i), ad.as_tensor(s_next), ad.as_tensor(u)
        phi_i = ad.sigmoid(ad.mul(s_i, u))
        phi_j = ad.sigmoid(ad.mul(s_next, u))
        return ad.relu(ad.div(ad.sub(phi_i, phi_j), ad.maximum(phi_i, 1e-6)))
    s_i = np.asarray(s_i, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    phi_i = _sigmoid(u * s_i)
    phi_j = _sigmoid(u * s_next)
    return np.maximum((phi_i - phi_j) / np.maximum(phi_i, 1e-6), 0.0)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def alphas_along(sdf_1d, u):
    """Per-sample alphas from an (B, n) SDF track; the last alpha is zero."""
    if isinstance(sdf_1d, Tensor):
        a = alpha_from_sdf(sdf_1d[:, :-1], sdf_1d[:, 1:], u)
        B = sdf_1d.shape[0]
        return ad.concat([a, ad.constant(np.zeros((B, 1)))], axis=1)
    a = alpha_from_sdf(sdf_1d[:, :-1], sdf_1d[:, 1:], u)
    return np.concatenate([a, np.zeros((a.shape[0], 1))], axis=1)


def compute_weights(alpha):
    """(weights, transmittance) with T_0 = 1 and T non-increasing."""
    if isinstance(alpha, Tensor):
        capped = ad.minimum(alpha, ALPHA_CAP)
        B = alpha.shape[0]
        surv = ad.cumprod(ad.sub(1.0, capped), axis=1)
        trans = ad.concat([ad.constant(np.ones((B, 1))), surv[:, :-1]], axis=1)
        return ad.mul(trans, capped), trans
    capped = np.minimum(alpha, ALPHA_CAP)
    surv = np.cumprod(1.0 - capped, axis=1)
    trans = np.concatenate([np.ones((alpha.shape[0], 1)), surv[:, :-1]], axis=1)
    return trans * capped, trans


def composite(values, alphas):
    """Sum_i T_i alpha_i value_i for one ray's n values (vector or n x m)."""
    if isinstance(values, Tensor) or isinstance(alphas, Tensor):
        alphas = ad.as_tensor(alphas)
        values = ad.as_tensor(values)
        w, _ = compute_weights(ad.reshape(alphas, (1, alphas.shape[0])))
        n = alphas.shape[0]
        v = values if values.data.ndim == 2 else ad.reshape(values, (n, 1))
        out = ad.reduce_sum(ad.mul(ad.reshape(w, (n, 1)), v), axis=0)
        return out if np.asarray(values.data).ndim == 2 else ad.reshape(out, ())
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    w, _ = compute_weights(alphas[None, :])
    w = w.reshape(-1)
    v2 = values.reshape(len(w), -1)
    out = (w[:, None] * v2).sum(axis=0)
    return out if values.ndim == 2 else out[0]


def composite_batch(values: Tensor, weights: Tensor) -> Tensor:
    """(B, n, m) values with (B, n) weights -> (B, m)."""
    B, n = weights.shape
    return ad.reduce_sum(ad.mul(values, ad.reshape(weights, (B, n, 1))), axis=1)


def normalized_depth(t: np.ndarray, weights: Tensor) -> Tensor:
    """Weight-normalized expected depth, clamped into [t_0, t_last]."""
    wsum = ad.reduce_sum(weights, axis=1)
    raw = ad.div(ad.reduce_sum(ad.mul(weights, t), axis=1),
                 ad.maximum(wsum, WEIGHT_EPS))
    return ad.minimum(ad.maximum(raw, t[:, 0]), t[:, -1])


def reversed_depths(t) -> np.ndarray:
    """t_hat_i = (t_0 + t_{n-1}) - t_{n-1-i}: ascending, endpoints preserved."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        return (t[0] + t[-1]) - t[::-1]
    return (t[:, :1] + t[:, -1:]) - t[:, ::-1]


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = ad.l2_norm(x, axis=-1, keepdims=True, eps=eps * eps)
    return ad.div(x, n)


class Renderer:
    """Stateless rendering ops over a compositional field."""

    def __init__(self, field, config: RendererConfig):
        self.field = field
        self.config = config

    # -- sampling ---------------------------------------------------------
    def sample_along_ray(self, origin, direction, rng, bg_only: bool = False):
        """Spec-shaped single-ray sampler; returns ascending depths or None."""
        t = self.sample_batch(np.asarray(origin, np.float64)[None],
                              np.asarray(direction, np.float64)[None], rng,
                              bg_only=bg_only)
        return None if t is None else t[0]

    def sample_batch(self, origins, dirs, rng, bg_only: bool = False):
        cfg = self.config
        far = ray_sphere_far(origins, dirs, cfg.sphere_radius)
        valid = np.isfinite(far) & (far > cfg.near)
        if not valid.any():
            return None
        far = np.where(valid, far, cfg.near + 1e-3)
        t = stratified_samples(cfg.near, far, cfg.n_coarse, rng, len(origins))
        if cfg.n_importance > 0:
            pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
            sdf = self.field.sdf_values(pts.reshape(-1, 3)).reshape(t.shape + (-1,))
            track = sdf[:, :, 0] if bg_only else sdf.min(axis=2)
            u = float(self.field.u().data)
            alpha = alphas_along(track, u)
            w, _ = compute_weights(alpha)
            t_new = sample_pdf(t, w, cfg.n_importance, rng)
            t = merge_sorted(t, t_new)
        return t

    # -- full render --------------------------------------------------------
    def render_batch(self, origins, dirs, rng, frame_ids=None, want_color=True,
                     with_jacobian=True, want_reversed=False, t=None):
        """Render B rays; returns (RenderOutputs, RaySampleSet)."""
        cfg = self.config
        k = self.field.config.k
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        B = len(origins)
        if t is None:
            t = self.sample_batch(origins, dirs, rng)
        if t is None:
            return self._miss_outputs(B, k)
        n = t.shape[1]
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        sdf_f, feat_f, jac = self.field.geometry(flat, with_jacobian=with_jacobian)
        sdf = ad.reshape(sdf_f, (B, n, k))
        scene = ad.reduce_min(sdf, axis=2)
        u = self.field.u()
        alpha = alphas_along(scene, u)
        weights, trans = compute_weights(alpha)

        sem_pt = semantic_transform(sdf, self.field.config.gamma)
        sem = composite_batch(sem_pt, weights)
        mask_nonbg = (np.argmax(sem.data, axis=1) != 0).astype(np.uint8)

        scene_grad = None
        normal = None
        if with_jacobian:
            g_f = self.field.scene_normal(sdf_f, jac)         # (B*n, 3)
            n_pt = normalize_rows(g_f)
            normal_comp = composite_batch(ad.reshape(n_pt, (B, n, 3)), weights)
            normal = normalize_rows(normal_comp)
            scene_grad = ad.reshape(g_f, (B, n, 3))

        color = None
        if want_color:
            if frame_ids is None:
                raise ValueError("want_color requires frame ids")
            if not with_jacobian:
                raise ValueError("color rendering needs normals (with_jacobian)")
            fids = np.repeat(np.asarray(frame_ids, dtype=np.int64), n)
            vd = np.repeat(dirs, n, axis=0)
            rgb_pt = self.field.color(flat, n_pt, vd, feat_f, fids)
            color = composite_batch(ad.reshape(rgb_pt, (B, n, 3)), weights)

        depth = normalized_depth(t, weights)
        t_prime = find_zero_crossing_batch(sdf.data[:, :, 0], t)

        sample_set = RaySampleSet(origins=origins, dirs=dirs, t=t, points=pts,
                                  sdf=sdf, alpha=alpha, transmittance=trans,
                                  weights=weights, feature=feat_f, jac=jac,
                                  scene_grad=scene_grad, t_prime=t_prime,
                                  valid=np.ones(B, dtype=bool))
        out = RenderOutputs(color=color, depth=depth, normal=normal,
                            sem_logits=sem, mask_nonbg=mask_nonbg, weights=weights)
        if want_reversed:
            out.d_o, out.d_b, out.rd_valid = self.render_reversed(sample_set, sem, mask_nonbg)
        return out, sample_set

    def _miss_outputs(self, B, k):
        zc = ad.constant(np.zeros((B, 3)))
        z1 = ad.constant(np.zeros(B))
        sample_set = RaySampleSet(origins=np.zeros((B, 3)), dirs=np.zeros((B, 3)),
                                  t=np.zeros((B, 1)), points=np.zeros((B, 1, 3)),
                                  sdf=ad.constant(np.zeros((B, 1, k))),
                                  alpha=ad.constant(np.zeros((B, 1))),
                                  transmittance=ad.constant(np.ones((B, 1))),
                                  weights=ad.constant(np.zeros((B, 1))),
                                  valid=np.zeros(B, dtype=bool))
        out = RenderOutputs(color=zc, depth=z1, normal=zc,
                            sem_logits=ad.constant(np.zeros((B, k))),
                            mask_nonbg=np.zeros(B, dtype=np.uint8), weights=sample_set.weights)
        return out, sample_set

    # -- reversed depths ----------------------------------------------------
    def render_reversed(self, sample_set: RaySampleSet, sem_logits, mask_nonbg):
        """Back-to-front object/background depths on the forward samples.

        Qualifies a ray iff its rendered class is non-background and the
        rendered object head's SDF at the furthest sample is positive. The
        background is traversed with flipped sign: marching from inside the
        wall, its rear surface is the (+,-) crossing of -s_bg.
        """
        t = sample_set.t
        B, n = t.shape
        sdf = sample_set.sdf
        obj_idx = 1 + np.argmax(sem_logits.data[:, 1:], axis=1)      # per-ray head
        s_obj = ad.reshape(ad.take_along(sdf, obj_idx[:, None, None].repeat(n, axis=1),
                                         axis=2), (B, n))
        far_pos = sdf.data[np.arange(B), -1, obj_idx] > 0
        rd_valid = (mask_nonbg.astype(bool)) & far_pos
        t_hat = reversed_depths(t)
        u = self.field.u()
        s_obj_rev = s_obj[:, ::-1]
        s_bg_rev = ad.mul(sdf[:, ::-1, 0], -1.0)
        w_o, _ = compute_weights(alphas_along(s_obj_rev, u))
        w_b, _ = compute_weights(alphas_along(s_bg_rev, u))
        d_o = normalized_depth(t_hat, w_o)
        d_b = normalized_depth(t_hat, w_b)
        return d_o, d_b, rd_valid

    # -- background-only patch ----------------------------------------------
    def render_background_patch(self, camera: Camera, corner, patch: int, rng):
        """Background-head depth/normal over a P x P patch + full-render mask.

        corner is the (x, y) of the patch's top-left pixel; the patch must be
        inside the image. Returns (depth (P,P), normal (P,P,3), mask (P,P)).
        """
        x0, y0 = corner
        if x0 < 0 or y0 < 0 or x0 + patch > camera.width or y0 + patch > camera.height:
            raise ValueError("patch out of image bounds")
        ys, xs = np.mgrid[y0:y0 + patch, x0:x0 + patch]
        o, d = pixel_rays(camera, xs.astype(np.float64), ys.astype(np.float64))
        o = o.reshape(-1, 3)
        d = d.reshape(-1, 3)
        t = self.sample_batch(o, d, rng, bg_only=True)
        if t is None:
            raise ValueError("patch rays miss the bounding sphere")
        B, n = t.shape
        pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
        sdf_f, _, jac = self.field.geometry(pts, with_jacobian=True)
        s_bg = ad.reshape(sdf_f[:, 0], (B, n))
        u = self.field.u()
        weights, _ = compute_weights(alphas_along(s_bg, u))
        depth = normalized_depth(t, weights)
        g_bg = self.field.select_head(jac, np.zeros(len(pts), dtype=np.int64))
        n_pt = normalize_rows(g_bg)
        normal = normalize_rows(composite_batch(ad.reshape(n_pt, (B, n, 3)), weights))
        # mask from the full k-head render of the same pixels (geometry only)
        full_out, _ = self.render_batch(o, d, rng, want_color=False,
                                        with_jacobian=False)
        mask = full_out.mask_nonbg.reshape(patch, patch)
        return (ad.reshape(depth, (patch, patch)),
                ad.reshape(normal, (patch, patch, 3)),
                mask)

    # -- single pixel (spec-shaped) ------------------------------------------
    def render_pixel(self, camera: Camera, pixel, rng, frame_id=0, want_color=True):
        o, d = generate_ray(camera, pixel)
        out, ss = self.render_batch(o[None], d[None], rng,
                                    frame_ids=np.array([frame_id]),
                                    want_color=want_color, want_reversed=True)
        return out, ss
