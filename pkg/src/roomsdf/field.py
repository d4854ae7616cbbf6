"""The compositional geometry/appearance representation.

One geometry MLP emits k signed-distance heads (head index 1, array column 0,
is the background) plus a feature vector; the scene SDF is the per-point
minimum over heads. Appearance is a second MLP conditioned on position, view
direction, scene normal, geometry feature and a learned per-frame code.

Spatial gradients are produced by forward-mode Jacobian propagation through
the same graph, so losses built on normals backpropagate exactly into the
parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FieldConfig:
    """Shape of the compositional field. Defaults are the full-scale network;
    the desk-scale training runs shrink width/depth through these knobs."""

    k: int = 2
    gamma: float = 20.0
    pe_levels: int = 6
    hidden_width: int = 256
    depth: int = 8
    skip_layer: int = 4
    feature_dim: int = 256
    app_hidden: int = 256
    app_depth: int = 2
    app_code_dim: int = 32
    view_pe_levels: int = 4
    softplus_beta: float = 100.0
    init_radius: float = 0.5
    u_init: float = 0.05

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least background plus one object head")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not (0 < self.skip_layer < self.depth):
            raise ValueError("skip layer must be strictly inside the hidden stack")

    @property
    def enc_dim(self) -> int:
        return 3 + 6 * self.pe_levels

    @property
    def view_enc_dim(self) -> int:
        return 3 + 6 * self.view_pe_levels

    def geometry_layer_shapes(self):
        w, e = self.hidden_width, self.enc_dim
        shapes = [(e, w)]
        for li in range(1, self.depth):
            shapes.append((w + e, w) if li == self.skip_layer else (w, w))
        shapes.append((w, self.k + self.feature_dim))
        return shapes

    def appearance_layer_shapes(self):
        din = 3 + self.view_enc_dim + 3 + self.feature_dim + self.app_code_dim
        shapes = [(din, self.app_hidden)]
        for _ in range(1, self.app_depth):
            shapes.append((self.app_hidden, self.app_hidden))
        shapes.append((self.app_hidden, 3))
        return shapes


@dataclass
class FieldSample:
    """Per-point geometry readout: k SDF values, feature vector, the point."""

    sdf: np.ndarray
    feature: np.ndarray
    point: np.ndarray


def encode_position(p, pe_levels: int):
    """[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin/cos(2^{L-1} pi p)].

    Works on Tensors (graph-tracked) and on plain arrays; output length is
    3 + 6*pe_levels along the last axis.
    """
    if isinstance(p, Tensor):
        parts = [p]
        for level in range(pe_levels):
            w = (2.0**level) * math.pi
            parts.append(ad.sin(ad.mul(p, w)))
            parts.append(ad.cos(ad.mul(p, w)))
        return ad.concat(parts, axis=-1) if pe_levels else p
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for level in range(pe_levels):
        w = (2.0**level) * math.pi
        parts.append(np.sin(w * p))
        parts.append(np.cos(w * p))
    return np.concatenate(parts, axis=-1)


def encoding_jacobian(p: np.ndarray, pe_levels: int) -> np.ndarray:
    """d encode / d p as an (n, 3, enc_dim) array (constant w.r.t. params)."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    blocks = [eye]
    for level in range(pe_levels):
        w = (2.0**level) * math.pi
        dsin = w * np.cos(w * p)  # (n, 3)
        dcos = -w * np.sin(w * p)
        blocks.append(eye * dsin[:, None, :])
        blocks.append(eye * dcos[:, None, :])
    return np.ascontiguousarray(np.concatenate(blocks, axis=2))


def semantic_transform(sdf, gamma: float):
    """h_j = gamma / (1 + exp(gamma * s_j)); strictly decreasing in s_j."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(sdf, Tensor):
        return ad.mul(ad.sigmoid(ad.mul(sdf, -gamma)), gamma)
    sdf = np.asarray(sdf, dtype=np.float64)
    x = -gamma * sdf
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return gamma * sig


def scene_sdf(sdf):
    """Minimum over heads (last axis); ties resolve to the lowest head index."""
    if isinstance(sdf, Tensor):
        return ad.reduce_min(sdf, axis=-1)
    return np.min(np.asarray(sdf), axis=-1)


class CompositionalField:
    """k-head geometry network + appearance network + per-frame codes + u."""

    def __init__(self, config: FieldConfig, n_frames: int, seed: int = 0):
        self.config = config
        self.n_frames = int(n_frames)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1E1D]))
        self.geo_w, self.geo_b = ad.geometric_init(
            config.geometry_layer_shapes(), config.init_radius, rng,
            n_heads=config.k, skip_layer=config.skip_layer,
            softplus_beta=config.softplus_beta)
        self.app_w, self.app_b = [], []
        for din, dout in config.appearance_layer_shapes():
            self.app_w.append(Tensor(rng.normal(0, np.sqrt(2.0 / din), (din, dout)),
                                     requires_grad=True))
            self.app_b.append(Tensor(np.zeros(dout), requires_grad=True))
        # final appearance layer small so colors start near mid-gray
        self.app_w[-1].data *= 0.1
        self.codes = Tensor(np.zeros((self.n_frames, config.app_code_dim)),
                            requires_grad=True)
        self.rho = Tensor(np.log(config.u_init) / 10.0, requires_grad=True)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.geo_w, self.geo_b)):
            out[f"geo_w{i}"] = w
            out[f"geo_b{i}"] = b
        for i, (w, b) in enumerate(zip(self.app_w, self.app_b)):
            out[f"app_w{i}"] = w
            out[f"app_b{i}"] = b
        out["codes"] = self.codes
        out["rho"] = self.rho
        return out

    def u(self) -> Tensor:
        """Learnable compositing sharpness, kept positive as exp(10*rho)."""
        return ad.exp(ad.mul(self.rho, 10.0))

    # -- geometry -----------------------------------------------------------
    def geometry(self, points, with_jacobian: bool = False):
        """Evaluate the geometry net.

        points: (n, 3) array or Tensor (treated as constants).
        Returns (sdf (n,k), feature (n,F), jac (n,3,k) or None); all Tensors
        tracking parameter gradients.
        """
        cfg = self.config
        pts = points.data if isinstance(points, Tensor) else np.asarray(points, np.float64)
        enc = ad.constant(encode_position(pts, cfg.pe_levels))
        h = enc
        jac = None
        if with_jacobian:
            j0 = ad.constant(encoding_jacobian(pts, cfg.pe_levels))
            jac = j0
        n_layers = len(self.geo_w)
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for li, (w, b) in enumerate(zip(self.geo_w, self.geo_b)):
            if li == cfg.skip_layer:
                h = ad.mul(ad.concat([h, enc], axis=-1), inv_sqrt2)
                if with_jacobian:
                    jac = ad.mul(ad.concat([jac, j0], axis=-1), inv_sqrt2)
            z = ad.add(ad.matmul(h, w), b)
            if with_jacobian:
                jac = ad.matmul(jac, w)
            if li < n_layers - 1:
                h = ad.softplus(z, beta=cfg.softplus_beta)
                if with_jacobian:
                    sig = ad.sigmoid(ad.mul(z, cfg.softplus_beta))
                    n = pts.shape[0]
                    jac = ad.mul(jac, ad.reshape(sig, (n, 1, sig.shape[-1])))
            else:
                h = z
        sdf = h[:, : cfg.k]
        feat = h[:, cfg.k:]
        if not (np.all(np.isfinite(sdf.data)) and np.all(np.isfinite(feat.data))):
            raise ad.NonFiniteError("geometry network produced non-finite output")
        if with_jacobian:
            jac = jac[:, :, : cfg.k]
        return sdf, feat, jac

    def eval_geometry(self, point) -> FieldSample:
        """Single/batched pure readout (no gradients) as FieldSample."""
        pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
        sdf, feat, _ = self.geometry(pts, with_jacobian=False)
        return FieldSample(sdf=sdf.data.copy(), feature=feat.data.copy(), point=pts)

    def sdf_values(self, points) -> np.ndarray:
        """(n, k) SDF values, no graph."""
        sdf, _, _ = self.geometry(points, with_jacobian=False)
        return sdf.data

    @staticmethod
    def select_head(jac: Tensor, indices: np.ndarray) -> Tensor:
        """Pick one head's spatial gradient per point: (n,3,k) -> (n,3)."""
        n = jac.shape[0]
        idx = np.broadcast_to(np.asarray(indices).reshape(n, 1, 1), (n, 3, 1))
        return ad.reshape(ad.take_along(jac, idx, axis=2), (n, 3))

    def scene_normal(self, sdf: Tensor, jac: Tensor) -> Tensor:
        """Gradient of the scene SDF: the argmin head's gradient per point."""
        idx = np.argmin(sdf.data, axis=1)
        return self.select_head(jac, idx)

    def eval_normal(self, point) -> np.ndarray:
        """Unnormalized spatial gradient of the scene SDF at given points."""
        pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
        sdf, _, jac = self.geometry(pts, with_jacobian=True)
        return self.scene_normal(sdf, jac).data.copy()

    # -- appearance ---------------------------------------------------------
    def color(self, points, normals, view_dirs, features, frame_ids) -> Tensor:
        """View-dependent rgb in (0,1)^3.

        normals/features may be Tensors (gradients flow through them);
        points/view_dirs are constants; frame_ids index the code table.
        """
        cfg = self.config
        fids = np.asarray(frame_ids, dtype=np.int64)
        if fids.min(initial=0) < 0 or fids.max(initial=0) >= self.n_frames:
            raise ValueError(f"unknown frame id in {np.unique(fids)}; "
                             f"{self.n_frames} appearance codes registered")
        pts = points.data if isinstance(points, Tensor) else np.asarray(points, np.float64)
        vd = view_dirs.data if isinstance(view_dirs, Tensor) else np.asarray(view_dirs, np.float64)
        venc = ad.constant(encode_position(vd, cfg.view_pe_levels))
        code = ad.take(self.codes, fids, axis=0)
        h = ad.concat([ad.constant(pts), venc, ad.as_tensor(normals),
                       ad.as_tensor(features), code], axis=-1)
        n_layers = len(self.app_w)
        for li, (w, b) in enumerate(zip(self.app_w, self.app_b)):
            h = ad.add(ad.matmul(h, w), b)
            if li < n_layers - 1:
                h = ad.relu(h)
        return ad.sigmoid(h)

    def eval_color(self, point, normal, view_dir, feature, frame_id) -> np.ndarray:
        """Pure single/batched color readout."""
        pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
        nrm = np.atleast_2d(np.asarray(normal, dtype=np.float64))
        vd = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
        ft = np.atleast_2d(np.asarray(feature, dtype=np.float64))
        fid = np.full(pts.shape[0], frame_id, dtype=np.int64)
        return self.color(pts, ad.constant(nrm), vd, ad.constant(ft), fid).data.copy()
