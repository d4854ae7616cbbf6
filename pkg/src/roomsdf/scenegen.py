"""Analytic synthetic scenes and their ground-truth rendering.

A scene is an axis-aligned box room (the background) plus primitives strictly
inside it. Two sign conventions coexist and are bridged here once:

* ``analytic_sdf`` reports the room head like a solid box (negative in the
  room's interior air), matching the artifact's documented convention.
* rendering, zero-crossing search and the trained field's background head
  need the opposite sign (positive in the air, negative behind the walls),
  so the GT tracer and :class:`AnalyticField` negate the room head.

Datasets are written in world units; ``meta.json`` records the similarity
transform that maps them into the normalized training frame.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio
from .renderer import Camera, camera_ray_grid

TRACE_TOL = 1e-7
TRACE_STEPS = 256


# -- primitive SDFs (vectorized over (n, 3) points) -------------------------


def sphere_sdf(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def box_sdf(p, center, half_extents):
    q = np.abs(p - center) - half_extents
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def rounded_box_sdf(p, center, half_extents, radius):
    """Exact SDF of a box with rounded corners; half_extents are outer."""
    q = np.abs(p - center) - (half_extents - radius)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - radius


@dataclass
class Primitive:
    shape: str                  # sphere | box | rounded-box
    label: int                  # math head index, >= 2
    center: np.ndarray
    size: np.ndarray            # sphere: [r]; box: he(3); rounded-box: he(3)+[r]
    albedo: tuple = (0.7, 0.7, 0.7)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if self.shape not in ("sphere", "box", "rounded-box"):
            raise ValueError(f"unknown primitive shape {self.shape}")
        if self.label < 2:
            raise ValueError("primitive labels start at 2 (1 is the background)")

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        if self.shape == "sphere":
            return sphere_sdf(p, self.center, self.size[0])
        if self.shape == "box":
            return box_sdf(p, self.center, self.size[:3])
        return rounded_box_sdf(p, self.center, self.size[:3], self.size[3])

    def bounding_radius(self) -> float:
        if self.shape == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size[:3]))

    def bbox(self):
        if self.shape == "sphere":
            he = np.full(3, self.size[0])
        else:
            he = self.size[:3]
        return self.center - he, self.center + he


@dataclass
class AnalyticScene:
    room_half_extents: np.ndarray
    primitives: list
    name: str = "scene"
    room_albedo: tuple = (0.72, 0.70, 0.64)
    light_positions: np.ndarray = None
    light_intensities: tuple = (0.75, 0.55)
    ambient: float = 0.30

    def __post_init__(self):
        self.room_half_extents = np.asarray(self.room_half_extents, dtype=np.float64)
        he = self.room_half_extents
        if self.light_positions is None:
            self.light_positions = np.array([
                [0.45 * he[0], 0.35 * he[1], 0.80 * he[2]],
                [-0.30 * he[0], -0.50 * he[1], 0.70 * he[2]],
            ])
        labels = [pr.label for pr in self.primitives]
        if sorted(labels) != list(range(2, 2 + len(labels))):
            raise ValueError("primitive labels must be exactly 2..k")
        for pr in self.primitives:
            lo, hi = pr.bbox()
            if np.any(lo < -he + 1e-6) or np.any(hi > he - 1e-6):
                raise ValueError(f"primitive label {pr.label} not strictly inside the room")

    @property
    def k(self) -> int:
        return 1 + len(self.primitives)

    def albedo_table(self) -> np.ndarray:
        """(k, 3) albedo by math head index - 1 (row 0 = background)."""
        table = [self.room_albedo] + [pr.albedo for pr in self.primitives]
        return np.asarray(table, dtype=np.float64)


def analytic_sdf(scene: AnalyticScene, p, head: int):
    """Exact SDF of one math head (1 = room, negative in the interior air)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if head == 1:
        return box_sdf(p, np.zeros(3), scene.room_half_extents)
    if not 2 <= head <= scene.k:
        raise ValueError(f"head {head} out of range 1..{scene.k}")
    return scene.primitives[head - 2].sdf(p)


def render_head_sdfs(scene: AnalyticScene, p) -> np.ndarray:
    """(n, k) per-head SDFs in the rendering convention (air positive)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    cols = [-analytic_sdf(scene, p, 1)]
    for pr in scene.primitives:
        cols.append(pr.sdf(p))
    return np.stack(cols, axis=-1)


def scene_min_sdf(scene: AnalyticScene, p) -> np.ndarray:
    return render_head_sdfs(scene, p).min(axis=-1)


def head_normal(scene: AnalyticScene, p, head_col: np.ndarray, h: float = 1e-6):
    """Central-difference gradient of each point's hit head (render sign)."""
    p = np.atleast_2d(p)
    n = np.zeros_like(p)
    for c in range(3):
        dp = np.zeros(3)
        dp[c] = h
        sp = render_head_sdfs(scene, p + dp)
        sm = render_head_sdfs(scene, p - dp)
        rows = np.arange(len(p))
        n[:, c] = (sp[rows, head_col] - sm[rows, head_col]) / (2 * h)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def sphere_trace(scene: AnalyticScene, origin, direction, t_max: float | None = None):
    """First surface along one ray: {'t', 'label', 'normal'} or None."""
    res = sphere_trace_batch(scene, np.asarray(origin, np.float64)[None],
                             np.asarray(direction, np.float64)[None], t_max)
    t, label, normal = res
    if not np.isfinite(t[0]):
        return None
    return {"t": float(t[0]), "label": int(label[0]), "normal": normal[0]}


def sphere_trace_batch(scene: AnalyticScene, origins, dirs, t_max=None):
    """Vectorized march on the scene-minimum SDF (rendering sign).

    Returns (t (B,), label math-head (B,), normal (B,3)); t is NaN on a miss.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    B = len(origins)
    if t_max is None:
        t_max = float(4.0 * np.linalg.norm(scene.room_half_extents))
    t = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    for _ in range(TRACE_STEPS):
        active = ~done & (t <= t_max)
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        s = scene_min_sdf(scene, p)
        hit = s < TRACE_TOL
        idx = np.nonzero(active)[0]
        done[idx[hit]] = True
        t[idx[~hit]] += s[~hit]
    missed = ~done
    t[missed] = np.nan
    p_hit = origins + t[:, None] * dirs
    p_hit[missed] = 0.0
    heads = render_head_sdfs(scene, p_hit)
    label_col = np.argmin(heads, axis=-1)
    normal = head_normal(scene, p_hit, label_col)
    return t, label_col + 1, normal


# -- closed-form intersection oracles (used by tests) ------------------------


def ray_sphere_intersect(o, d, center, radius):
    oc = np.asarray(o, np.float64) - center
    b = float(np.dot(oc, d))
    c = float(np.dot(oc, oc)) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    t = -b - np.sqrt(disc)
    if t < 0:
        t = -b + np.sqrt(disc)
    return float(t) if t >= 0 else None


def ray_box_intersect(o, d, center, half_extents):
    o = np.asarray(o, np.float64) - center
    d = np.asarray(d, np.float64)
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    t0 = (-half_extents - o) * inv
    t1 = (half_extents - o) * inv
    tmin = np.max(np.minimum(t0, t1))
    tmax = np.min(np.maximum(t0, t1))
    if tmax < max(tmin, 0.0):
        return None
    return float(tmin if tmin > 0 else tmax)


# -- cameras ------------------------------------------------------------------


def look_at_cam_to_world(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """OpenCV-convention pose: z forward, y down, x right."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    if abs(np.dot(f, upv)) > 0.999:
        upv = np.array([0.0, 1.0, 0.0])
    x = np.cross(f, upv)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, f, position
    return m


def default_intrinsics(width: int, height: int, fov_deg: float = 85.0) -> np.ndarray:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return np.array([[f, 0.0, width / 2.0],
                     [0.0, f, height / 2.0],
                     [0.0, 0.0, 1.0]])


def build_trajectory(scene: AnalyticScene, n_frames: int, width: int, height: int):
    """Interior arc (~210 degrees of azimuth), recentred on the room middle.

    The arc faces the -x wall (where the flush objects sit); camera heights
    oscillate a little for floor/ceiling coverage.
    """
    he = scene.room_half_extents
    radius = 0.8 * min(he[0], he[1])
    theta = np.linspace(-np.radians(105), np.radians(105), n_frames)
    z = 0.35 * he[2] * np.sin(1.7 * theta + 0.5)
    pos = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    pos -= pos.mean(axis=0)
    target = np.array([-0.25 * he[0], 0.0, -0.15 * he[2]])
    k = default_intrinsics(width, height)
    cams = []
    for p in pos:
        cams.append(Camera(intrinsics=k.copy(),
                           cam_to_world=look_at_cam_to_world(p, target),
                           width=width, height=height))
    return cams


def normalize_poses(cameras):
    """Similarity (uniform scale + translation) putting camera centers in the
    0.9 ball. Returns (new_cameras, scale, center)."""
    if len(cameras) == 0:
        raise ValueError("need at least one camera")
    centers = np.stack([c.position for c in cameras])
    center = centers.mean(axis=0)
    dmax = float(np.max(np.linalg.norm(centers - center, axis=1)))
    scale = 0.9 / dmax if dmax > 1e-12 else 1.0
    out = []
    for c in cameras:
        m = c.cam_to_world.copy()
        m[:3, 3] = scale * (m[:3, 3] - center)
        out.append(Camera(intrinsics=c.intrinsics.copy(), cam_to_world=m,
                          width=c.width, height=c.height))
    return out, scale, center


# -- shading ------------------------------------------------------------------


def shade(scene: AnalyticScene, points, normals, labels_math) -> np.ndarray:
    """Lambertian shading with two fixed point lights + ambient."""
    albedo = scene.albedo_table()[np.asarray(labels_math) - 1]
    shading = np.full(len(points), scene.ambient)
    for lp, li in zip(scene.light_positions, scene.light_intensities):
        to_l = lp - points
        to_l /= np.maximum(np.linalg.norm(to_l, axis=-1, keepdims=True), 1e-12)
        shading = shading + li * np.maximum((normals * to_l).sum(axis=-1), 0.0)
    return np.clip(albedo * shading[:, None], 0.0, 1.0)


# -- ground-truth meshes ------------------------------------------------------

_BOX_FACES = np.array([
    [0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6],
    [0, 4, 5], [0, 5, 1], [3, 2, 6], [3, 6, 7],
    [0, 3, 7], [0, 7, 4], [1, 5, 6], [1, 6, 2],
])


def box_mesh(center, half_extents):
    he = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)],
                       dtype=np.float64)
    order = [0, 1, 3, 2, 4, 5, 7, 6]
    v = corners[order] * he + np.asarray(center, dtype=np.float64)
    return v, _BOX_FACES.copy()


def icosphere(center, radius, subdivisions: int = 3):
    phi = (1 + np.sqrt(5)) / 2
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    for _ in range(subdivisions):
        cache = {}
        verts = list(v)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        newf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            newf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.asarray(verts)
        f = np.asarray(newf, dtype=np.int64)
    return v * radius + np.asarray(center, dtype=np.float64), f


def primitive_mesh(pr: Primitive):
    if pr.shape == "sphere":
        return icosphere(pr.center, pr.size[0], 3)
    if pr.shape == "box":
        return box_mesh(pr.center, pr.size[:3])
    from .meshes import marching_cubes_grid
    lo, hi = pr.bbox()
    lo, hi = lo - 0.05, hi + 0.05
    res = 96
    axes = [np.linspace(lo[c], hi[c], res) for c in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vol = pr.sdf(pts).reshape(res, res, res)
    return marching_cubes_grid(vol, lo, hi)


# -- occlusion ----------------------------------------------------------------

_FACE_AXES = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]


def sample_room_surface(scene: AnalyticScene, n: int, rng):
    """Area-weighted samples on the room's interior faces.

    Returns (points (n,3), inward normals (n,3))."""
    he = scene.room_half_extents
    areas = np.array([he[1] * he[2], he[1] * he[2],
                      he[0] * he[2], he[0] * he[2],
                      he[0] * he[1], he[0] * he[1]]) * 4.0
    probs = areas / areas.sum()
    face = rng.choice(6, size=n, p=probs)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for fi, (axis, sign) in enumerate(_FACE_AXES):
        m = face == fi
        cnt = int(m.sum())
        if cnt == 0:
            continue
        others = [c for c in range(3) if c != axis]
        pts[m, axis] = sign * he[axis]
        for c in others:
            pts[m, c] = rng.uniform(-he[c], he[c], size=cnt)
        nrm[m, axis] = -sign
    return pts, nrm


def _segment_blocked(scene: AnalyticScene, starts, ends) -> np.ndarray:
    """True where the open segment hits any primitive (marched on their min SDF)."""
    d = ends - starts
    length = np.linalg.norm(d, axis=-1)
    d = d / np.maximum(length[:, None], 1e-12)
    B = len(starts)
    t = np.zeros(B)
    blocked = np.zeros(B, dtype=bool)
    lim = length - 1e-4
    if not scene.primitives:
        return blocked
    for _ in range(TRACE_STEPS):
        active = ~blocked & (t < lim)
        if not active.any():
            break
        p = starts[active] + t[active, None] * d[active]
        s = np.min(np.stack([pr.sdf(p) for pr in scene.primitives], axis=-1), axis=-1)
        idx = np.nonzero(active)[0]
        hit = s < 1e-6
        blocked[idx[hit]] = True
        t[idx[~hit]] += np.maximum(s[~hit], 1e-5)
    return blocked


def occlusion_labels(scene: AnalyticScene, cameras, n_surface_samples: int, rng):
    """Flag room-surface samples nobody can see.

    A sample is visible from a camera iff it faces the camera and the straight
    segment between them misses every primitive; occluded = visible to none.
    Returns (points (n,3) world, occluded flags (n,))."""
    pts, nrm = sample_room_surface(scene, n_surface_samples, rng)
    visible = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        c = cam.position
        facing = ((c - pts) * nrm).sum(axis=-1) > 1e-9
        cand = np.nonzero(facing & ~visible)[0]
        if len(cand) == 0:
            continue
        starts = np.broadcast_to(c, (len(cand), 3)).copy()
        blocked = _segment_blocked(scene, starts, pts[cand])
        visible[cand[~blocked]] = True
    return pts, ~visible


def visibility_raster_oracle(scene: AnalyticScene, cameras, pts, depth_maps,
                             tol: float = 1e-3) -> np.ndarray:
    """Z-buffer visibility cross-check: project each sample into every camera
    and compare against the traced depth map. Returns occluded flags."""
    visible = np.zeros(len(pts), dtype=bool)
    for cam, dm in zip(cameras, depth_maps):
        r = cam.rotation
        local = (pts - cam.position) @ r           # world -> camera
        z = local[:, 2]
        ok = z > 1e-6
        uv = local[:, :2] / np.maximum(z[:, None], 1e-12)
        k = cam.intrinsics
        px = k[0, 0] * uv[:, 0] + k[0, 2]
        py = k[1, 1] * uv[:, 1] + k[1, 2]
        xi = np.floor(px).astype(int)
        yi = np.floor(py).astype(int)
        ok &= (xi >= 0) & (xi < cam.width) & (yi >= 0) & (yi < cam.height)
        idx = np.nonzero(ok)[0]
        dist = np.linalg.norm(pts[idx] - cam.position, axis=-1)
        seen = dist <= dm[yi[idx], xi[idx]] + tol
        visible[idx[seen]] = True
    return ~visible


# -- dataset generation --------------------------------------------------------


def render_frame(scene: AnalyticScene, camera: Camera):
    """Trace every pixel: returns (rgb f64, mask file-labels u8, depth, normal_cam)."""
    o, d = camera_ray_grid(camera)
    flat_o = o.reshape(-1, 3)
    flat_d = d.reshape(-1, 3)
    t, label_math, normal_w = sphere_trace_batch(scene, flat_o, flat_d)
    if not np.all(np.isfinite(t)):
        raise RuntimeError("GT tracer missed inside a closed room")
    pts = flat_o + t[:, None] * flat_d
    rgb = shade(scene, pts, normal_w, label_math)
    normal_cam = normal_w @ camera.rotation           # R^T n, row-vector form
    h, w = camera.height, camera.width
    return (rgb.reshape(h, w, 3),
            (label_math - 1).astype(np.uint8).reshape(h, w),
            t.reshape(h, w),
            normal_cam.reshape(h, w, 3))


def generate_dataset(scene: AnalyticScene, out_dir, n_frames: int = 48,
                     resolution: int = 64, seed: int = 0,
                     n_occlusion_samples: int = 4096) -> Path:
    """Write the full on-disk dataset for a scene; returns the directory."""
    out = Path(out_dir)
    for sub in ("rgb", "mask", "depth", "normal", "gt"):
        dataio.ensure_dir(out / sub)
    cams = build_trajectory(scene, n_frames, resolution, resolution)
    _, scale, center = normalize_poses(cams)
    dataio.write_cameras(out / "cameras.json",
                         [c.intrinsics for c in cams],
                         [c.cam_to_world for c in cams],
                         resolution, resolution)
    for i, cam in enumerate(cams):
        rgb, mask, depth, normal = render_frame(scene, cam)
        dataio.write_png(out / "rgb" / f"{i:04}.png",
                         np.round(rgb * 255.0).astype(np.uint8))
        dataio.write_png(out / "mask" / f"{i:04}.png", mask)
        dataio.write_pfm(out / "depth" / f"{i:04}.pfm", depth)
        dataio.write_pfm(out / "normal" / f"{i:04}.pfm", normal)
    v, f = box_mesh(np.zeros(3), scene.room_half_extents)
    dataio.write_obj(out / "gt" / "background.obj", v, f)
    for pr in scene.primitives:
        v, f = primitive_mesh(pr)
        dataio.write_obj(out / "gt" / f"object_{pr.label - 1:02}.obj", v, f)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0CC1]))
    pts, occ = occlusion_labels(scene, cams, n_occlusion_samples, rng)
    dataio.write_json(out / "gt" / "occlusion.json",
                      {"points": pts.tolist(), "occluded": occ.astype(int).tolist()})
    dataio.write_json(out / "meta.json", {
        "name": scene.name,
        "k": scene.k,
        "room_half_extents": scene.room_half_extents.tolist(),
        "norm_scale": scale,
        "norm_center": center.tolist(),
        "n_frames": n_frames,
        "resolution": resolution,
        "label_convention": "file label = math head - 1; 0 is the background",
    })
    return out


# -- builtin scenes --------------------------------------------------------------

FLUSH_GAP = 2e-3


def builtin_scene(name: str) -> AnalyticScene:
    if name == "cube-against-wall":
        he = np.array([1.0, 1.0, 0.55])
        cube_he = 0.30
        prims = [
            Primitive("box", 2,
                      center=[-he[0] + FLUSH_GAP + cube_he, 0.15,
                              -he[2] + FLUSH_GAP + cube_he],
                      size=[cube_he, cube_he, cube_he],
                      albedo=(0.78, 0.26, 0.20)),
            Primitive("sphere", 3,
                      center=[0.30, -0.42, -he[2] + FLUSH_GAP + 0.22],
                      size=[0.22],
                      albedo=(0.22, 0.36, 0.80)),
        ]
        return AnalyticScene(he, prims, name=name)
    if name == "five-objects":
        he = np.array([1.0, 1.0, 0.60])
        prims = [
            Primitive("box", 2, center=[-he[0] + FLUSH_GAP + 0.24, -0.38,
                                        -he[2] + FLUSH_GAP + 0.26],
                      size=[0.24, 0.28, 0.26], albedo=(0.80, 0.30, 0.22)),
            Primitive("sphere", 3, center=[0.34, -0.40, -he[2] + FLUSH_GAP + 0.20],
                      size=[0.20], albedo=(0.20, 0.38, 0.80)),
            Primitive("rounded-box", 4, center=[0.10, 0.52, -he[2] + FLUSH_GAP + 0.18],
                      size=[0.20, 0.16, 0.18, 0.05], albedo=(0.25, 0.70, 0.30)),
            Primitive("sphere", 5, center=[-0.35, 0.42, 0.05],
                      size=[0.14], albedo=(0.85, 0.75, 0.25)),
            Primitive("box", 6, center=[0.55, 0.18, -he[2] + FLUSH_GAP + 0.15],
                      size=[0.15, 0.13, 0.15], albedo=(0.60, 0.30, 0.70)),
        ]
        return AnalyticScene(he, prims, name=name)
    raise ValueError(f"unknown builtin scene '{name}'")


# -- dataset loading ---------------------------------------------------------------


class InMemoryDataset:
    """Dataset-shaped object rendered on the fly (tests, gradient checks)."""

    def __init__(self, scene: AnalyticScene, n_frames: int = 4, resolution: int = 16,
                 n_occlusion: int = 256, seed: int = 0):
        self.scene = scene
        self.k = scene.k
        self.room_half_extents = scene.room_half_extents
        self.width = self.height = resolution
        self.cameras = build_trajectory(scene, n_frames, resolution, resolution)
        _, self.norm_scale, self.norm_center = normalize_poses(self.cameras)
        rgb, mask, depth, normal = [], [], [], []
        for cam in self.cameras:
            r, m, d, n = render_frame(scene, cam)
            rgb.append(r)
            mask.append(m)
            depth.append(d)
            normal.append(n)
        self.rgb = np.stack(rgb)
        self.mask_file = np.stack(mask)
        self.depth_world = np.stack(depth)
        self.normal_cam = np.stack(normal)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0CC1]))
        self.occlusion_points, self.occluded = occlusion_labels(
            scene, self.cameras, n_occlusion, rng)

    def __len__(self):
        return len(self.cameras)

    @property
    def mask_math(self) -> np.ndarray:
        return self.mask_file.astype(np.int64) + 1

    def normalized_cameras(self):
        cams = []
        for c in self.cameras:
            m = c.cam_to_world.copy()
            m[:3, 3] = self.norm_scale * (m[:3, 3] - self.norm_center)
            cams.append(Camera(c.intrinsics.copy(), m, c.width, c.height))
        return cams

    def to_normalized(self, pts_world: np.ndarray) -> np.ndarray:
        return self.norm_scale * (np.asarray(pts_world, np.float64) - self.norm_center)

    def gt_mesh(self, math_label: int):
        if math_label == 1:
            return box_mesh(np.zeros(3), self.scene.room_half_extents)
        return primitive_mesh(self.scene.primitives[math_label - 2])


class SceneDataset:
    """In-memory view of a generated dataset (world units on disk)."""

    def __init__(self, path):
        self.path = Path(path)
        meta = dataio.read_json(self.path / "meta.json")
        self.k = int(meta["k"])
        self.room_half_extents = np.asarray(meta["room_half_extents"])
        self.norm_scale = float(meta["norm_scale"])
        self.norm_center = np.asarray(meta["norm_center"])
        self.name = meta.get("name", "scene")
        ks, c2w, w, h = dataio.read_cameras(self.path / "cameras.json")
        self.width, self.height = w, h
        self.cameras = [Camera(k_, m, w, h) for k_, m in zip(ks, c2w)]
        n = len(self.cameras)
        rgb, mask, depth, normal = [], [], [], []
        for i in range(n):
            rgb.append(dataio.read_png(self.path / "rgb" / f"{i:04}.png"))
            mask.append(dataio.read_png(self.path / "mask" / f"{i:04}.png"))
            depth.append(dataio.read_pfm(self.path / "depth" / f"{i:04}.pfm"))
            normal.append(dataio.read_pfm(self.path / "normal" / f"{i:04}.pfm"))
        self.rgb = np.stack(rgb).astype(np.float64) / 255.0
        self.mask_file = np.stack(mask)
        if self.mask_file.max() >= self.k or self.mask_file.min() < 0:
            raise ValueError("mask labels outside 0..k-1")
        self.depth_world = np.stack(depth).astype(np.float64)
        self.normal_cam = np.stack(normal).astype(np.float64)
        occ = dataio.read_json(self.path / "gt" / "occlusion.json")
        self.occlusion_points = np.asarray(occ["points"], dtype=np.float64)
        self.occluded = np.asarray(occ["occluded"], dtype=bool)

    def __len__(self):
        return len(self.cameras)

    @property
    def mask_math(self) -> np.ndarray:
        """Masks as math head labels 1..k."""
        return self.mask_file.astype(np.int64) + 1

    def normalized_cameras(self):
        cams = []
        for c in self.cameras:
            m = c.cam_to_world.copy()
            m[:3, 3] = self.norm_scale * (m[:3, 3] - self.norm_center)
            cams.append(Camera(c.intrinsics.copy(), m, c.width, c.height))
        return cams

    def to_normalized(self, pts_world: np.ndarray) -> np.ndarray:
        return self.norm_scale * (np.asarray(pts_world, np.float64) - self.norm_center)

    def gt_mesh_path(self, math_label: int) -> Path:
        if math_label == 1:
            return self.path / "gt" / "background.obj"
        return self.path / "gt" / f"object_{math_label - 1:02}.obj"

    def gt_mesh(self, math_label: int):
        return dataio.read_obj(self.gt_mesh_path(math_label))


# -- analytic stand-in field ---------------------------------------------------------


class AnalyticField:
    """Duck-typed field backed by the GT scene (rendering sign convention).

    Used as the oracle in self-tests: background head positive in the air.
    Evaluates at normalized coordinates when a similarity is supplied.
    """

    class _Cfg:
        def __init__(self, k, gamma):
            self.k = k
            self.gamma = gamma

    def __init__(self, scene: AnalyticScene, scale: float = 1.0,
                 center=np.zeros(3), u: float = 3000.0, gamma: float = 20.0):
        self.scene = scene
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=np.float64)
        self.config = self._Cfg(scene.k, gamma)
        self._u = float(u)

    def u(self):
        return ad.constant(self._u)

    def _world(self, p_norm):
        return np.asarray(p_norm, np.float64) / self.scale + self.center

    def sdf_values(self, points) -> np.ndarray:
        return self.scale * render_head_sdfs(self.scene, self._world(points))

    def geometry(self, points, with_jacobian: bool = False):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        sdf = ad.constant(self.sdf_values(pts))
        feat = ad.constant(np.zeros((len(pts), 1)))
        jac = None
        if with_jacobian:
            h = 1e-6
            cols = []
            for c in range(3):
                dp = np.zeros(3)
                dp[c] = h
                cols.append((self.sdf_values(pts + dp) - self.sdf_values(pts - dp))
                            / (2 * h))
            jac = ad.constant(np.stack(cols, axis=1))
        return sdf, feat, jac

    select_head = staticmethod(lambda jac, idx: _analytic_select(jac, idx))

    def scene_normal(self, sdf, jac):
        idx = np.argmin(sdf.data, axis=1)
        return _analytic_select(jac, idx)


def _analytic_select(jac, indices):
    n = jac.shape[0]
    idx = np.broadcast_to(np.asarray(indices).reshape(n, 1, 1), (n, 3, 1))
    return ad.constant(np.take_along_axis(jac.data, idx, axis=2).reshape(n, 3))
