"""Mesh extraction and mesh-level auditing.

Marching cubes over a regular grid with the full 256-configuration table. The
table is built once at import from the cube's face structure: cut edges on
each face are paired around that face's inside corners (a fixed rule both
neighboring cells agree on), the resulting loops are fan-triangulated, and
orientation follows the local inside-to-outside direction. Cut edges depend
only on corner signs, so negating the field keeps every vertex and reverses
every triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Corner layout: bit i set when corner i is inside (value < level).
_CORNER_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)

_EDGE_CORNERS = np.array([
    [0, 1], [1, 2], [2, 3], [3, 0],
    [4, 5], [5, 6], [6, 7], [7, 4],
    [0, 4], [1, 5], [2, 6], [3, 7],
], dtype=np.int64)

# Each face: corners in cyclic order and the edges between consecutive ones.
_FACES = [
    ([0, 1, 2, 3], [0, 1, 2, 3]),
    ([4, 5, 6, 7], [4, 5, 6, 7]),
    ([0, 1, 5, 4], [0, 9, 4, 8]),
    ([1, 2, 6, 5], [1, 10, 5, 9]),
    ([2, 3, 7, 6], [2, 11, 6, 10]),
    ([3, 0, 4, 7], [3, 8, 7, 11]),
]

# Local edge -> (cell offset, axis) for a global edge key.
_EDGE_GLOBAL = [
    ((0, 0, 0), 0), ((1, 0, 0), 1), ((0, 1, 0), 0), ((0, 0, 0), 1),
    ((0, 0, 1), 0), ((1, 0, 1), 1), ((0, 1, 1), 0), ((0, 0, 1), 1),
    ((0, 0, 0), 2), ((1, 0, 0), 2), ((1, 1, 0), 2), ((0, 1, 0), 2),
]


def _face_pairs(inside, corners, edges):
    """Pair the cut edges of one face.

    Two cuts pair directly. Four cuts (the ambiguous saddle) pair around the
    diagonal through the face's minimum-offset corner: a sign-independent rule,
    so complementary configurations tile identically and the two cells sharing
    a grid face always agree (the minimum corner is the same physical point).
    """
    cut = [i for i in range(4)
           if inside[corners[i]] != inside[corners[(i + 1) % 4]]]
    if len(cut) == 0:
        return []
    if len(cut) == 2:
        return [(edges[cut[0]], edges[cut[1]])]
    mi = min(range(4), key=lambda i: tuple(_CORNER_OFFSETS[corners[i]]))
    return [(edges[(mi - 1) % 4], edges[mi]),
            (edges[(mi + 1) % 4], edges[(mi + 2) % 4])]


def _build_case(case: int):
    inside = [(case >> i) & 1 == 1 for i in range(8)]
    links: dict[int, list[int]] = {}
    for corners, edges in _FACES:
        for a, b in _face_pairs(inside, corners, edges):
            links.setdefault(a, []).append(b)
            links.setdefault(b, []).append(a)
    # edge midpoints suffice for orientation decisions
    mids = 0.5 * (_CORNER_OFFSETS[_EDGE_CORNERS[:, 0]]
                  + _CORNER_OFFSETS[_EDGE_CORNERS[:, 1]]).astype(np.float64)
    tris = []
    remaining = set(links)
    while remaining:
        # canonical traversal: start at the smallest edge id, walk toward its
        # smaller neighbor; orientation is applied as a winding flip only, so
        # complementary cases emit mirrored triangles
        start = min(remaining)
        loop = [start]
        prev = None
        cur = start
        while True:
            nxt = [e for e in links[cur] if e != prev]
            step = min(nxt) if cur == start and prev is None else \
                (nxt[0] if nxt else links[cur][0])
            if step == start:
                break
            loop.append(step)
            prev, cur = cur, step
        remaining -= set(loop)
        if len(loop) < 3:
            continue
        pts = mids[loop]
        # Newell normal of the loop polygon
        nrm = np.zeros(3)
        for i in range(len(loop)):
            a, b = pts[i], pts[(i + 1) % len(loop)]
            nrm += np.cross(a, b)
        ref_out = np.zeros(3)
        ref_in = np.zeros(3)
        for e in loop:
            c0, c1 = _EDGE_CORNERS[e]
            pi, po = (c0, c1) if inside[c0] else (c1, c0)
            ref_in += _CORNER_OFFSETS[pi]
            ref_out += _CORNER_OFFSETS[po]
        flip = np.dot(nrm, (ref_out - ref_in)) < 0
        for i in range(1, len(loop) - 1):
            if flip:
                tris.append((loop[0], loop[i + 1], loop[i]))
            else:
                tris.append((loop[0], loop[i], loop[i + 1]))
    return tris


_TRI_TABLE = [_build_case(c) for c in range(256)]
_TRI_COUNTS = np.array([len(t) for t in _TRI_TABLE])
_TRI_ARRAYS = [np.asarray(t, dtype=np.int64).reshape(-1, 3) for t in _TRI_TABLE]


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def cleaned(self) -> "TriangleMesh":
        """Drop degenerate (zero-area) triangles and unused vertices."""
        if self.is_empty:
            return self
        keep = self.triangle_areas() > 1e-12
        tris = self.triangles[keep]
        used = np.unique(tris)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[tris])


def marching_cubes_grid(volume: np.ndarray, lo, hi, level: float = 0.0) -> TriangleMesh:
    """Extract the level set of a sampled volume over the box [lo, hi]."""
    vol = np.asarray(volume, dtype=np.float64) - level
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    rx, ry, rz = vol.shape
    inside = vol < 0.0
    case = np.zeros((rx - 1, ry - 1, rz - 1), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(_CORNER_OFFSETS):
        case |= (inside[ox:rx - 1 + ox, oy:ry - 1 + oy, oz:rz - 1 + oz]
                 .astype(np.uint16) << bit)
    active = np.nonzero((case > 0) & (case < 255))
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cases = case[active]
    cells = np.stack(active, axis=1)                       # (A, 3)

    order = np.argsort(cases, kind="stable")
    cases = cases[order]
    cells = cells[order]
    bounds = np.searchsorted(cases, np.arange(257))
    tri_edge_keys = []
    for c in range(1, 255):
        s, e = bounds[c], bounds[c + 1]
        if s == e or _TRI_COUNTS[c] == 0:
            continue
        sub = cells[s:e]                                    # (m, 3)
        tt = _TRI_ARRAYS[c]                                 # (nt, 3) local edges
        offs = np.array([_EDGE_GLOBAL[e_][0] for e_ in tt.ravel()], dtype=np.int64)
        axes = np.array([_EDGE_GLOBAL[e_][1] for e_ in tt.ravel()], dtype=np.int64)
        base = sub[:, None, :] + offs[None, :, :]           # (m, nt*3, 3)
        key = ((base[..., 0] * ry + base[..., 1]) * rz + base[..., 2]) * 3 + axes
        tri_edge_keys.append(key.reshape(-1, 3))
    keys = np.concatenate(tri_edge_keys, axis=0)
    uniq, tris = np.unique(keys, return_inverse=True)
    tris = tris.reshape(-1, 3)

    axes = uniq % 3
    lin = uniq // 3
    iz = lin % rz
    iy = (lin // rz) % ry
    ix = lin // (rz * ry)
    p0 = np.stack([ix, iy, iz], axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axes] += 1
    v0 = vol[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = vol[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = v0 / (v0 - v1)
    step = (hi - lo) / (np.array(vol.shape, dtype=np.float64) - 1.0)
    verts = lo + (p0 + t[:, None] * (p1 - p0)) * step
    return TriangleMesh(verts, tris).cleaned()


def marching_cubes(field, head: int, resolution: int, bounds) -> TriangleMesh:
    """Zero level set of one math head (1..k) sampled on a regular grid."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    lo, hi = np.asarray(bounds[0], np.float64), np.asarray(bounds[1], np.float64)
    axes = [np.linspace(lo[c], hi[c], resolution) for c in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vol = np.empty(len(pts))
    chunk = 262144
    for s in range(0, len(pts), chunk):
        vol[s:s + chunk] = field.sdf_values(pts[s:s + chunk])[:, head - 1]
    vol = vol.reshape(resolution, resolution, resolution)
    return marching_cubes_grid(vol, lo, hi)


def _edge_counts(mesh: TriangleMesh):
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    keys = edges[:, 0] * (len(mesh.vertices) + 1) + edges[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    return uniq, counts


def _components(mesh: TriangleMesh) -> np.ndarray:
    """Component label per triangle (connected through shared vertices)."""
    parent = np.arange(len(mesh.vertices))

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for tri in mesh.triangles:
        ra, rb, rc = find(tri[0]), find(tri[1]), find(tri[2])
        parent[rb] = ra
        parent[rc] = ra
    return np.array([find(t[0]) for t in mesh.triangles])


def watertight_check(mesh: TriangleMesh) -> dict:
    """Boundary-edge audit: closed iff the largest-area component has none."""
    if mesh.is_empty:
        raise ValueError("watertight check needs a non-empty mesh")
    uniq, counts = _edge_counts(mesh)
    boundary_total = int((counts == 1).sum())
    comp = _components(mesh)
    labels = np.unique(comp)
    areas = mesh.triangle_areas()
    comp_area = {lab: float(areas[comp == lab].sum()) for lab in labels}
    largest = max(comp_area, key=comp_area.get)
    main = TriangleMesh(mesh.vertices, mesh.triangles[comp == largest])
    _, main_counts = _edge_counts(main)
    boundary_main = int((main_counts == 1).sum())
    total_area = sum(comp_area.values())
    dust = 1.0 - comp_area[largest] / total_area if total_area > 0 else 0.0
    return {
        "closed": boundary_main == 0,
        "boundary_edges": boundary_main,
        "boundary_edges_total": boundary_total,
        "components": int(len(labels)),
        "dust_area_fraction": float(dust),
    }


def sample_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """n points, area-weighted uniform over the triangles."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    pdf = areas / areas.sum()
    pick = rng.choice(len(pdf), size=n, p=pdf)
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    tri = mesh.triangles[pick]
    a = mesh.vertices[tri[:, 0]]
    b = mesh.vertices[tri[:, 1]]
    c = mesh.vertices[tri[:, 2]]
    return a + u * (b - a) + v * (c - a)


def transform_mesh(mesh: TriangleMesh, scale: float, center) -> TriangleMesh:
    """Apply the dataset's world->normalized similarity to a mesh."""
    return TriangleMesh(scale * (mesh.vertices - np.asarray(center)), mesh.triangles)
