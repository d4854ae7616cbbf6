"""File formats for datasets and results: PFM, PNG, OBJ, camera JSON.

PFM follows the portable-float-map convention: 'PF' (rgb) / 'Pf' (grayscale),
negative scale marks little-endian, scanlines stored bottom-to-top, float32.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports HxW or HxWx3, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dt).astype(np.float32)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def write_png(path, data: np.ndarray) -> None:
    """8-bit PNG; HxW (mode L) or HxWx3 (RGB). 16-bit for uint16 grayscale."""
    data = np.asarray(data)
    if data.dtype == np.uint16:
        Image.fromarray(data, mode="I;16").save(path)
        return
    if data.dtype != np.uint8:
        raise ValueError("expected uint8 or uint16 image data")
    Image.fromarray(data).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("# triangle mesh\n")
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in np.asarray(triangles, dtype=np.int64):
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path):
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for i in range(1, len(idx) - 1):  # fan for polygons
                    tris.append([idx[0], idx[i], idx[i + 1]])
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    return v, t


def write_cameras(path, intrinsics, cam_to_world, width: int, height: int) -> None:
    """intrinsics: (n,3,3); cam_to_world: (n,4,4); row-major lists on disk."""
    frames = []
    for k, c2w in zip(intrinsics, cam_to_world):
        frames.append({
            "intrinsics": np.asarray(k, dtype=np.float64).reshape(-1).tolist(),
            "cam_to_world": np.asarray(c2w, dtype=np.float64).reshape(-1).tolist(),
        })
    with open(path, "w") as f:
        json.dump({"width": width, "height": height, "convention": "opencv",
                   "frames": frames}, f, indent=1)


def read_cameras(path):
    with open(path) as f:
        d = json.load(f)
    ks = np.array([fr["intrinsics"] for fr in d["frames"]], dtype=np.float64).reshape(-1, 3, 3)
    c2w = np.array([fr["cam_to_world"] for fr in d["frames"]], dtype=np.float64).reshape(-1, 4, 4)
    return ks, c2w, int(d["width"]), int(d["height"])


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
