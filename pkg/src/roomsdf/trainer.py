"""The optimization loop: ray batches, periodic patches, Adam, checkpoints.

One iteration renders a uniform pixel batch, assembles the weighted objective
(color, cue depth/normal, semantics, eikonal, plus the three unobserved-region
regularizers behind their ablation switches) and applies a single Adam update
to every parameter including the appearance codes and the sharpness u.

Randomness is split into named streams (batch / patch / render / eikonal)
spawned from the seed, so toggling one regularizer does not shift the others
and checkpoint resume is bit-exact.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .field import CompositionalField, FieldConfig
from .renderer import Renderer, RendererConfig

CHECKPOINT_MAGIC = b"RICO"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 2000
    rays_per_iter: int = 512
    lr: float = 5e-4
    patch_size: int = 16          # full-scale value is 32
    patch_interval: int = 10
    seed: int = 0
    n_eikonal_uniform: int = 256
    use_bs: bool = True
    use_op: bool = True
    use_rd: bool = True
    weights: L.LossWeights = dc_field(default_factory=L.LossWeights)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    renderer: RendererConfig = dc_field(default_factory=RendererConfig)

    def __post_init__(self):
        if self.patch_size < 9:
            raise ValueError("patch_size must be at least 9")
        if self.iterations < 0 or self.rays_per_iter <= 0 or self.patch_interval <= 0:
            raise ValueError("counts must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = L.LossWeights(**d.get("weights", {}))
        fd = dict(d.get("field", {}))
        cls_field = FieldConfig(**fd)
        d["field"] = cls_field
        d["renderer"] = RendererConfig(**d.get("renderer", {}))
        return cls(**d)


def parse_config_file(path) -> TrainConfig:
    """Flat `key = value` overrides; dotted keys reach nested configs
    (field.hidden_width, renderer.n_coarse, weights.lambda_bs)."""
    base = TrainConfig()
    text = Path(path).read_text()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        target = base
        parts = key.split(".")
        for p in parts[:-1]:
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ValueError(f"unknown config key: {key}")
        current = getattr(target, leaf)
        if isinstance(current, bool):
            setattr(target, leaf, value.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(target, leaf, int(value))
        elif isinstance(current, float):
            setattr(target, leaf, float(value))
        else:
            setattr(target, leaf, value)
    return base


LOG_COLUMNS = "iter total rgb depth normal semantic eikonal bs op rd u"


class Trainer:
    def __init__(self, config: TrainConfig, dataset, resume: dict | None = None):
        self.config = config
        self.dataset = dataset
        if config.field.k != dataset.k:
            raise ValueError(f"field has {config.field.k} heads, dataset needs {dataset.k}")
        self.field = CompositionalField(config.field, n_frames=len(dataset),
                                        seed=config.seed)
        self.renderer = Renderer(self.field, config.renderer)
        self.iteration = 0
        ss = np.random.SeedSequence([config.seed, 0x7714])
        kids = ss.spawn(4)
        self.rng_batch = np.random.default_rng(kids[0])
        self.rng_patch = np.random.default_rng(kids[1])
        self.rng_render = np.random.default_rng(kids[2])
        self.rng_eik = np.random.default_rng(kids[3])
        self.param_names = list(self.field.parameters().keys())
        self.params = [self.field.parameters()[n] for n in self.param_names]
        self.adam = ad.AdamState.for_params(self.params, lr=config.lr)
        self._prepare_rays()
        self.log_lines: list[str] = []
        if resume is not None:
            self._load_state(resume)

    def _prepare_rays(self):
        from .renderer import camera_ray_grid
        cams = self.dataset.normalized_cameras()
        self.cam_rot = np.stack([c.rotation for c in cams])
        origins, dirs = [], []
        for c in cams:
            o, d = camera_ray_grid(c)
            origins.append(o[0, 0])
            dirs.append(d)
        self.ray_origins = np.stack(origins)            # (F, 3)
        self.ray_dirs = np.stack(dirs)                  # (F, H, W, 3)
        self.cameras_norm = cams

    # -- batching -----------------------------------------------------------
    def sample_ray_batch(self, B: int):
        ds = self.dataset
        F, H, W = len(ds), ds.height, ds.width
        flat = self.rng_batch.integers(0, F * H * W, size=B)
        f = flat // (H * W)
        py = (flat % (H * W)) // W
        px = flat % W
        batch = {
            "frame": f,
            "origins": self.ray_origins[f],
            "dirs": self.ray_dirs[f, py, px],
            "gt_rgb": ds.rgb[f, py, px],
            "gt_label": ds.mask_math[f, py, px],
            "cue_depth": ds.depth_world[f, py, px],
            "cue_normal": _renormalize(ds.normal_cam[f, py, px]),
            "rot": self.cam_rot[f],
        }
        return batch

    # -- one step -----------------------------------------------------------
    def train_step(self, batch=None, patch=None) -> L.LossBundle:
        cfg = self.config
        if batch is None:
            batch = self.sample_ray_batch(cfg.rays_per_iter)
        is_patch_iter = (self.iteration % cfg.patch_interval == 0)
        comps, total = self._build_losses(batch, is_patch_iter, patch)
        _, grads = ad.eval_and_grad(total, self.params)
        ad.adam_step(self.params, grads, self.adam)
        bundle = L.LossBundle(**{k: float(v.data) for k, v in comps.items()},
                              total=float(total.data))
        self.iteration += 1
        self.log_lines.append(self._format_log(bundle))
        return bundle

    def _build_losses(self, batch, is_patch_iter: bool, patch=None):
        """Assemble the objective graph; returns (component dict, total Tensor)."""
        cfg = self.config
        out, ss = self.renderer.render_batch(
            batch["origins"], batch["dirs"], self.rng_render,
            frame_ids=batch["frame"], want_color=True, with_jacobian=True,
            want_reversed=cfg.use_rd, t=batch.get("t"))

        comps: dict[str, Tensor] = {}
        comps["rgb"] = L.rgb_loss(out.color, batch["gt_rgb"])
        comps["depth"] = L.depth_consistency(out.depth, batch["cue_depth"])
        n_cam = _world_to_cam(out.normal, batch["rot"])
        comps["normal"] = L.normal_consistency(n_cam, batch["cue_normal"])
        comps["semantic"] = L.semantic_loss(out.sem_logits, batch["gt_label"])
        comps["eikonal"] = self._eikonal(ss)
        comps["bg_smooth"] = self._bg_smoothness(is_patch_iter, patch)
        comps["obj_point"] = self._obj_point(ss) if cfg.use_op else ad.constant(0.0)
        comps["rev_depth"] = self._rev_depth(out) if cfg.use_rd else ad.constant(0.0)
        total = L.total_loss(comps, cfg.weights)
        return comps, total

    def _eikonal(self, ss):
        cfg = self.config
        norms = [ad.reshape(ad.l2_norm(ss.scene_grad, axis=-1, eps=1e-24), (-1,))]
        n_uni = cfg.n_eikonal_uniform
        if n_uni > 0:
            d = self.rng_eik.normal(size=(n_uni, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            r = cfg.renderer.sphere_radius * np.cbrt(self.rng_eik.uniform(size=(n_uni, 1)))
            pts = r * d
            sdf_u, _, jac_u = self.field.geometry(pts, with_jacobian=True)
            g = self.field.scene_normal(sdf_u, jac_u)
            norms.append(ad.l2_norm(g, axis=-1, eps=1e-24))
        return L.eikonal_loss(ad.concat(norms, axis=0))

    def _bg_smoothness(self, is_patch_iter: bool, patch=None):
        cfg = self.config
        if not (cfg.use_bs and is_patch_iter):
            return ad.constant(0.0)
        ds = self.dataset
        if patch is None:
            f = int(self.rng_patch.integers(0, len(ds)))
            x0 = int(self.rng_patch.integers(0, ds.width - cfg.patch_size + 1))
            y0 = int(self.rng_patch.integers(0, ds.height - cfg.patch_size + 1))
            patch = (f, x0, y0)
        f, x0, y0 = patch
        depth, normal, mask = self.renderer.render_background_patch(
            self.cameras_norm[f], (x0, y0), cfg.patch_size, self.rng_render)
        return L.patch_smoothness(depth, normal, mask)

    def _obj_point(self, ss):
        eps_op = self.config.weights.epsilon_op
        tp = ss.t_prime
        behind = ss.t > np.where(np.isnan(tp), np.inf, tp)[:, None]
        count = int(behind.sum())
        if count == 0:
            return ad.constant(0.0)
        obj = ss.sdf[:, :, 1:]
        hinge = ad.relu(ad.sub(eps_op, obj))
        gated = ad.mul(hinge, behind[:, :, None].astype(np.float64))
        return ad.div(ad.reduce_sum(gated), float(count * (self.field.config.k - 1)))

    def _rev_depth(self, out):
        if out.rd_valid is None or not out.rd_valid.any():
            return ad.constant(0.0)
        per_ray = ad.relu(ad.sub(out.d_b, out.d_o))
        gate = out.rd_valid.astype(np.float64)
        return ad.div(ad.reduce_sum(ad.mul(per_ray, gate)), float(out.rd_valid.sum()))

    def _format_log(self, b: L.LossBundle) -> str:
        u = float(self.field.u().data)
        return (f"{self.iteration - 1} {b.total:.6e} {b.rgb:.6e} {b.depth:.6e} "
                f"{b.normal:.6e} {b.semantic:.6e} {b.eikonal:.6e} {b.bg_smooth:.6e} "
                f"{b.obj_point:.6e} {b.rev_depth:.6e} {u:.6e}")

    # -- loop ---------------------------------------------------------------
    def train(self, out_dir=None, log_every: int = 0):
        cfg = self.config
        t0 = time.monotonic()
        while self.iteration < cfg.iterations:
            bundle = self.train_step()
            if log_every and self.iteration % log_every == 0:
                print(f"[{self.iteration}/{cfg.iterations}] total={bundle.total:.4f} "
                      f"u={float(self.field.u().data):.2f} "
                      f"({time.monotonic() - t0:.0f}s)", flush=True)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "loss_log.txt").write_text("\n".join(self.log_lines) + "\n"
                                              if self.log_lines else "")
            save_checkpoint(out / "checkpoint.rico", self)
        return self

    # -- state --------------------------------------------------------------
    def _state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "params": {n: p.data for n, p in zip(self.param_names, self.params)},
            "adam_m": list(self.adam.first_moment),
            "adam_v": list(self.adam.second_moment),
            "adam_t": self.adam.step_count,
            "rngs": [g.bit_generator.state for g in
                     (self.rng_batch, self.rng_patch, self.rng_render, self.rng_eik)],
        }

    def _load_state(self, st: dict):
        self.iteration = int(st["iteration"])
        for n, p in zip(self.param_names, self.params):
            arr = st["params"][n]
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint param {n} shape mismatch")
            p.data = arr.astype(np.float64).copy()
        self.adam.first_moment = [a.copy() for a in st["adam_m"]]
        self.adam.second_moment = [a.copy() for a in st["adam_v"]]
        self.adam.step_count = int(st["adam_t"])
        for g, s in zip((self.rng_batch, self.rng_patch, self.rng_render, self.rng_eik),
                        st["rngs"]):
            g.bit_generator.state = s


def _renormalize(n: np.ndarray) -> np.ndarray:
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def _world_to_cam(normals: Tensor, rot: np.ndarray) -> Tensor:
    """Per-ray world->camera rotation of unit normals; rot is (B, 3, 3)."""
    B = normals.shape[0]
    n = ad.reshape(normals, (B, 1, 3))
    return ad.reshape(ad.matmul(n, rot), (B, 3))


# -- checkpoint format --------------------------------------------------------


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def _unpack_array(buf: io.BytesIO) -> np.ndarray:
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}q", buf.read(8 * ndim)) if ndim else ()
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()


def _section(name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(path, trainer: Trainer) -> None:
    st = trainer._state_dict()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += _section("config", json.dumps(trainer.config.to_dict(), sort_keys=True).encode())
    body = bytearray()
    for n in trainer.param_names:
        nb = n.encode()
        body += struct.pack("<I", len(nb)) + nb + _pack_array(st["params"][n])
    out += _section("params", bytes(body))
    body = bytearray()
    body += struct.pack("<Q", st["adam_t"])
    for m, v in zip(st["adam_m"], st["adam_v"]):
        body += _pack_array(m) + _pack_array(v)
    out += _section("adam", bytes(body))
    out += _section("rngs", json.dumps(st["rngs"]).encode())
    out += _section("iteration", struct.pack("<Q", st["iteration"]))
    Path(path).write_bytes(bytes(out))


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    buf = io.BytesIO(raw[8:])
    sections = {}
    try:
        while True:
            head = buf.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = buf.read(nlen).decode()
            (plen,) = struct.unpack("<Q", buf.read(8))
            payload = buf.read(plen)
            if len(payload) != plen:
                raise CheckpointError("truncated checkpoint section")
            sections[name] = payload
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    for required in ("config", "params", "adam", "rngs", "iteration"):
        if required not in sections:
            raise CheckpointError(f"checkpoint missing section {required}")
    config = TrainConfig.from_dict(json.loads(sections["config"]))
    params = {}
    buf = io.BytesIO(sections["params"])
    while buf.tell() < len(sections["params"]):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode()
        params[name] = _unpack_array(buf)
    buf = io.BytesIO(sections["adam"])
    (adam_t,) = struct.unpack("<Q", buf.read(8))
    adam_m, adam_v = [], []
    while buf.tell() < len(sections["adam"]):
        adam_m.append(_unpack_array(buf))
        adam_v.append(_unpack_array(buf))
    rngs = json.loads(sections["rngs"])
    (iteration,) = struct.unpack("<Q", sections["iteration"])
    return {"config": config, "params": params, "adam_m": adam_m, "adam_v": adam_v,
            "adam_t": adam_t, "rngs": rngs, "iteration": iteration}


def load_trainer(path, dataset) -> Trainer:
    ck = read_checkpoint(path)
    return Trainer(ck["config"], dataset, resume=ck)


def load_field(path, n_frames: int):
    """Rebuild just the field (for extraction/eval/render commands)."""
    ck = read_checkpoint(path)
    field = CompositionalField(ck["config"].field, n_frames=n_frames,
                               seed=ck["config"].seed)
    names = list(field.parameters().keys())
    for n in names:
        field.parameters()[n].data = ck["params"][n].copy()
    return field, ck["config"]


# -- miniature gradient checks -------------------------------------------------


def _mini_problem(seed: int):
    """A tiny in-memory scene/trainer pair for finite-difference checks."""
    from .scenegen import InMemoryDataset, builtin_scene
    scene = builtin_scene("cube-against-wall")
    data = InMemoryDataset(scene, n_frames=2, resolution=12, n_occlusion=64,
                           seed=seed)
    cfg = TrainConfig(
        iterations=1, rays_per_iter=6, patch_size=9, patch_interval=1,
        seed=seed, n_eikonal_uniform=4,
        field=FieldConfig(k=scene.k, pe_levels=1, hidden_width=8, depth=3,
                          skip_layer=1, feature_dim=4, app_hidden=8, app_depth=2,
                          app_code_dim=2, view_pe_levels=1),
        renderer=RendererConfig(n_coarse=10, n_importance=0, near=0.05,
                                sphere_radius=1.2),
    )
    return Trainer(cfg, data)


def _fd_check_total(trainer: Trainer, build, rel_tol_floor=1e-6, h=1e-6,
                    entries_per_param=3):
    """Compare analytic grads of build() against FD on a spread of entries."""
    from .gradcheck import max_rel_err
    total = build()
    _, grads = ad.eval_and_grad(total, trainer.params)
    worst = 0.0
    rng = np.random.default_rng(0)
    for p, g in zip(trainer.params, grads):
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = rng.choice(flat.size, size=min(entries_per_param, flat.size),
                         replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build().data)
            flat[i] = orig - h
            fm = float(build().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, max_rel_err(np.array([gflat[i]]), np.array([num])))
    return worst


def loss_gradient_checks(seed: int = 0):
    """Per-loss and whole-step FD checks on the miniature problem (1e-3).

    The losses must be pure functions of the parameters during finite
    differencing, so every evaluation restores the trainer's rng streams to a
    frozen snapshot (sample depths and eikonal points are then identical; the
    miniature config disables importance sampling so depths are also
    parameter-independent).
    """
    results = []
    trainer = _mini_problem(seed)
    cfg = trainer.config
    rng_s = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    batch = trainer.sample_ray_batch(cfg.rays_per_iter)
    t = trainer.renderer.sample_batch(batch["origins"], batch["dirs"], rng_s)
    batch["t"] = t
    patch = (0, 1, 1)
    gens = (trainer.rng_batch, trainer.rng_patch, trainer.rng_render, trainer.rng_eik)
    frozen = [g.bit_generator.state for g in gens]

    def rewind():
        for g, s in zip(gens, frozen):
            g.bit_generator.state = s

    def build_component(name):
        def build():
            rewind()
            comps, _ = trainer._build_losses(batch, True, patch)
            return ad.as_tensor(comps[name])
        return build

    for name in ("rgb", "depth", "normal", "semantic", "eikonal",
                 "bg_smooth", "obj_point", "rev_depth"):
        err = _fd_check_total(trainer, build_component(name))
        results.append((f"loss_{name}", err, 1e-3))

    def build_total():
        _, total = trainer._build_losses(batch, True, patch)
        return total

    results.append(("train_step_total", _fd_check_total(trainer, build_total), 1e-3))
    return results
