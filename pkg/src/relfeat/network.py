"""Student network: VGG-style backbone, five heads and edge attention guidance.

Tensors are NCHW DiffArrays.  ``width`` scales every channel count so the
desk-scale runs can use a quarter-width model.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import tsg


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: float = 1.0
    desc_dim: int | None = None  # defaults to the C4 width
    psrd: bool = True
    eag: bool = True
    det_cell: int = 4

    @property
    def c64(self) -> int:
        return max(1, int(round(64 * self.width)))

    @property
    def c128(self) -> int:
        return max(1, int(round(128 * self.width)))

    @property
    def dim(self) -> int:
        return self.desc_dim if self.desc_dim is not None else self.c128

    @property
    def trunk_channels(self) -> int:
        return 2 * self.c64 + 2 * self.c128

    def architecture(self) -> dict:
        return {"width": self.width, "desc_dim": self.dim, "psrd": self.psrd, "eag": self.eag,
                "det_cell": self.det_cell}


def _conv_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """name -> (cout, cin, k) for every convolution that owns a kernel."""
    a, b, t = cfg.c64, cfg.c128, cfg.trunk_channels
    shapes = {
        "conv1": (a, 1, 3), "conv2": (a, a, 3),
        "conv3": (a, a, 3), "conv4": (a, a, 3),
        "conv5": (b, a, 3), "conv6": (b, b, 3),
        "conv7": (b, b, 3), "conv8": (b, b, 3),
        "det_head": (cfg.det_cell ** 2, t, 3),
        "des_head": (cfg.dim, t, 3),
        "att_head": (1, t, 3),
    }
    if cfg.psrd:
        shapes["distill_head"] = (b, b, 3)
        shapes["distill_proj"] = (b, b, 3)
    if cfg.eag:
        shapes["edge_head"] = (1, a, 3)
    return shapes


def _eag_names(cfg: ModelConfig) -> list[str]:
    return ["eag_q", "eag_k", "eag_v"] if cfg.eag else []


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, dc.DiffArray]:
    """Kaiming-uniform (fan-in) kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, dc.DiffArray] = {}
    for name, (cout, cin, k) in _conv_shapes(cfg).items():
        bound = math.sqrt(6.0 / (cin * k * k))
        params[f"{name}.w"] = dc.DiffArray(rng.uniform(-bound, bound, (cout, cin, k, k)), True)
        params[f"{name}.b"] = dc.DiffArray(np.zeros(cout), True)
    t = cfg.trunk_channels
    for name in _eag_names(cfg):
        bound = math.sqrt(6.0 / t)
        params[f"{name}.w"] = dc.DiffArray(rng.uniform(-bound, bound, (t, t, 1, 1)), True)
    return params


@dataclass
class NetworkOutputs:
    det_logits: dc.DiffArray          # (N, 1, H, W)
    descriptors_dense: dc.DiffArray   # (N, D, H/4, W/4), not normalised
    att_weights: dc.DiffArray         # (N, 1, H/4, W/4)
    edge_pred: dc.DiffArray | None    # (N, 1, H, W)
    c4d: dc.DiffArray | None          # (N, c128, H/8, W/8)
    pyramid: dict[str, dc.DiffArray] = field(default_factory=dict)


def _conv(x, params, name, relu=True):
    y = dc.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=1, padding=1)
    return dc.relu(y) if relu else y


def _as_batch(images) -> dc.DiffArray:
    x = dc.as_diff(images)
    if x.ndim == 2:
        x = dc.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = dc.reshape(x, (x.shape[0], 1) + x.shape[1:])
    h, w = x.shape[-2:]
    if h % 8 or w % 8 or h < 32 or w < 32:
        raise ValueError(f"image size {h}x{w} must be divisible by 8 and at least 32")
    return x


def backbone_forward(images, params, cfg: ModelConfig) -> dict[str, dc.DiffArray]:
    """Feature pyramid C1..C4 (C4 already distillation-enhanced when enabled)."""
    x = _as_batch(images)
    c1 = _conv(_conv(x, params, "conv1"), params, "conv2")
    c2 = _conv(_conv(dc.maxpool2(c1), params, "conv3"), params, "conv4")
    c3 = _conv(_conv(dc.maxpool2(c2), params, "conv5"), params, "conv6")
    c4o = _conv(dc.maxpool2(c3), params, "conv7")
    c4 = _conv(c4o, params, "conv8")
    out = {"C1": c1, "C2": c2, "C3": c3, "C4o": c4o, "C4": c4}
    if cfg.psrd:
        c4d, c4 = distill_enhance(c4o, c4, params)
        out["C4d"], out["C4"] = c4d, c4
    return out


def distill_enhance(c4o, c4, params) -> tuple[dc.DiffArray, dc.DiffArray]:
    c4d = _conv(c4o, params, "distill_head", relu=False)
    return c4d, dc.add(c4, _conv(c4d, params, "distill_proj", relu=False))


def down_to(edge, like) -> dc.DiffArray:
    return dc.bilinear_resize(edge, like.shape[2], like.shape[3])


def detection_edge_enhance(c3, edge) -> dc.DiffArray:
    """C3 + resize(E') * C3, broadcasting the edge map over channels."""
    return dc.add(c3, dc.mul(down_to(edge, c3), c3))


def eag_forward(f_in, edge, params) -> dc.DiffArray:
    """Edge-gated single-head self-attention added back onto ``f_in``."""
    n, c, h, w = f_in.shape
    f_edge = dc.mul(down_to(edge, f_in), f_in)
    flat = dc.reshape(f_edge, (n, c, h * w))

    def proj(name):
        wmat = dc.reshape(params[f"{name}.w"], (c, c))
        return dc.matmul(wmat, flat)  # (n, c, hw)

    q = dc.transpose(proj("eag_q"), (0, 2, 1))
    k = proj("eag_k")
    v = dc.transpose(proj("eag_v"), (0, 2, 1))
    scores = dc.mul(dc.matmul(q, k), 1.0 / math.sqrt(c))
    attn = dc.softmax_lastdim(scores)
    ctx = dc.transpose(dc.matmul(attn, v), (0, 2, 1))
    return dc.add(f_in, dc.reshape(ctx, (n, c, h, w)))


def heads_forward(pyr, params, cfg: ModelConfig) -> NetworkOutputs:
    c1, c2, c3, c4 = pyr["C1"], pyr["C2"], pyr["C3"], pyr["C4"]
    h4, w4 = c3.shape[2], c3.shape[3]
    edge = None
    if cfg.eag:
        edge = dc.sigmoid(_conv(c1, params, "edge_head", relu=False))
        c3 = detection_edge_enhance(c3, edge)
    trunk = dc.concat([dc.bilinear_resize(c1, h4, w4), dc.bilinear_resize(c2, h4, w4), c3,
                       dc.bilinear_resize(c4, h4, w4)], axis=1)
    det = dc.depth_to_space(_conv(trunk, params, "det_head", relu=False), cfg.det_cell)
    f = eag_forward(trunk, edge, params) if cfg.eag else trunk
    desc = _conv(f, params, "des_head", relu=False)
    att = dc.sigmoid(_conv(trunk, params, "att_head", relu=False))
    return NetworkOutputs(det, desc, att, edge, pyr.get("C4d"), pyr)


def forward(images, params, cfg: ModelConfig) -> NetworkOutputs:
    return heads_forward(backbone_forward(images, params, cfg), params, cfg)


def dense_to_map_coords(points, scale: int, map_h: int, map_w: int) -> np.ndarray:
    """Full-resolution pixel coords -> coords in a map downsampled by ``scale``."""
    p = (np.asarray(points, dtype=np.float64).reshape(-1, 2) + 0.5) / scale - 0.5
    p[:, 0] = np.clip(p[:, 0], 0, map_w - 1)
    p[:, 1] = np.clip(p[:, 1], 0, map_h - 1)
    return p


def sample_descriptors(dense, points, scale: int = 4, normalize: bool = True) -> dc.DiffArray:
    """Read descriptors of one image (D, h, w) at full-resolution points."""
    _, h, w = dense.shape
    out = dc.bilinear_sample(dense, dense_to_map_coords(points, scale, h, w))
    return dc.l2_normalize_lastdim(out) if normalize else out


def sample_map(dense, points, scale: int = 4) -> dc.DiffArray:
    _, h, w = dense.shape
    return dc.bilinear_sample(dense, dense_to_map_coords(points, scale, h, w))


def image_slice(x: dc.DiffArray, i: int) -> dc.DiffArray:
    """Select batch element ``i`` of an (N, ...) array, dropping the batch dim."""
    return dc.reshape(dc.take(x, [i], axis=0), x.shape[1:])


def param_count(params) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, cfg: ModelConfig, extra: dict | None = None) -> None:
    path = Path(path)
    tsg.save_bundle(path, {k: np.asarray(v.data, dtype="<f8") for k, v in sorted(params.items())})
    meta = {"architecture": cfg.architecture()}
    if extra:
        meta.update(extra)
    tsg.atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def config_from_architecture(arch: dict) -> ModelConfig:
    return ModelConfig(width=float(arch["width"]), desc_dim=int(arch["desc_dim"]), psrd=bool(arch["psrd"]),
                       eag=bool(arch["eag"]), det_cell=int(arch.get("det_cell", 4)))


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[dict[str, dc.DiffArray], ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        meta = json.loads(sidecar_path(path).read_text())
        cfg = config_from_architecture(meta["architecture"])
    except (OSError, KeyError, ValueError) as exc:
        raise ArchitectureMismatch(f"{path}: unreadable architecture sidecar ({exc})") from exc
    if expect is not None and cfg.architecture() != expect.architecture():
        raise ArchitectureMismatch(f"{path}: checkpoint architecture {cfg.architecture()} "
                                   f"differs from expected {expect.architecture()}")
    arrays = tsg.load_bundle(path)
    want = init_params(cfg, 0)
    if set(arrays) != set(want) or any(arrays[k].shape != want[k].shape for k in want):
        raise ArchitectureMismatch(f"{path}: stored parameter set does not match architecture")
    return {k: dc.DiffArray(arrays[k], True) for k in sorted(arrays)}, cfg
