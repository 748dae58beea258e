"""Synthetic scenes standing in for the segmentation teacher, pair generation
and the HPatches directory format.

A scene is a set of filled convex shapes over a smooth texture.  It is drawn
on a canvas padded by half the image size on every side so that a warped
second view still has real content near its borders.  Group ids follow paint
order, so a larger id always occludes a smaller one; edges are the pixels
that have a 4-neighbour with a smaller id (one pixel wide, on the occluding
side), which mirrors how boundary maps are derived from segment masks.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import teacher as tch
from .pnm import read_gray, write_pgm

log = logging.getLogger(__name__)

SHAPE_KINDS = ("polygon", "ellipse", "square")


@dataclass(frozen=True)
class Shape:
    kind: str
    intensity: float
    vertices: np.ndarray | None = None          # polygons/squares: (k, 2), counter-clockwise
    center: tuple[float, float] = (0.0, 0.0)    # ellipses
    axes: tuple[float, float] = (1.0, 1.0)
    angle: float = 0.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "ellipse":
            c, s = np.cos(self.angle), np.sin(self.angle)
            d = pts - np.asarray(self.center)
            u = (c * d[:, 0] + s * d[:, 1]) / self.axes[0]
            v = (-s * d[:, 0] + c * d[:, 1]) / self.axes[1]
            return u * u + v * v <= 1.0
        inside = np.ones(len(pts), dtype=bool)
        vs = self.vertices
        for a, b in zip(vs, np.roll(vs, -1, axis=0)):
            inside &= (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]) >= 0
        return inside


@dataclass
class Texture:
    """Smooth sum-of-sinusoids texture, evaluable at any canvas point."""

    freqs: np.ndarray
    phases: np.ndarray
    amps: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 12, amplitude: float = 0.12) -> "Texture":
        ang = rng.uniform(0, np.pi, n)
        mag = rng.uniform(1 / 16, 1 / 5, n)
        freqs = np.stack([np.cos(ang) * mag, np.sin(ang) * mag], axis=1)
        amps = rng.uniform(0.5, 1.0, n)
        amps *= amplitude / amps.sum()
        return cls(freqs, rng.uniform(0, 2 * np.pi, n), amps)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return np.sin(2 * np.pi * pts @ self.freqs.T + self.phases) @ self.amps


@dataclass
class SceneSpec:
    height: int
    width: int
    shapes: list[Shape]
    texture: Texture
    background: float = 0.5


@dataclass
class SyntheticScene:
    image: np.ndarray             # HxW in [0, 1]
    keypoint_labels: np.ndarray   # HxW in {0, 1}
    grouping: np.ndarray          # HxW ints, 0 = unassigned
    edge: np.ndarray              # HxW in {0, 1}
    teacher_embed: np.ndarray     # (n_groups + 1, C_t); row 0 is the background
    teacher_F: np.ndarray         # (H/8 * W/8, C_t)
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (K, 2) x, y

    @property
    def n_groups(self) -> int:
        return self.teacher_embed.shape[0] - 1

    def signals(self) -> tuple[tch.TeacherFeatureMap, tch.SemanticGrouping, tch.EdgeMap]:
        return tch.TeacherFeatureMap(self.teacher_F), tch.SemanticGrouping(self.grouping), tch.EdgeMap(self.edge)


@dataclass
class TrainingPair:
    scene1: SyntheticScene
    scene2: SyntheticScene
    H: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    @property
    def correspondences(self) -> list[geo.Correspondence]:
        return [geo.Correspondence(tuple(a), tuple(b)) for a, b in zip(self.p1.tolist(), self.p2.tolist())]


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 0.08
    contrast: float = 0.15
    noise_std: float = 0.01

    @classmethod
    def none(cls) -> "PhotometricParams":
        return cls(0.0, 0.0, 0.0)


# ---------------------------------------------------------------- scene rendering

def _random_shape(rng: np.random.Generator, kind: str, h: int, w: int, intensity: float) -> Shape:
    side = min(h, w)
    cx, cy = rng.uniform(0.05 * w, 0.95 * w), rng.uniform(0.05 * h, 0.95 * h)
    if kind == "ellipse":
        axes = tuple(rng.uniform(0.08, 0.22, 2) * side)
        return Shape("ellipse", intensity, center=(cx, cy), axes=axes, angle=float(rng.uniform(0, np.pi)))
    if kind == "square":
        half = rng.uniform(0.1, 0.2) * side
        vs = np.array([[cx - half, cy - half], [cx + half, cy - half], [cx + half, cy + half], [cx - half, cy + half]])
        return Shape("square", intensity, vertices=vs)
    k = int(rng.integers(3, 7))
    step = 2 * np.pi / k
    ang = np.sort(np.arange(k) * step + rng.uniform(-0.3, 0.3, k) * step + rng.uniform(0, 2 * np.pi))
    r = rng.uniform(0.12, 0.25) * side
    sx, sy = rng.uniform(0.75, 1.3, 2)
    # points on an ellipse, ordered by angle, form a convex polygon
    vs = np.stack([cx + sx * r * np.cos(ang), cy + sy * r * np.sin(ang)], axis=1)
    return Shape("polygon", intensity, vertices=vs)


def random_scene_spec(seed: int, height: int, width: int, n_shapes: int,
                      shape_kinds: tuple[str, ...] = ("polygon", "polygon", "polygon", "ellipse")) -> SceneSpec:
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    if height % 8 or width % 8:
        raise ValueError(f"image size {height}x{width} must be divisible by 8")
    rng = np.random.default_rng(seed)
    levels = np.linspace(0.08, 0.92, n_shapes + 1)
    levels = levels[np.argsort(np.abs(levels - 0.5))][1:]  # drop the level nearest the background
    rng.shuffle(levels)
    shapes = [_random_shape(rng, shape_kinds[int(rng.integers(len(shape_kinds)))], height, width,
                            float(lv + rng.uniform(-0.02, 0.02))) for lv in levels]
    return SceneSpec(height, width, shapes, Texture.random(rng))


def canvas_points(spec: SceneSpec, h_view: np.ndarray | None = None) -> np.ndarray:
    """Canvas coordinates of every pixel centre of a view (row-major)."""
    ys, xs = np.meshgrid(np.arange(spec.height, dtype=float), np.arange(spec.width, dtype=float), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if h_view is not None:
        pts = geo.project_points(geo.inverse(h_view), pts)
    return pts


def render_labels(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    labels = np.zeros(len(pts), dtype=np.int64)
    for i, s in enumerate(spec.shapes, start=1):
        labels[s.contains(pts)] = i
    return labels


def render_intensity(spec: SceneSpec, pts: np.ndarray, labels: np.ndarray) -> np.ndarray:
    tex = spec.texture(pts)
    base = np.full(len(pts), spec.background)
    for i, s in enumerate(spec.shapes, start=1):
        base[labels == i] = s.intensity
    scale = np.where(labels == 0, 1.0, 0.5)
    return np.clip(base + scale * tex, 0.0, 1.0)


def edges_from_grouping(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of smaller id (the occluding side of a boundary)."""
    e = np.zeros(labels.shape, dtype=bool)
    e[1:, :] |= labels[:-1, :] < labels[1:, :]
    e[:-1, :] |= labels[1:, :] < labels[:-1, :]
    e[:, 1:] |= labels[:, :-1] < labels[:, 1:]
    e[:, :-1] |= labels[:, 1:] < labels[:, :-1]
    return e.astype(np.float64)


def keypoints_from_vertices(spec: SceneSpec, labels: np.ndarray, edge: np.ndarray,
                            h_view: np.ndarray | None = None, radius: float = 1.5) -> np.ndarray:
    """Visible polygon vertices snapped to the nearest edge pixel of their shape."""
    hh, ww = labels.shape
    out = []
    for i, s in enumerate(spec.shapes, start=1):
        if s.vertices is None:
            continue
        vs = s.vertices if h_view is None else geo.project_points(h_view, s.vertices)
        for x, y in vs:
            x0, x1 = int(np.floor(x - radius)), int(np.ceil(x + radius))
            y0, y1 = int(np.floor(y - radius)), int(np.ceil(y + radius))
            best, best_d = None, np.inf
            for yy in range(max(y0, 0), min(y1, hh - 1) + 1):
                for xx in range(max(x0, 0), min(x1, ww - 1) + 1):
                    if labels[yy, xx] != i or not edge[yy, xx]:
                        continue
                    d = (xx - x) ** 2 + (yy - y) ** 2
                    if d <= radius * radius and d < best_d:
                        best, best_d = (xx, yy), d
            if best is not None:
                out.append(best)
    return np.array(sorted(set(out)), dtype=np.float64).reshape(-1, 2)


def teacher_embeddings(seed: int, n_groups: int, channels: int = 32) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    e = rng.standard_normal((n_groups + 1, channels))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def cell_labels(labels: np.ndarray, cell: int = 8) -> np.ndarray:
    """Majority id inside each cell (smallest id on ties), row-major."""
    h, w = labels.shape
    blocks = labels.reshape(h // cell, cell, w // cell, cell).transpose(0, 2, 1, 3).reshape(-1, cell * cell)
    out = np.empty(len(blocks), dtype=np.int64)
    for i, b in enumerate(blocks):
        out[i] = np.argmax(np.bincount(b))
    return out


def teacher_features(labels: np.ndarray, embed: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    ids = cell_labels(labels)
    f = embed[ids] + noise * rng.standard_normal((len(ids), embed.shape[1]))
    # float32 round trip keeps in-memory features identical to what TSG1 stores
    return f.astype(np.float32).astype(np.float64)


def render_view(spec: SceneSpec, h_view: np.ndarray | None, embed: np.ndarray, noise: float,
                seed: int) -> SyntheticScene:
    pts = canvas_points(spec, h_view)
    lab = render_labels(spec, pts)
    img = render_intensity(spec, pts, lab).reshape(spec.height, spec.width)
    lab = lab.reshape(spec.height, spec.width)
    edge = edges_from_grouping(lab)
    kps = keypoints_from_vertices(spec, lab, edge, h_view)
    kmap = np.zeros_like(edge)
    if len(kps):
        kmap[kps[:, 1].astype(int), kps[:, 0].astype(int)] = 1.0
    feat = teacher_features(lab, embed, noise, np.random.default_rng([seed, 104729]))
    return SyntheticScene(img, kmap, lab, edge, embed, feat, kps)


def generate_scene(seed: int, height: int = 64, width: int = 64, n_shapes: int = 8,
                   shape_kinds: tuple[str, ...] = ("polygon", "polygon", "polygon", "ellipse"),
                   teacher_channels: int = 32, teacher_noise: float = 0.1) -> SyntheticScene:
    """Render a random scene; shapes hidden by occlusion are dropped so that
    every group id 1..N is present in the image."""
    spec = random_scene_spec(seed, height, width, n_shapes, shape_kinds)
    spec = _drop_invisible(spec)
    embed = teacher_embeddings(seed, len(spec.shapes), teacher_channels)
    return render_view(spec, None, embed, teacher_noise, seed)


def _drop_invisible(spec: SceneSpec) -> SceneSpec:
    lab = render_labels(spec, canvas_points(spec))
    visible = set(np.unique(lab).tolist())
    shapes = [s for i, s in enumerate(spec.shapes, start=1) if i in visible]
    return SceneSpec(spec.height, spec.width, shapes, spec.texture, spec.background)


# ---------------------------------------------------------------- pairs

def _photometric(img: np.ndarray, params: PhotometricParams, rng: np.random.Generator) -> np.ndarray:
    if params == PhotometricParams.none():
        return img
    b = rng.uniform(-params.brightness, params.brightness)
    c = 1.0 + rng.uniform(-params.contrast, params.contrast)
    out = (img - 0.5) * c + 0.5 + b + params.noise_std * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0)


def bilinear_warp(canvas: np.ndarray, src_pts: np.ndarray, origin: tuple[float, float]) -> np.ndarray:
    """Sample ``canvas`` (whose pixel (0,0) sits at ``origin``) at ``src_pts``; borders clamp."""
    ch, cw = canvas.shape
    x = np.clip(src_pts[:, 0] - origin[0], 0, cw - 1)
    y = np.clip(src_pts[:, 1] - origin[1], 0, ch - 1)
    x0 = np.minimum(np.floor(x).astype(int), cw - 2)
    y0 = np.minimum(np.floor(y).astype(int), ch - 2)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * canvas[y0, x0] + ax * (1 - ay) * canvas[y0, x0 + 1]
            + (1 - ax) * ay * canvas[y0 + 1, x0] + ax * ay * canvas[y0 + 1, x0 + 1])


def generate_pair_from_spec(spec: SceneSpec, h12: np.ndarray, seed: int,
                            photometric: PhotometricParams = PhotometricParams(), teacher_channels: int = 32,
                            teacher_noise: float = 0.1, corr_stride: int = 4, scene_seed: int = 0) -> TrainingPair:
    embed = teacher_embeddings(scene_seed, len(spec.shapes), teacher_channels)
    s1 = render_view(spec, None, embed, teacher_noise, scene_seed)
    h, w = spec.height, spec.width
    # image 2 is a bilinear warp of the scene canvas (padded by half the image on each side)
    pad_y, pad_x = h // 2, w // 2
    cy, cx = np.meshgrid(np.arange(-pad_y, h + pad_y, dtype=float), np.arange(-pad_x, w + pad_x, dtype=float),
                         indexing="ij")
    cpts = np.stack([cx.ravel(), cy.ravel()], axis=1)
    clab = render_labels(spec, cpts)
    canvas = render_intensity(spec, cpts, clab).reshape(cy.shape)
    src = canvas_points(spec, h12)
    img2 = bilinear_warp(canvas, src, (-pad_x, -pad_y)).reshape(h, w)
    # labels use nearest-neighbour lookup of the same canvas
    ix = np.clip(np.rint(src[:, 0]).astype(int) + pad_x, 0, cx.shape[1] - 1)
    iy = np.clip(np.rint(src[:, 1]).astype(int) + pad_y, 0, cx.shape[0] - 1)
    lab2 = clab.reshape(cy.shape)[iy, ix].reshape(h, w)
    if np.array_equal(h12, np.eye(3)):
        img2 = s1.image.copy()
    rng = np.random.default_rng([seed, 31337])
    img2 = _photometric(img2, photometric, rng)
    edge2 = edges_from_grouping(lab2)
    kps2 = keypoints_from_vertices(spec, lab2, edge2, h12)
    kmap2 = np.zeros_like(edge2)
    if len(kps2):
        kmap2[kps2[:, 1].astype(int), kps2[:, 0].astype(int)] = 1.0
    f2 = teacher_features(lab2, embed, teacher_noise, np.random.default_rng([seed, 15485863]))
    s2 = SyntheticScene(img2, kmap2, lab2, edge2, embed, f2, kps2)
    p1, p2 = geo.valid_correspondence_arrays(h12, h, w, corr_stride)
    return TrainingPair(s1, s2, np.asarray(h12, dtype=np.float64), p1, p2)


def generate_pair(scene_seed: int, pair_seed: int, height: int = 64, width: int = 64, n_shapes: int = 8,
                  bounds: geo.HomographyBounds | None = None,
                  photometric: PhotometricParams = PhotometricParams(),
                  h12: np.ndarray | None = None, teacher_channels: int = 32, teacher_noise: float = 0.1,
                  shape_kinds: tuple[str, ...] = ("polygon", "polygon", "polygon", "ellipse"),
                  min_correspondences: int = 16, max_tries: int = 10) -> TrainingPair:
    """Scene from ``scene_seed`` viewed through a homography drawn from ``pair_seed``."""
    spec = _drop_invisible(random_scene_spec(scene_seed, height, width, n_shapes, shape_kinds))
    b = bounds or geo.default_bounds_for(height, width)
    center = ((width - 1) / 2.0, (height - 1) / 2.0)
    for attempt in range(max_tries):
        hh = h12 if h12 is not None else geo.sample_random_homography(
            [pair_seed, attempt], b.max_rotation_deg, b.max_perspective, b.max_scale_delta, b.max_translation_px,
            center=center)
        p1, _ = geo.valid_correspondence_arrays(hh, height, width, 4)
        if len(p1) >= min_correspondences:
            return generate_pair_from_spec(spec, hh, pair_seed, photometric, teacher_channels, teacher_noise,
                                           scene_seed=scene_seed)
        if h12 is not None:
            break
    raise ValueError(f"no homography with >= {min_correspondences} co-visible points after {max_tries} tries")


# ---------------------------------------------------------------- HPatches layout

@dataclass
class HPatchesSequence:
    name: str
    reference: np.ndarray
    targets: list[np.ndarray]
    homographies: list[np.ndarray]
    root: Path | None = None

    def pairs(self):
        for k, (img, hom) in enumerate(zip(self.targets, self.homographies), start=2):
            yield k, self.reference, img, hom


class SequenceError(ValueError):
    pass


def find_image(seq_dir: Path, idx: int) -> Path:
    for ext in (".pgm", ".ppm", ".png"):
        p = seq_dir / f"{idx}{ext}"
        if p.exists():
            return p
    raise SequenceError(f"{seq_dir}: missing image {idx}")


def load_sequence(seq_dir) -> HPatchesSequence:
    seq_dir = Path(seq_dir)
    ref = read_gray(find_image(seq_dir, 1))
    targets, homs = [], []
    for k in range(2, 7):
        hp = seq_dir / f"H_1_{k}"
        if not hp.exists():
            raise SequenceError(f"{hp}: missing homography file")
        homs.append(geo.read_homography(hp))
        targets.append(read_gray(find_image(seq_dir, k)))
    return HPatchesSequence(seq_dir.name, ref, targets, homs, seq_dir)


def load_hpatches(root, exclude: tuple[str, ...] | list[str] = (), strict: bool = False) -> list[HPatchesSequence]:
    """Load every sequence directory under ``root`` (sorted by name).

    Sequences named in ``exclude`` are skipped.  A malformed sequence is logged
    and skipped, or raised when ``strict``.
    """
    root = Path(root)
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if d.name in exclude:
            continue
        try:
            out.append(load_sequence(d))
        except (SequenceError, geo.HomographyParseError, ValueError) as exc:
            if strict:
                raise
            log.warning("skipping sequence %s: %s", d.name, exc)
    return out


def write_sequence(seq_dir, images: list[np.ndarray], homographies: list[np.ndarray]) -> None:
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images, start=1):
        write_pgm(seq_dir / f"{k}.pgm", img)
    for k, h in enumerate(homographies, start=2):
        geo.write_homography(seq_dir / f"H_1_{k}", h)


def write_synthetic_dataset(out_dir, n_scenes: int, height: int, width: int, seed: int, n_shapes: int = 8,
                            photometric: PhotometricParams = PhotometricParams()) -> dict:
    """Export ``n_scenes`` sequences (reference + 5 warped views) with teacher files and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqs = []
    for s in range(n_scenes):
        scene_seed = seed * 100003 + s
        name = f"s_{s:05d}"
        seq_dir = out_dir / name
        pairs = [generate_pair(scene_seed, scene_seed * 8 + k, height, width, n_shapes, photometric=photometric)
                 for k in range(2, 7)]
        scenes = [pairs[0].scene1] + [p.scene2 for p in pairs]
        write_sequence(seq_dir, [sc.image for sc in scenes], [p.H for p in pairs])
        for k, sc in enumerate(scenes, start=1):
            save_scene_signals(seq_dir, k, sc)
        seqs.append({"name": name, "scene_seed": scene_seed})
    manifest = {"format": "hpatches+tsg1", "height": height, "width": width, "seed": seed, "n_shapes": n_shapes,
                "sequences": seqs}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def save_scene_signals(seq_dir, k: int, scene: SyntheticScene) -> None:
    seq_dir = Path(seq_dir)
    f, g, e = scene.signals()
    tch.write_signal(seq_dir / f"feat_{k}.tsg", f)
    tch.write_signal(seq_dir / f"group_{k}.tsg", g)
    tch.write_signal(seq_dir / f"edge_{k}.tsg", e)
    tch.write_signal(seq_dir / f"kpts_{k}.tsg", tch.EdgeMap(scene.keypoint_labels))


def load_scene_signals(seq_dir, k: int, image: np.ndarray) -> SyntheticScene:
    seq_dir = Path(seq_dir)
    size = image.shape
    f = tch.read_signal(seq_dir / f"feat_{k}.tsg", size)
    g = tch.read_signal(seq_dir / f"group_{k}.tsg", size)
    e = tch.read_signal(seq_dir / f"edge_{k}.tsg", size)
    kp = tch.read_signal(seq_dir / f"kpts_{k}.tsg", size)
    n = int(g.labels.max(initial=0))
    return SyntheticScene(image, kp.E, g.labels, e.E, np.zeros((n + 1, f.F.shape[1])), f.F)


def load_training_pairs(root, corr_stride: int = 4) -> list[TrainingPair]:
    """Pairs (1, k) of an exported synthetic dataset, with teacher signals."""
    out = []
    for seq in load_hpatches(root):
        s1 = load_scene_signals(seq.root, 1, seq.reference)
        for k, _, img, hom in seq.pairs():
            s2 = load_scene_signals(seq.root, k, img)
            p1, p2 = geo.valid_correspondence_arrays(hom, img.shape[0], img.shape[1], corr_stride)
            out.append(TrainingPair(s1, s2, hom, p1, p2))
    return out
