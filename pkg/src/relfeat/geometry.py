"""Planar homographies, ground-truth correspondences and reprojection error.

Pixel convention used everywhere in the package: the origin is the centre of
the top-left pixel, x grows to the right and y grows downward.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PointAtInfinity(ValueError):
    pass


class HomographyParseError(ValueError):
    pass


def normalize(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(h)) < 1e-15:
        raise ValueError("homography is singular")
    if abs(h[2, 2]) > 1e-15:
        h = h / h[2, 2]
    return h


def identity() -> np.ndarray:
    return np.eye(3)


def inverse(h) -> np.ndarray:
    return normalize(np.linalg.inv(np.asarray(h, dtype=np.float64)))


def compose(a, b) -> np.ndarray:
    """Homography applying ``b`` first, then ``a``."""
    return normalize(np.asarray(a) @ np.asarray(b))


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def project_points(h, pts) -> np.ndarray:
    """Vectorised projection of an (N, 2) array of points."""
    h = np.asarray(h, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
    if np.any(np.abs(w) <= 1e-12):
        i = int(np.flatnonzero(np.abs(w) <= 1e-12)[0])
        raise PointAtInfinity(f"point {i} {tuple(pts[i])} maps to infinity")
    x = (h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]) / w
    y = (h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]) / w
    return np.stack([x, y], axis=1)


def project(h, p) -> tuple[float, float]:
    x, y = project_points(h, [p])[0]
    return float(x), float(y)


def reprojection_error(h, p1, p2) -> float:
    q = project(h, p1)
    return float(np.hypot(q[0] - p2[0], q[1] - p2[1]))


def reprojection_errors(h, pts1, pts2) -> np.ndarray:
    q = project_points(h, pts1)
    d = q - np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    return np.sqrt(np.sum(d * d, axis=1))


@dataclass(frozen=True)
class HomographyBounds:
    max_rotation_deg: float = 15.0
    max_perspective: float = 1e-3
    max_scale_delta: float = 0.25
    max_translation_px: float = 6.4


def sample_random_homography(rng_seed, max_rotation_deg: float = 15.0, max_perspective: float = 1e-3,
                             max_scale_delta: float = 0.25, max_translation_px: float = 6.4,
                             center=(0.0, 0.0)) -> np.ndarray:
    """Random rotation * scale * perspective * translation about ``center``.

    Scale is drawn log-uniformly in [1/(1+d), 1+d], so d=0.25 gives [0.8, 1.25].
    """
    for name, v in (("rotation", max_rotation_deg), ("perspective", max_perspective),
                    ("scale", max_scale_delta), ("translation", max_translation_px)):
        if v < 0:
            raise ValueError(f"{name} bound must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    theta = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
    log_s = np.log1p(max_scale_delta)
    s = float(np.exp(rng.uniform(-log_s, log_s)))
    px, py = rng.uniform(-max_perspective, max_perspective, size=2)
    tx, ty = rng.uniform(-max_translation_px, max_translation_px, size=2)
    c, sn = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([s, s, 1.0])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    cx, cy = center
    to_c = translation(-cx, -cy)
    from_c = translation(cx + tx, cy + ty)
    return normalize(from_c @ persp @ rot @ scale @ to_c)


def default_bounds_for(height: int, width: int) -> HomographyBounds:
    return HomographyBounds(max_translation_px=0.1 * min(height, width))


@dataclass(frozen=True)
class Correspondence:
    p1: tuple[float, float]
    p2: tuple[float, float]


def _strictly_inside(pts, height, width) -> np.ndarray:
    return (pts[:, 0] > 0) & (pts[:, 0] < width - 1) & (pts[:, 1] > 0) & (pts[:, 1] < height - 1)


def grid_points(height: int, width: int, stride: int) -> np.ndarray:
    """Integer grid at ``stride`` starting at ``stride // 2``, as (N, 2) x,y."""
    off = stride // 2
    ys, xs = np.meshgrid(np.arange(off, height, stride, dtype=np.float64),
                         np.arange(off, width, stride, dtype=np.float64), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def valid_correspondence_arrays(h, height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    p1 = grid_points(height, width, stride)
    p1 = p1[_strictly_inside(p1, height, width)]
    h = np.asarray(h, dtype=np.float64)
    w = h[2, 0] * p1[:, 0] + h[2, 1] * p1[:, 1] + h[2, 2]
    p1 = p1[w > 1e-12]
    if len(p1) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    p2 = project_points(h, p1)
    keep = _strictly_inside(p2, height, width)
    return p1[keep], p2[keep]


def valid_correspondence_grid(h, height: int, width: int, stride: int) -> list[Correspondence]:
    p1, p2 = valid_correspondence_arrays(h, height, width, stride)
    return [Correspondence((float(a[0]), float(a[1])), (float(b[0]), float(b[1]))) for a, b in zip(p1, p2)]


def read_homography(path) -> np.ndarray:
    """Read an HPatches-style ASCII homography (3 lines of 3 floats)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise HomographyParseError(f"{path}: cannot read ({exc})") from exc
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(rows) != 3 or any(len(r) != 3 for r in rows):
        n = sum(len(r) for r in rows)
        raise HomographyParseError(f"{path}: expected 3 rows of 3 numbers, found {len(rows)} rows / {n} numbers")
    try:
        h = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise HomographyParseError(f"{path}: non-numeric entry ({exc})") from exc
    if not np.all(np.isfinite(h)):
        raise HomographyParseError(f"{path}: non-finite entry")
    try:
        return normalize(h)
    except ValueError as exc:
        raise HomographyParseError(f"{path}: {exc}") from exc


def write_homography(path, h) -> None:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in h))
