"""Keypoint extraction, mutual nearest-neighbour matching and the MMA protocol."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from . import geometry as geo
from . import network as nw
from . import tsg

log = logging.getLogger(__name__)

THRESHOLDS = tuple(range(1, 11))
CSV_HEADER = ("sequence", "pair", "threshold", "n_matches", "n_correct", "mma")


class BenchmarkError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractConfig:
    threshold: float = 0.0
    nms_radius: int = 2
    max_k: int = 128
    border: int = 2


def extract_keypoints(score_map, threshold: float = 0.0, nms_radius: int = 2, max_k: int = 128,
                      border: int = 0) -> np.ndarray:
    """(K, 3) array of x, y, score: 3x3 local maxima at or above ``threshold``,
    greedily suppressed within Euclidean ``nms_radius``, best first."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if nms_radius < 1:
        raise ValueError("nms_radius must be >= 1")
    s = np.asarray(score_map, dtype=np.float64)
    h, w = s.shape
    local_max = s >= ndimage.maximum_filter(s, size=3, mode="nearest")
    cand = local_max & (s >= threshold)
    if border:
        cand[:border, :] = cand[-border:, :] = False
        cand[:, :border] = cand[:, -border:] = False
    flat = np.flatnonzero(cand.ravel())
    order = flat[np.lexsort((flat, -s.ravel()[flat]))]
    blocked = np.zeros((h, w), dtype=bool)
    r = int(nms_radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = dx * dx + dy * dy <= r * r
    dy, dx = dy[disk], dx[disk]
    out = []
    for idx in order:
        y, x = divmod(int(idx), w)
        if blocked[y, x]:
            continue
        out.append((x, y, s[y, x]))
        if len(out) >= max_k:
            break
        yy, xx = y + dy, x + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        blocked[yy[ok], xx[ok]] = True
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def distance_matrix(d1, d2) -> np.ndarray:
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    diff = d1[:, None, :] - d2[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mutual_nn_match(desc1, desc2) -> list[tuple[int, int, float]]:
    """Pairs (i, j, distance) where j is i's nearest neighbour and vice versa.

    Ties go to the lowest index on both sides.
    """
    d1 = np.asarray(desc1)
    d2 = np.asarray(desc2)
    if len(d1) == 0 or len(d2) == 0:
        return []
    dist = distance_matrix(d1, d2)
    nn12 = np.argmin(dist, axis=1)
    nn21 = np.argmin(dist, axis=0)
    return [(i, int(j), float(dist[i, j])) for i, j in enumerate(nn12) if nn21[j] == i]


def mma_for_errors(errors, thresholds: Sequence[float] = THRESHOLDS) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return np.zeros(len(thresholds))
    return np.array([np.mean(errors <= t) for t in thresholds])


def mma_curve(errors_per_pair: Iterable, thresholds: Sequence[float] = THRESHOLDS) -> tuple[np.ndarray, float]:
    """Mean over pairs of the fraction of matches within each threshold.

    Pairs without matches count as zero.  AUC@5 is the mean of the curve at
    thresholds 1..5.
    """
    curves = [mma_for_errors(e, thresholds) for e in errors_per_pair]
    mma = np.mean(curves, axis=0) if curves else np.zeros(len(thresholds))
    return mma, auc_at(mma, thresholds, 5)


def auc_at(mma: np.ndarray, thresholds: Sequence[float], limit: int) -> float:
    sel = [i for i, t in enumerate(thresholds) if t <= limit]
    return float(np.mean(mma[sel])) if sel else 0.0


@dataclass
class PairResult:
    sequence: str
    pair: int
    n_kp1: int
    n_kp2: int
    errors: np.ndarray

    @property
    def n_matches(self) -> int:
        return int(self.errors.size)


@dataclass
class MatchReport:
    pairs: list[PairResult]
    thresholds: tuple[int, ...] = THRESHOLDS
    mma: np.ndarray = field(init=False)
    auc5: float = field(init=False)

    def __post_init__(self):
        self.pairs = sorted(self.pairs, key=lambda p: (p.sequence, p.pair))
        self.mma, self.auc5 = mma_curve([p.errors for p in self.pairs], self.thresholds)

    def mma_at(self, t: int) -> float:
        return float(self.mma[self.thresholds.index(t)])

    @property
    def mean_matches(self) -> float:
        return float(np.mean([p.n_matches for p in self.pairs])) if self.pairs else 0.0

    def per_sequence(self) -> dict[str, np.ndarray]:
        names = sorted({p.sequence for p in self.pairs})
        return {n: mma_curve([p.errors for p in self.pairs if p.sequence == n], self.thresholds)[0] for n in names}

    def csv_text(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for p in self.pairs:
            curve = mma_for_errors(p.errors, self.thresholds)
            for t, m in zip(self.thresholds, curve):
                wr.writerow([p.sequence, p.pair, t, p.n_matches, int(np.sum(p.errors <= t)), f"{m:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    def summary(self) -> dict:
        return {"mma": [float(v) for v in self.mma], "auc5": self.auc5, "mma3": self.mma_at(3),
                "mean_matches": self.mean_matches, "n_pairs": len(self.pairs)}


def svg_curve(curves: dict[str, Sequence[float]], thresholds: Sequence[int] = THRESHOLDS,
              width: int = 480, height: int = 320) -> str:
    """Line plot of MMA against threshold; one polyline + markers per curve."""
    m = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    t0, t1 = min(thresholds), max(thresholds)

    def px(t, v):
        return m + (t - t0) / max(t1 - t0, 1) * (width - 2 * m), height - m - v * (height - 2 * m)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">threshold [px]</text>',
             f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" '
             f'text-anchor="middle">MMA</text>']
    for t in thresholds:
        x, _ = px(t, 0)
        parts.append(f'<text x="{x:.1f}" y="{height - m + 14}" font-size="10" text-anchor="middle">{t}</text>')
    for k, (name, vals) in enumerate(curves.items()):
        c = colors[k % len(colors)]
        pts = [px(t, float(v)) for t, v in zip(thresholds, vals)]
        parts.append(f'<polyline class="curve" fill="none" stroke="{c}" points="'
                     + " ".join(f"{x:.1f},{y:.1f}" for x, y in pts) + '"/>')
        parts += [f'<circle class="point" cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="{c}"/>' for x, y in pts]
        parts.append(f'<text x="{width - m}" y="{m + 14 * k}" font-size="11" fill="{c}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- extractors

Extractor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class ModelExtractor:
    """Keypoints from the detection head, descriptors read from the dense map."""

    def __init__(self, params, cfg: nw.ModelConfig, extract: ExtractConfig = ExtractConfig()):
        self.params = {k: dc.DiffArray(v.data) for k, v in params.items()}
        self.cfg = cfg
        self.extract = extract

    def score_maps(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = nw.forward(np.asarray(images)[:, None], self.params, self.cfg)
        return dc.sigmoid(out.det_logits).data[:, 0], out.descriptors_dense.data

    def __call__(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scores, dense = self.score_maps(image[None])
        return self.from_maps(scores[0], dense[0])

    def from_maps(self, score: np.ndarray, dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e = self.extract
        kps = extract_keypoints(score, e.threshold, e.nms_radius, e.max_k, e.border)
        if len(kps) == 0:
            return kps, np.zeros((0, dense.shape[0]))
        return kps, nw.sample_descriptors(dense, kps[:, :2]).data


class PatchExtractor:
    """Deterministic classical baseline: Harris corners with normalised-patch
    descriptors.  Used for fixtures and as a sanity reference."""

    def __init__(self, max_k: int = 128, nms_radius: int = 2, patch: int = 7):
        self.max_k = max_k
        self.nms_radius = nms_radius
        self.patch = patch

    def response(self, image: np.ndarray) -> np.ndarray:
        gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
        sxx = ndimage.gaussian_filter(gx * gx, 1.0)
        syy = ndimage.gaussian_filter(gy * gy, 1.0)
        sxy = ndimage.gaussian_filter(gx * gy, 1.0)
        r = sxx * syy - sxy * sxy - 0.05 * (sxx + syy) ** 2
        r = np.maximum(r, 0.0)
        return r / r.max() if r.max() > 0 else r

    def __call__(self, image: np.ndarray):
        kps = extract_keypoints(self.response(image), 0.0, self.nms_radius, self.max_k, border=1)
        kps = kps[kps[:, 2] > 0]
        half = self.patch // 2
        pad = np.pad(np.asarray(image, dtype=np.float64), half, mode="reflect")
        desc = []
        for x, y, _ in kps:
            xi, yi = int(x), int(y)
            p = pad[yi:yi + self.patch, xi:xi + self.patch].ravel()
            p = p - p.mean()
            n = np.linalg.norm(p)
            desc.append(p / n if n > 0 else p)
        return kps, np.array(desc).reshape(len(kps), self.patch * self.patch)


def save_features(path, keypoints: np.ndarray, descriptors: np.ndarray) -> None:
    tsg.save_bundle(path, {"keypoints": np.asarray(keypoints, dtype="<f4").reshape(-1, 3),
                           "descriptors": np.asarray(descriptors, dtype="<f4").reshape(len(keypoints), -1)})


def load_features(path) -> tuple[np.ndarray, np.ndarray]:
    b = tsg.load_bundle(path)
    try:
        kps, desc = b["keypoints"].astype(np.float64), b["descriptors"].astype(np.float64)
    except KeyError as exc:
        raise BenchmarkError(f"{path}: feature file lacks entry {exc}") from None
    if kps.ndim != 2 or kps.shape[1] != 3 or len(desc) != len(kps):
        raise BenchmarkError(f"{path}: {len(kps)} keypoints but {len(desc)} descriptors")
    return kps, desc


class DumpedFeatures:
    """Features precomputed by an external tool: ``<root>/<sequence>/<k>.feat.tsg``."""

    def __init__(self, root):
        self.root = Path(root)

    def for_sequence(self, name: str, n_images: int) -> list[tuple[np.ndarray, np.ndarray]]:
        d = self.root / name
        files = sorted(d.glob("*.feat.tsg")) if d.is_dir() else []
        if len(files) != n_images:
            raise BenchmarkError(f"sequence {name}: {len(files)} feature files for {n_images} images")
        return [load_features(d / f"{k}.feat.tsg") for k in range(1, n_images + 1)]


# ---------------------------------------------------------------- benchmark

def evaluate_pair(h12, kp1, d1, kp2, d2) -> np.ndarray:
    """Reprojection errors of the mutual-NN matches between two feature sets."""
    matches = mutual_nn_match(d1, d2)
    if not matches:
        return np.zeros(0)
    i = np.array([m[0] for m in matches])
    j = np.array([m[1] for m in matches])
    return geo.reprojection_errors(h12, kp1[i, :2], kp2[j, :2])


def run_benchmark(features, sequences, extract: ExtractConfig | None = None) -> MatchReport:
    """Evaluate every (1, k) pair of each sequence.

    ``features`` is a :class:`DumpedFeatures`, a model extractor, or any
    callable image -> (keypoints, descriptors).
    """
    results = []
    for seq in sequences:
        images = [seq.reference] + list(seq.targets)
        if isinstance(features, DumpedFeatures):
            feats = features.for_sequence(seq.name, len(images))
        elif isinstance(features, ModelExtractor) and len({im.shape for im in images}) == 1:
            scores, dense = features.score_maps(np.stack(images))
            feats = [features.from_maps(s, d) for s, d in zip(scores, dense)]
        else:
            feats = [features(im) for im in images]
        kp1, d1 = feats[0]
        for k, hom in enumerate(seq.homographies, start=2):
            kp2, d2 = feats[k - 1]
            errs = evaluate_pair(hom, kp1, d1, kp2, d2)
            results.append(PairResult(seq.name, k, len(kp1), len(kp2), errs))
    return MatchReport(results)


def evaluate_pairs(extractor: ModelExtractor, pairs, name: str = "synthetic") -> MatchReport:
    """Evaluate in-memory :class:`~relfeat.datagen.TrainingPair` objects."""
    results = []
    for idx, p in enumerate(pairs):
        scores, dense = extractor.score_maps(np.stack([p.scene1.image, p.scene2.image]))
        kp1, d1 = extractor.from_maps(scores[0], dense[0])
        kp2, d2 = extractor.from_maps(scores[1], dense[1])
        results.append(PairResult(f"{name}_{idx:04d}", 2, len(kp1), len(kp2), evaluate_pair(p.H, kp1, d1, kp2, d2)))
    return MatchReport(results)
