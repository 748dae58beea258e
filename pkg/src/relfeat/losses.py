"""Training objectives: detection, descriptor triplet, relation distillation,
edge regression and grouping-contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class DegenerateSet(ValueError):
    """Raised when a point set has no positive or no negative pairs."""


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, dc.DiffArray) else float(x)


def loss_dis(r_teacher, r_student) -> dc.DiffArray:
    """Mean absolute difference between two relation matrices."""
    a, b = dc.as_diff(r_teacher), dc.as_diff(r_student)
    if a.shape != b.shape:
        raise dc.ShapeError(f"relation matrices differ in shape: {a.shape} vs {b.shape}")
    return dc.mean(dc.abs_(dc.sub(a, b)))


def loss_edge(edge_teacher, edge_pred) -> dc.DiffArray:
    """Per-pixel mean of |E - E'| (mean rather than sum, see README)."""
    a, b = dc.as_diff(edge_teacher), dc.as_diff(edge_pred)
    if a.shape != b.shape:
        raise dc.ShapeError(f"edge maps differ in shape: {a.shape} vs {b.shape}")
    return dc.mean(dc.abs_(dc.sub(a, b)))


def positive_weight(labels: np.ndarray) -> float:
    pos = float(np.sum(labels))
    neg = float(labels.size - pos)
    if pos == 0:
        return 1.0
    return float(np.clip(neg / pos, 1.0, 100.0))


def loss_det(logits, labels, pos_weight: float | None = None) -> dc.DiffArray:
    """Class-weighted binary cross-entropy on per-pixel logits.

    Normalised by the total weight, so all-zero logits give exactly log 2.
    """
    logits = dc.as_diff(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise dc.ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("keypoint labels must be 0 or 1")
    lam = positive_weight(labels) if pos_weight is None else pos_weight
    # y*softplus(-x) + (1-y)*softplus(x) is the stable BCE
    w_pos = lam * labels
    w_neg = 1.0 - labels
    terms = dc.add(dc.mul(dc.softplus(dc.neg(logits)), w_pos), dc.mul(dc.softplus(logits), w_neg))
    return dc.mul(dc.sum_(terms), 1.0 / float(np.sum(w_pos + w_neg)))


@dataclass
class GroupDistances:
    d_pos: dc.DiffArray
    n_pos: int
    d_neg: dc.DiffArray
    n_neg: int


def sample_point_set(grouping: np.ndarray, rng: np.random.Generator, cap: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Stratified sample of labelled pixels: equal quota per non-zero group id,
    uniform without replacement inside each group's mask.

    Returns (P, 2) x, y points and their (P,) labels, P <= cap.
    """
    grouping = np.asarray(grouping)
    ids = [int(g) for g in np.unique(grouping) if g != 0]
    if not ids or cap < 1:
        return np.zeros((0, 2)), np.zeros(0, dtype=grouping.dtype)
    quota = max(1, cap // len(ids))
    pts, labs = [], []
    for g in ids:
        ys, xs = np.nonzero(grouping == g)
        take = rng.choice(len(xs), size=min(quota, len(xs)), replace=False)
        take.sort()
        pts.append(np.stack([xs[take], ys[take]], axis=1))
        labs.append(np.full(len(take), g, dtype=grouping.dtype))
    pts, labs = np.concatenate(pts)[:cap], np.concatenate(labs)[:cap]
    return pts.astype(np.float64), labs


def pair_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle masks of same-label and different-label pairs."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    return same & upper, ~same & upper


def group_distances(descriptors, labels) -> GroupDistances:
    """Mean descriptor distance over same-group and cross-group unordered pairs."""
    desc = dc.as_diff(descriptors)
    labels = np.asarray(labels)
    if desc.shape[0] < 2 or len(labels) != desc.shape[0]:
        raise DegenerateSet("need at least two labelled points")
    pos, neg = pair_masks(labels)
    j, k = int(pos.sum()), int(neg.sum())
    if j == 0 or k == 0:
        raise DegenerateSet(f"{j} positive / {k} negative pairs")
    dist = dc.euclidean_distance_matrix(desc, desc)
    flat = dc.reshape(dist, (-1,))
    d_pos = dc.mean(dc.take(flat, np.flatnonzero(pos.ravel())))
    d_neg = dc.mean(dc.take(flat, np.flatnonzero(neg.ravel())))
    return GroupDistances(d_pos, j, d_neg, k)


def loss_wsc(d_pos, d_neg, margin: float = 0.07, temperature: float = 5.0, literal: bool = False) -> dc.DiffArray:
    """Contrastive loss on mean positive / negative distances.

    ``-log(exp(-a/T) / (exp(-a/T) + exp(-d_neg/T)))`` with ``a = max(d_pos, M)``,
    evaluated as ``softplus((a - d_neg)/T)``.  ``literal=True`` evaluates the
    formula exactly as typeset in the source, which collapses to d_neg/T.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = dc.maximum_const(d_pos, margin)
    d_neg = dc.as_diff(d_neg)
    if literal:
        num = dc.exp(dc.mul(a, 1.0 / temperature))
        den = dc.exp(dc.mul(dc.add(a, d_neg), 1.0 / temperature))
        return dc.neg(dc.log(dc.div(num, den)))
    return dc.softplus(dc.mul(dc.sub(a, d_neg), 1.0 / temperature))


def hardest_negatives(dist: np.ndarray, p2: np.ndarray, radius: float = 4.0) -> np.ndarray:
    """Index of the closest non-matching positive-side descriptor per anchor.

    Candidates within ``radius`` pixels of the anchor's true match in image 2
    are excluded.  Returns -1 where every candidate is excluded.
    """
    gap = p2[None, :, :] - p2[:, None, :]
    near = np.sum(gap * gap, axis=-1) <= radius * radius
    masked = np.where(near, np.inf, dist)
    idx = np.argmin(masked, axis=1)
    idx[~np.isfinite(masked[np.arange(len(idx)), idx])] = -1
    return idx


def loss_des(anchors, positives, att_a, att_p, p2, margin: float = 1.0, radius: float = 4.0) -> dc.DiffArray:
    """Attention-weighted hardest-negative triplet loss.

    ``anchors[i]`` and ``positives[i]`` describe the same scene point seen in
    images 1 and 2; ``p2`` are the image-2 positions, used to exclude
    near-duplicates of the true match from the negative search.
    """
    anchors, positives = dc.as_diff(anchors), dc.as_diff(positives)
    n = anchors.shape[0]
    if n < 2:
        raise DegenerateSet("need at least two correspondences")
    dist = dc.euclidean_distance_matrix(anchors, positives)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 2)
    neg_idx = hardest_negatives(dist.data, p2, radius=radius)
    keep = np.flatnonzero(neg_idx >= 0)
    if keep.size == 0:
        raise DegenerateSet("no admissible negatives")
    flat = dc.reshape(dist, (-1,))
    d_ap = dc.take(flat, keep * n + keep)
    d_an = dc.take(flat, keep * n + neg_idx[keep])
    hinge = dc.relu(dc.add(dc.sub(d_ap, d_an), margin))
    w = dc.mul(dc.take(dc.reshape(att_a, (-1,)), keep), dc.take(dc.reshape(att_p, (-1,)), keep))
    return dc.div(dc.sum_(dc.mul(w, hinge)), dc.sum_(w))


@dataclass
class LossBundle:
    l_det: dc.DiffArray
    l_des: dc.DiffArray
    l_dis: dc.DiffArray
    l_edge: dc.DiffArray
    l_wsc: dc.DiffArray

    @property
    def total(self) -> dc.DiffArray:
        return total_loss(self.l_det, self.l_des, self.l_dis, self.l_edge, self.l_wsc)

    def values(self) -> dict[str, float]:
        out = {k: _scalar(getattr(self, k)) for k in ("l_det", "l_des", "l_dis", "l_edge", "l_wsc")}
        out["total"] = _scalar(self.total)
        return out


def zero() -> dc.DiffArray:
    return dc.DiffArray(0.0)


def total_loss(l_det, l_des, l_dis, l_edge, l_wsc) -> dc.DiffArray:
    """Unweighted sum of the five components."""
    out = dc.add(l_det, l_des)
    for term in (l_dis, l_edge, l_wsc):
        out = dc.add(out, term)
    return out
