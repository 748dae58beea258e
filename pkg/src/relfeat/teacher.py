"""Teacher signals: relation-source features, grouping labels and edge maps.

The segmentation teacher itself never runs here.  Its three outputs are
consumed either from TSG1 files or from the synthetic generator in
:mod:`relfeat.datagen`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import tsg


@dataclass(frozen=True)
class TeacherFeatureMap:
    """Encoder features, one row per stride-8 cell: shape (H/8 * W/8, C)."""

    F: np.ndarray

    def __post_init__(self):
        if self.F.ndim != 2:
            raise ValueError(f"teacher features must be 2-d, got shape {self.F.shape}")
        if not np.all(np.isfinite(self.F)):
            raise ValueError("teacher features contain NaN or Inf")


@dataclass(frozen=True)
class SemanticGrouping:
    """Per-pixel group ids 1..N; 0 marks pixels no group covers."""

    labels: np.ndarray

    @property
    def n_groups(self) -> int:
        return int(self.labels.max(initial=0))

    def check(self) -> None:
        ids = np.unique(self.labels)
        ids = ids[ids > 0]
        if ids.size and not np.array_equal(ids, np.arange(1, ids.max() + 1)):
            raise ValueError("group ids are not contiguous 1..N")


@dataclass(frozen=True)
class EdgeMap:
    E: np.ndarray

    def is_binary(self) -> bool:
        return bool(np.all((self.E == 0) | (self.E == 1)))


def relation_matrix(F):
    """Cosine similarity between every pair of rows of ``F``.

    Accepts a numpy array (returns numpy) or a DiffArray (returns a
    differentiable DiffArray).  Zero rows get similarity 0, including with
    themselves.
    """
    as_numpy = not isinstance(F, dc.DiffArray)
    data = F if as_numpy else F.data
    if np.isnan(data).any():
        raise ValueError("relation_matrix: NaN in features")
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError(f"relation_matrix needs a (rows, channels) array, got {data.shape}")
    unit = dc.l2_normalize_lastdim(dc.as_diff(F))
    r = dc.matmul(unit, dc.transpose(unit, (1, 0)))
    return r.data if as_numpy else r


class PairLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


def grouping_pair_label(grouping: SemanticGrouping | np.ndarray, i, j) -> PairLabel:
    """Weak pair label for two (x, y) pixel positions."""
    labels = grouping.labels if isinstance(grouping, SemanticGrouping) else np.asarray(grouping)
    (xi, yi), (xj, yj) = (int(round(v)) for v in i), (int(round(v)) for v in j)
    if (xi, yi) == (xj, yj):
        return PairLabel.IGNORE
    gi, gj = labels[yi, xi], labels[yj, xj]
    if gi == 0 or gj == 0:
        return PairLabel.IGNORE
    return PairLabel.POSITIVE if gi == gj else PairLabel.NEGATIVE


# ---------------------------------------------------------------- files

_KIND_DTYPE = {tsg.KIND_FEATURE: np.dtype("<f4"), tsg.KIND_GROUPING: np.dtype("<u2"), tsg.KIND_EDGE: np.dtype("u1")}


def write_signal(path, signal) -> None:
    if isinstance(signal, TeacherFeatureMap):
        kind, arr = tsg.KIND_FEATURE, signal.F
    elif isinstance(signal, SemanticGrouping):
        kind, arr = tsg.KIND_GROUPING, signal.labels
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 0xFFFF:
            raise ValueError("grouping ids must fit in uint16")
    elif isinstance(signal, EdgeMap):
        kind, arr = tsg.KIND_EDGE, signal.E
        if not signal.is_binary():
            raise ValueError("only binary edge maps can be stored")
    else:
        raise TypeError(f"not a teacher signal: {type(signal).__name__}")
    tsg.atomic_write(path, tsg.encode(np.asarray(arr).astype(_KIND_DTYPE[kind]), kind))


def read_signal(path, image_size: tuple[int, int] | None = None):
    """Load a signal; ``image_size`` (H, W) enables extent checks."""
    path = Path(path)
    kind, arr = tsg.decode(path.read_bytes(), str(path))
    if kind not in _KIND_DTYPE:
        raise tsg.FormatError(f"{path}: unknown signal kind {kind}")
    if arr.dtype != _KIND_DTYPE[kind]:
        raise tsg.FormatError(f"{path}: kind {kind} stored with dtype {arr.dtype}, expected {_KIND_DTYPE[kind]}")
    if kind == tsg.KIND_FEATURE:
        if arr.ndim != 2:
            raise tsg.DimensionMismatch(f"{path}: teacher features must be 2-d, got {arr.shape}")
        if image_size is not None:
            rows = (image_size[0] // 8) * (image_size[1] // 8)
            if arr.shape[0] != rows:
                raise tsg.DimensionMismatch(
                    f"{path}: {arr.shape[0]} feature rows, image {image_size[0]}x{image_size[1]} needs {rows}")
        return TeacherFeatureMap(arr.astype(np.float64))
    if arr.ndim != 2:
        raise tsg.DimensionMismatch(f"{path}: map must be 2-d, got {arr.shape}")
    if image_size is not None and arr.shape != tuple(image_size):
        raise tsg.DimensionMismatch(f"{path}: map is {arr.shape}, expected {tuple(image_size)}")
    if kind == tsg.KIND_GROUPING:
        return SemanticGrouping(arr.astype(np.int64))
    return EdgeMap(arr.astype(np.float64))


def write_edge_pgm(path, edge: EdgeMap | np.ndarray) -> None:
    from .pnm import write_pgm

    e = edge.E if isinstance(edge, EdgeMap) else np.asarray(edge)
    write_pgm(path, np.clip(e, 0, 1))
