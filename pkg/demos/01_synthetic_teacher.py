"""Synthetic scenes and the teacher signals they carry.

Run from the repository root:  python3 demos/01_synthetic_teacher.py
"""
import numpy as np

from relfeat import datagen as dg
from relfeat import teacher as tch

# A scene is a handful of filled shapes over a smooth texture.  Group ids
# follow paint order, 0 is the background.
scene = dg.generate_scene(seed=3, height=64, width=64, n_shapes=6)
print("image range", scene.image.min().round(3), scene.image.max().round(3))
print("group ids", np.unique(scene.grouping))

# Edges sit on the occluding side of every boundary and are one pixel wide.
print("edge pixels", int(scene.edge.sum()), "binary:", tch.EdgeMap(scene.edge).is_binary())

# Polygon corners become keypoint labels (ellipses contribute none).
print("keypoints (x, y):")
print(scene.keypoints.astype(int))

# The teacher feature map has one row per 8x8 cell.  Rows of cells in the
# same group point the same way, so the relation matrix is block structured.
R = tch.relation_matrix(scene.teacher_F)
ids = dg.cell_labels(scene.grouping)
same = ids[:, None] == ids[None, :]
print("teacher features", scene.teacher_F.shape)
print("mean relation, same group  %.3f" % R[same].mean())
print("mean relation, other group %.3f" % R[~same].mean())

# Pair labels for the grouping contrastive loss: same group, different
# group, or ignored when either pixel is background.
g = tch.SemanticGrouping(scene.grouping)
top = int(scene.grouping.max())
ys, xs = np.nonzero(scene.grouping == top)
ys2, xs2 = np.nonzero(scene.grouping == top - 1)
a, b, c = (int(xs[0]), int(ys[0])), (int(xs[-1]), int(ys[-1])), (int(xs2[0]), int(ys2[0]))
print("pair labels:", tch.grouping_pair_label(g, a, b).name, tch.grouping_pair_label(g, a, c).name,
      tch.grouping_pair_label(g, a, (0, 0)).name if scene.grouping[0, 0] == 0 else "")

# A second view through a homography keeps the group ids, so correspondences
# carry labels in both images.
pair = dg.generate_pair(3, 11, n_shapes=6)
print("homography\n", pair.H.round(4))
print("co-visible grid correspondences", len(pair.p1))
