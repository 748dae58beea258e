"""The five training losses evaluated on a freshly initialised network.

Run from the repository root:  python3 demos/02_relation_and_losses.py
"""
import numpy as np

from relfeat import diffcore as dc
from relfeat import losses as ls
from relfeat import network as nw
from relfeat import trainer as tr

# Grouping contrastive loss on scalar distances.  With D_pos = 0.5 and
# D_neg = 1.2 the loss is softplus((0.5 - 1.2) / 5).
print("wsc(0.5, 1.2) = %.6f" % float(ls.loss_wsc(0.5, 1.2, 0.07, 5.0).data))
print("wsc below margin only sees the margin: %.6f == %.6f" % (
    float(ls.loss_wsc(0.01, 1.2).data), float(ls.loss_wsc(0.07, 1.2).data)))

# A tiny desk configuration: 32x32 images, eighth-width channels.
cfg = tr.TrainConfig(height=32, width=32, batch=2, width_factor=0.125, n_shapes=5)
pairs = [tr.train_pair(cfg, i) for i in range(cfg.batch)]
params = nw.init_params(cfg.model_config(), seed=0)
print("parameters", nw.param_count(params))

out = nw.forward(tr.batch_images(pairs), params, cfg.model_config())
print("det logits", out.det_logits.shape, "descriptors", out.descriptors_dense.shape,
      "edge", out.edge_pred.shape, "distill", out.c4d.shape)

bundle = tr.losses_from_outputs(out, pairs, cfg)
for k, v in bundle.values().items():
    print(f"{k:7s} {v:.4f}")

# Switching a component off zeroes exactly its slot.
off = tr.losses_from_outputs(out, pairs, tr.TrainConfig(**{**cfg.to_dict(), "wsc": False}))
print("without wsc:", {k: round(v, 4) for k, v in off.values().items()})

# The gradient of the total reaches every parameter that takes part.
for p in params.values():
    p.grad = None
dc.backward(bundle.total)
norms = {k: float(np.linalg.norm(p.grad)) for k, p in params.items() if p.grad is not None}
print("layers with gradient:", len(norms), "of", len(params))
