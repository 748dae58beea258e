"""A short training run and its effect on held-out matching.

About two minutes on one CPU.  Run from the repository root:
    python3 demos/04_short_training.py
"""
import logging
import tempfile

from relfeat import evaluation as ev
from relfeat import network as nw
from relfeat import trainer as tr

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = tr.TrainConfig(steps=300, height=32, width=32, batch=4, width_factor=0.125, n_shapes=5,
                     train_pairs=128, eval_pairs=16, checkpoint_every=100)
held = tr.heldout_pairs(cfg)

# Matching quality of the untrained network.
init = nw.init_params(cfg.model_config(), cfg.seed)
before = ev.evaluate_pairs(ev.ModelExtractor(init, cfg.model_config(), cfg.extract_config()), held)
print("before: MMA@3 %.3f, %.1f matches/pair" % (before.mma_at(3), before.mean_matches))

with tempfile.TemporaryDirectory() as out:
    res = tr.run_training(cfg, out, progress_every=50)
    print("loss drop over the run: %.1f%%" % (100 * tr.loss_drop(res.records)))
    print("after:  MMA@3 %.3f, %.1f matches/pair" % (res.report.mma_at(3), res.report.mean_matches))

    # The checkpoint reloads with its architecture and gives the same report.
    params, model = nw.load_checkpoint(res.checkpoint)
    again = ev.evaluate_pairs(ev.ModelExtractor(params, model, cfg.extract_config()), held, "heldout")
    print("reloaded checkpoint agrees:", again.csv_text() == res.report.csv_text())
