"""Local feature learning with relation distillation, edge attention and
grouping-contrastive supervision, on a small numpy autodiff engine."""
from . import datagen, diffcore, evaluation, geometry, losses, network, teacher, trainer, tsg
from .evaluation import MatchReport, extract_keypoints, mma_curve, mutual_nn_match, run_benchmark
from .network import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, run_training, train_step

__version__ = "0.1.0"
