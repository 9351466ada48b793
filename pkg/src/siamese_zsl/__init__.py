"""Siamese-network species verification with zero-shot evaluation, in numpy."""

from .data import Dataset, Pair, SplitManifest, load_manifest, make_split, sample_pairs
from .loss import LossConfig, contrastive_loss
from .metrics import ConfusionMatrix, MetricsReport, evaluate_scores, threshold_sweep
from .network import ModelParameters, embed, energy, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate_protocols, train

__version__ = "0.1.0"
