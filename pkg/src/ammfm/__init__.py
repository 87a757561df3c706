"""Asymmetric multi-modal fusion for paired clinical/dermoscopy classification, in numpy."""

from .blocks import aab_forward, bab_forward, cat_fuse
from .data import SPC_SCHEMA, SynthConfig, load_index, synth_generate, write_dataset
from .fusion import FusionWeights, evaluate, weight_search, weighted_fuse
from .model import FusionModel, ModelConfig, count_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, total_loss

__version__ = "0.1.0"
