"""DADU: dense-encoder U-Net with dual attention and edge skip connections, in numpy."""

from .attention import AttentionMaps, CamState, DabState, SamState, channel_attention, dab, spatial_attention
from .data import Sample, kfold_split, load_dataset, load_sample, phantom_dataset, synth_phantom
from .metrics import (SupervisionWeights, deep_supervision_loss, dice_coefficient, dice_loss,
                      evaluate_case, extract_contour, hausdorff_directed, hausdorff_symmetric)
from .network import DaduModel, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward
from .trainer import AdamState, TrainConfig, adam_step, evaluate, run_cv, train_model

__version__ = "0.1.0"
