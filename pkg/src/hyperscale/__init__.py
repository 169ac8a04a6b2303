"""Amortized learning of feature rescaling factors for UNet segmentation.

A small hypernetwork maps a rescaling factor φ to the full weight vector of
a UNet whose down/upsampling steps resize feature maps by φ. One training run
then covers a continuum of accuracy/cost trade-offs.
"""

from .checkpoint import Checkpoint, load, save
from .cost import SelectionConstraint, flops, pareto_front, select_factor
from .data import Dataset, load_dataset, split, synth_shapes
from .evaluation import SweepCurve, evaluate, sweep
from .hypernet import HyperNet
from .training import PriorSpec, TrainConfig, Trainer, fit
from .unet import RescalePolicy, UNetConfig, build_manifest, forward

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Dataset",
    "HyperNet",
    "PriorSpec",
    "RescalePolicy",
    "SelectionConstraint",
    "SweepCurve",
    "TrainConfig",
    "Trainer",
    "UNetConfig",
    "build_manifest",
    "evaluate",
    "fit",
    "flops",
    "forward",
    "load",
    "load_dataset",
    "pareto_front",
    "save",
    "select_factor",
    "split",
    "sweep",
    "synth_shapes",
]
