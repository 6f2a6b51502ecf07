"""Part-pooled appearance descriptors with learned soft part assignment.

Pipeline in one breath: images -> conv trunk -> spatial activation tensor ->
horizontal stripe pooling (or learned soft reassignment) -> per-part
reduction -> per-part classifiers for training, concatenated part vectors
for retrieval.
"""

from .config import (
    BackboneConfig,
    EvalConfig,
    HeadConfig,
    ModelConfig,
    RppConfig,
    RunConfig,
    Schedule,
    SynthConfig,
    load_run_config,
)
from .data import DatasetManifest, ImageSample, generate_synthetic, load_directory
from .model import Model
from .retrieval import Descriptor, EvalResult, evaluate, evaluate_manifest, extract_descriptor
from .rpp import build_rpp_head
from .train import TrainState, fit, induced_training, pcb_loss

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DatasetManifest",
    "Descriptor",
    "EvalConfig",
    "EvalResult",
    "HeadConfig",
    "ImageSample",
    "Model",
    "ModelConfig",
    "RppConfig",
    "RunConfig",
    "Schedule",
    "SynthConfig",
    "TrainState",
    "build_rpp_head",
    "evaluate",
    "evaluate_manifest",
    "extract_descriptor",
    "fit",
    "generate_synthetic",
    "induced_training",
    "load_directory",
    "load_run_config",
    "pcb_loss",
]
