"""Interpretable prototype classification with self-trained domain adaptation."""
from .config import TrainConfig, load_config
from .data import DomainDataset, ImageSample, generate_synthetic_pair, load_folder_dataset
from .estimator import TCPLClassifier
from .interpret import ExplanationTrace, build_trace
from .model import PrototypeNetwork, build_model
from .trainer import fit

__all__ = [
    "DomainDataset", "ExplanationTrace", "ImageSample", "PrototypeNetwork", "TCPLClassifier", "TrainConfig",
    "build_model", "build_trace", "fit", "generate_synthetic_pair", "load_config", "load_folder_dataset",
]
__version__ = "0.1.0"
