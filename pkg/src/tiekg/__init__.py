"""Incremental training and evaluation of temporal knowledge-graph embeddings."""
from .config import Config, load_config
from .core import Pattern, Quadruple, Snapshot, SnapshotSequence, load_sequence, save_sequence
from .ingest import SyntheticConfig, generate_synthetic
from .model import ParameterStore, create_store, load_store, save_store
from .trainer import Trainer, aggregate, report

__version__ = "0.1.0"

__all__ = [
    "Config",
    "load_config",
    "Pattern",
    "Quadruple",
    "Snapshot",
    "SnapshotSequence",
    "load_sequence",
    "save_sequence",
    "SyntheticConfig",
    "generate_synthetic",
    "ParameterStore",
    "create_store",
    "load_store",
    "save_store",
    "Trainer",
    "aggregate",
    "report",
]
