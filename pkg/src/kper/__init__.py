"""Knowledge-aware recommendation with popularity-seed referencing."""

from .data import CollaborativeKnowledgeGraph, DatasetSplit, load_ckg, split_dataset
from .encoders import ModelParameters
from .evaluation import EvaluationReport, evaluate
from .model import KPER
from .referencing import SeedPool, build_seed_pool
from .sampling import TripleNeighborhoods
from .training import Checkpoint, TrainConfig, train

__all__ = [
    "CollaborativeKnowledgeGraph", "DatasetSplit", "load_ckg", "split_dataset", "ModelParameters",
    "EvaluationReport", "evaluate", "KPER", "SeedPool", "build_seed_pool", "TripleNeighborhoods",
    "Checkpoint", "TrainConfig", "train",
]

__version__ = "0.1.0"
