"""Retrieval-based CTR prediction over long user behavior histories."""

from .archive import Archive, BehaviorDoc, Query, RetrievedSet, SearchStats, build_index, search
from .data import Catalog, PredictionTarget, Vocabulary, parse_log, prepare_dataset
from .metrics import auc, log_loss, ne, rig
from .synthetic import SynthConfig, gen_synthetic, make_dataset
from .trainer import Engine, RunResult, TrainConfig, run, stream

__all__ = [
    "Archive", "BehaviorDoc", "Catalog", "Engine", "PredictionTarget", "Query", "RetrievedSet",
    "RunResult", "SearchStats", "SynthConfig", "TrainConfig", "Vocabulary", "auc", "build_index",
    "gen_synthetic", "log_loss", "make_dataset", "ne", "parse_log", "prepare_dataset", "rig",
    "run", "search", "stream",
]
__version__ = "0.1.0"
