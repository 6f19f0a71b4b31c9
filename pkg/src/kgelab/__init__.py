"""TransE knowledge-graph embedding lab for drug-disease link prediction."""

from .ablation import AblationKind, AblationSpec
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    KGLabError,
    ParseError,
    SamplingExhaustedError,
    SchemaError,
    TypeConflictError,
)
from .evaluation import EvalConfig, EvalReport, average_runs, evaluate
from .graph import Dictionary, KnowledgeGraph, load_graph, merge, normalize, save_graph, stats
from .split import DatasetSplit, SplitConfig, split
from .transe import EmbeddingTable, TrainConfig, init_embeddings, score, train

__version__ = "0.1.0"

__all__ = [
    "AblationKind", "AblationSpec",
    "ConfigError", "ContractError", "DataError", "DivergenceError", "KGLabError", "ParseError",
    "SamplingExhaustedError", "SchemaError", "TypeConflictError",
    "EvalConfig", "EvalReport", "average_runs", "evaluate",
    "Dictionary", "KnowledgeGraph", "load_graph", "merge", "normalize", "save_graph", "stats",
    "DatasetSplit", "SplitConfig", "split",
    "EmbeddingTable", "TrainConfig", "init_embeddings", "score", "train",
]
