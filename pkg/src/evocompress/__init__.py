"""
evocompress

Mutation-only multi-objective evolutionary search over neural network
compression pipelines (pruning, quantization, low-rank decomposition and
regularized training) on a small numpy network engine.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .core import evaluate_checkpoint, resume_search, run_search
from .datasets import Dataset, builtin_dataset, load_dataset
from .evolution import Evolution, EvolutionConfig, Individual
from .metrics import MetricVector, evaluate_network, percent_change
from .pareto import ParetoArchive, dominates, hypervolume
from .pipeline import Pipeline, execute, parse, to_string, validate
from .report import write_reports
from .visualization import plot_percent_change

__all__ = [
    "RunConfig",
    "load_config",
    "run_search",
    "resume_search",
    "evaluate_checkpoint",
    "Dataset",
    "load_dataset",
    "builtin_dataset",
    "Evolution",
    "EvolutionConfig",
    "Individual",
    "MetricVector",
    "evaluate_network",
    "percent_change",
    "ParetoArchive",
    "dominates",
    "hypervolume",
    "Pipeline",
    "parse",
    "to_string",
    "validate",
    "execute",
    "write_reports",
    "plot_percent_change",
]
