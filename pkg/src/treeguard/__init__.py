"""Exact robustness verification and robust training of tree ensembles."""
from .epsearch import SearchConfig, search_epsilon
from .train import RobustBoostingClassifier, RobustForestClassifier, TrainConfig, fit_model
from .trees import Box, Ensemble, Tree
from .verify import Verifier, check_robust, evaluate_robustness, minimal_distance

__all__ = [
    "Box",
    "Ensemble",
    "RobustBoostingClassifier",
    "RobustForestClassifier",
    "SearchConfig",
    "TrainConfig",
    "Tree",
    "Verifier",
    "check_robust",
    "evaluate_robustness",
    "fit_model",
    "minimal_distance",
    "search_epsilon",
]
