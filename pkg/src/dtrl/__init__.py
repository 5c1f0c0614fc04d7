"""Decision-tree policies as reactive policies of an iterative bounding MDP."""

from dtrl.dataset import Dataset, RawDataset, gen_toy, load_csv, normalize
from dtrl.ibmdp import FeatureBounds, IbmdpInstance, TabularPolicy
from dtrl.oibmdp import OibmdpModel, build_model, policy_return
from dtrl.solvers import SolverConfig, solve
from dtrl.tree import (
    DecisionTree,
    evaluate_tree,
    extract_tree,
    greedy_cart,
    load_tree,
    save_tree,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DecisionTree",
    "FeatureBounds",
    "IbmdpInstance",
    "OibmdpModel",
    "RawDataset",
    "SolverConfig",
    "TabularPolicy",
    "build_model",
    "evaluate_tree",
    "extract_tree",
    "gen_toy",
    "greedy_cart",
    "load_csv",
    "load_tree",
    "normalize",
    "policy_return",
    "save_tree",
    "solve",
]
