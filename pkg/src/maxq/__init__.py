"""Hierarchical reinforcement learning with the MAXQ value decomposition.

The package provides enumerable MDP models (Taxi in particular), MAXQ task
graphs with state-abstraction annotations, the MAXQ-Q and flat Q learners,
exact oracles, brute-force abstraction checks, and an experiment harness.
"""

from .hierarchy import EdgeAnnotation, SubtaskDef, TaskGraph, validate_dag
from .learner import ExplorationSchedule, FlatQLearner, LearningSchedule, MaxqLearner, StepSizeRule
from .mdp import MdpModel, Transition, VariableSchema, sample_step
from .taxi import TaxiConfig, TaxiModel, taxi_model, taxi_task_graph

__all__ = [
    "EdgeAnnotation",
    "ExplorationSchedule",
    "FlatQLearner",
    "LearningSchedule",
    "MaxqLearner",
    "MdpModel",
    "StepSizeRule",
    "SubtaskDef",
    "TaskGraph",
    "TaxiConfig",
    "TaxiModel",
    "Transition",
    "VariableSchema",
    "sample_step",
    "taxi_model",
    "taxi_task_graph",
    "validate_dag",
]

__version__ = "0.1.0"
