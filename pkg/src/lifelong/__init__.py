"""Lifelong learning on a dynamically expanding columnar network."""

from .consolidation import MASK, ConsolidationState, ParamSelector, freeze_tasks, penalty, set_consolidation
from .errors import (CapacityError, ConfigError, ConstraintError, DataError, LifelongError,
                     NumericalError, StateError, TopologyError, UnknownTaskError)
from .metrics import AccuracyMatrix, ConfusionMatrix, evaluate_single_head, forgetting, transfer_scores
from .netcore import apply_step, backward, fit, forward, task_loss
from .network import ColumnarNetwork, ParamId
from .policies import Learner, PolicyConfig, RandomNetworkLearner, random_network_mode
from .tasks import RehearsalBuffer, TaskSpec, TaskStream, apply_drift, gen_confusable_variant, gen_task

__version__ = "0.1.0"
