"""Co-evolution of task agents and self-referential optimizer agents."""

from .engine import BudgetLedger, Engine, LoopConfig, RunState
from .evaluators import EvalResult, Task, TaskSpec, evaluate, task_spec
from .population import AgentRecord, Kind, Population
from .rating import EloLedger, elo_update, initialize_offspring_rating, pairwise_competition
from .sampling import Role, SamplerConfig, rank_softmax_probs, sample_subset

__version__ = "0.1.0"
