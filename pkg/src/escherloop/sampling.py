"""Rank-based softmax selection shared by every sampling role."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .population import AgentRecord, Population


class Role(str, enum.Enum):
    TASK_PARENT = "task_parent"
    MATCHMAKING = "matchmaking"
    MENTORING = "mentoring"
    CHECKPOINT = "checkpoint"


DEFAULT_TEMPERATURES = {
    Role.TASK_PARENT: 1.2,
    Role.MATCHMAKING: 1.2,
    Role.MENTORING: 0.5,
    Role.CHECKPOINT: 1.2,
}


@dataclass(frozen=True)
class SamplerConfig:
    role: Role
    temperature: float | None = None

    def __post_init__(self):
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURES[Role(self.role)])
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def ranks(scores: Sequence[float]) -> list[int]:
    """Rank 0 for the highest score; ties go to the earlier position."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    out = [0] * len(scores)
    for r, i in enumerate(order):
        out[i] = r
    return out


def rank_softmax_probs(scores: Sequence[float], temperature: float) -> list[float]:
    if len(scores) == 0:
        raise ValueError("cannot rank an empty candidate set")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("scores must be finite")
    r = np.asarray(ranks(scores), dtype=float)
    # rank 0 always contributes exp(0) = 1, so the sum never underflows
    w = np.exp(-r / temperature)
    return (w / w.sum()).tolist()


def sample_indices(scores: Sequence[float], k: int, temperature: float, rng: np.random.Generator) -> list[int]:
    """Draw ``k`` distinct positions, renormalizing after each removal."""
    if k > len(scores):
        raise ValueError(f"cannot draw {k} from {len(scores)} candidates")
    remaining = list(range(len(scores)))
    drawn = []
    for _ in range(k):
        p = rank_softmax_probs([scores[i] for i in remaining], temperature)
        j = int(rng.choice(len(remaining), p=p))
        drawn.append(remaining.pop(j))
    return drawn


def sample_subset(pop: Population, k: int, cfg: SamplerConfig, rng: np.random.Generator) -> list[AgentRecord]:
    """Draw ``k`` members in draw order (first draw is the lead for mentoring)."""
    idx = sample_indices(pop.scores, k, cfg.temperature, rng)
    return [pop.members[i] for i in idx]
