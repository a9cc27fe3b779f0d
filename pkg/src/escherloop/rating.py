"""Dynamic benchmarking: same-round task scores become Elo updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

INITIAL_RATING = 1200.0
K_FACTOR = 32.0


@dataclass
class ResultMatrix:
    """Antisymmetric win/loss/draw matrix over a benchmarking cohort."""

    W: np.ndarray
    cohort: list[str]
    round_scores: list[float]


@dataclass
class EloLedger:
    ratings: dict[str, float] = field(default_factory=dict)
    k_factor: float = K_FACTOR
    history: list[tuple[int, str, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.k_factor > 0:
            raise ValueError("k_factor must be positive")

    def add(self, agent_id: str, rating: float = INITIAL_RATING) -> None:
        self.ratings[agent_id] = float(rating)

    def to_dict(self) -> dict:
        return {
            "ratings": self.ratings,
            "k_factor": self.k_factor,
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EloLedger":
        return cls(
            ratings={k: float(v) for k, v in d["ratings"].items()},
            k_factor=float(d["k_factor"]),
            history=[(int(a), str(b), float(c), float(e)) for a, b, c, e in d["history"]],
        )


def pairwise_competition(round_scores: Sequence[float], draw_tol: float = 1e-9, cohort: Sequence[str] | None = None) -> ResultMatrix:
    n = len(round_scores)
    if n < 2:
        raise ValueError("pairwise competition needs at least two scores")
    if not all(math.isfinite(s) for s in round_scores):
        raise ValueError("round scores must be finite")
    s = np.asarray(round_scores, dtype=float)
    W = np.zeros((n, n), dtype=int)
    W[s[:, None] > s[None, :] + draw_tol] = 1
    W[s[None, :] > s[:, None] + draw_tol] = -1
    ids = list(cohort) if cohort is not None else [str(i) for i in range(n)]
    return ResultMatrix(W=W, cohort=ids, round_scores=[float(x) for x in s])


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def elo_update(ledger: EloLedger, result: ResultMatrix, iteration: int) -> dict[str, float]:
    """Apply one round sequentially over pairs (i < j) in index order.

    Ratings move after every pair, so later pairs see the updated values.
    Returns the net rating change per cohort id.
    """
    missing = [c for c in result.cohort if c not in ledger.ratings]
    if missing:
        raise KeyError(f"cohort ids without rating: {missing}")
    ids = result.cohort
    before = {c: ledger.ratings[c] for c in ids}
    K = ledger.k_factor
    n = len(ids)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = ids[i], ids[j]
            e_a = expected_score(ledger.ratings[a], ledger.ratings[b])
            s_a = {1: 1.0, -1: 0.0, 0: 0.5}[int(result.W[i][j])]
            delta = K * (s_a - e_a)
            # the same delta moves both sides, so each pair conserves the sum
            ledger.ratings[a] += delta
            ledger.ratings[b] -= delta
    for c in ids:
        ledger.history.append((iteration, c, before[c], ledger.ratings[c]))
    return {c: ledger.ratings[c] - before[c] for c in ids}


def initialize_offspring_rating(parent_ratings: Sequence[float]) -> float:
    if len(parent_ratings) == 0:
        raise ValueError("offspring rating needs at least one parent")
    return float(sum(parent_ratings) / len(parent_ratings))
