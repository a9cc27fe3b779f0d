"""Score-bearing agent populations with capacity-bounded eviction."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional


class Kind(str, enum.Enum):
    TASK = "task"
    OPTIMIZER = "optimizer"


class PopulationError(ValueError):
    pass


@dataclass
class AgentRecord:
    """A task or optimizer agent.

    For task agents ``score`` is the normalized task score; for optimizers it
    mirrors the current Elo rating.
    """

    id: str
    kind: Kind
    payload: str
    score: float
    parent_ids: list[str] = field(default_factory=list)
    created_at_iteration: int = 0
    eval_count: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentRecord":
        return cls(
            id=d["id"],
            kind=Kind(d["kind"]),
            payload=d["payload"],
            score=float(d["score"]),
            parent_ids=list(d.get("parent_ids", [])),
            created_at_iteration=int(d.get("created_at_iteration", 0)),
            eval_count=int(d.get("eval_count", 0)),
        )


def _weakness_key(rec: AgentRecord, position: int):
    # lowest score first; among ties the older record goes first
    return (rec.score, rec.created_at_iteration, position)


Descriptor = Callable[[AgentRecord], tuple]


def default_descriptor(rec: AgentRecord, length_bucket: int = 256) -> tuple:
    """2-D behaviour cell: payload length bucket (8) x eval_count bucket (4)."""
    return (min(len(rec.payload) // length_bucket, 7), min(rec.eval_count // 4, 3))


class Population:
    """Ordered collection of agents of one kind.

    Members are kept in insertion order, so list position doubles as an age
    tie-breaker for rank-based sampling. When ``descriptor`` is given the
    population behaves as a MAP-Elites overlay: a newcomer competes only with
    the occupants of its own behaviour cell before the global cap applies.
    """

    def __init__(
        self,
        kind: Kind,
        capacity: int,
        members: Optional[Iterable[AgentRecord]] = None,
        descriptor: Optional[Descriptor] = None,
    ):
        if capacity < 1:
            raise PopulationError("capacity must be positive")
        self.kind = Kind(kind)
        self.capacity = capacity
        self.descriptor = descriptor
        self.members: list[AgentRecord] = []
        for rec in members or ():
            self._check(rec)
            self.members.append(rec)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, agent_id: str) -> bool:
        return any(m.id == agent_id for m in self.members)

    def get(self, agent_id: str) -> AgentRecord:
        for m in self.members:
            if m.id == agent_id:
                return m
        raise KeyError(agent_id)

    @property
    def scores(self) -> list[float]:
        return [m.score for m in self.members]

    def _check(self, rec: AgentRecord) -> None:
        if rec.kind != self.kind:
            raise PopulationError(f"kind mismatch: {rec.kind.value} into {self.kind.value} population")
        if rec.id in self:
            raise PopulationError(f"duplicate id {rec.id!r}")

    def insert(self, rec: AgentRecord) -> list[AgentRecord]:
        """Add ``rec`` and return the records evicted to respect the cap."""
        self._check(rec)
        self.members.append(rec)
        evicted: list[AgentRecord] = []
        if self.descriptor is not None:
            cell = self.descriptor(rec)
            rivals = [m for m in self.members if m is not rec and self.descriptor(m) == cell]
            if rivals:
                evicted.append(self._evict_weakest(rivals + [rec], newcomer=rec))
        while len(self.members) > self.capacity:
            evicted.append(self._evict_weakest(self.members, newcomer=rec))
        return evicted

    def _evict_weakest(self, pool: list[AgentRecord], newcomer: AgentRecord) -> AgentRecord:
        position = {id(m): i for i, m in enumerate(self.members)}
        ordered = sorted(pool, key=lambda m: _weakness_key(m, position[id(m)]))
        victim = ordered[0]
        if victim is newcomer and len(ordered) > 1 and ordered[1].score == newcomer.score:
            # the newcomer only goes if it is strictly the unique lowest
            victim = ordered[1]
        self.members.remove(victim)
        return victim

    def best(self) -> AgentRecord:
        if not self.members:
            raise PopulationError("best() of an empty population")
        position = {id(m): i for i, m in enumerate(self.members)}
        return min(
            self.members,
            key=lambda m: (-m.score, m.created_at_iteration, m.id, position[id(m)]),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "capacity": self.capacity,
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict, descriptor: Optional[Descriptor] = None) -> "Population":
        return cls(
            Kind(d["kind"]),
            int(d["capacity"]),
            [AgentRecord.from_dict(m) for m in d["members"]],
            descriptor=descriptor,
        )
