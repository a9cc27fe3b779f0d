"""Generation backends: an optimizer agent turns scored parents into a new agent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ..population import AgentRecord, Kind


@dataclass
class GenerationRequest:
    operator: AgentRecord
    parents: list[tuple[str, float]]
    target_kind: Kind
    temperature: float = 0.7
    max_output_tokens: int = 60000
    timeout: float = 700.0
    retries: int = 3

    def __post_init__(self):
        if not self.parents:
            raise ValueError("generation needs at least one parent")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class GenerationResult:
    payload: str
    tokens_in: int
    tokens_out: int
    backend_label: str

    def __post_init__(self):
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be non-negative")


class GenerationError(RuntimeError):
    """Generation failed; tokens already spent are still reported for charging.

    ``operator_fault`` marks failures caused by the operator payload itself
    (as opposed to transport problems).
    """

    def __init__(self, reason: str, tokens_in: int = 0, tokens_out: int = 0, operator_fault: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.tokens_in = tokens_in
        self.tokens_out = tokens_out
        self.operator_fault = operator_fault


class BackendConfigError(ValueError):
    pass


@dataclass
class EndpointProfile:
    name: str
    base_url: str = ""
    model: str = ""
    weight: float = 1.0
    # forwarded verbatim into the request body (e.g. provider thinking levels)
    options: dict = field(default_factory=dict)


@dataclass
class BackendConfig:
    mode: str = "scripted"
    profiles: list[EndpointProfile] = field(default_factory=list)
    task_temperature: float = 0.7
    optimizer_temperature: float = 1.0
    task_timeout: float = 700.0
    optimizer_timeout: float = 1200.0
    retries: int = 3
    max_output_tokens: int = 60000
    api_key_env: str = "ESCHER_API_KEY"

    def validate(self) -> None:
        if self.mode not in ("scripted", "remote"):
            raise BackendConfigError(f"unknown backend mode {self.mode!r}")
        if self.mode == "remote":
            if not self.profiles:
                raise BackendConfigError("remote mode needs at least one endpoint profile")
            total = sum(p.weight for p in self.profiles)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise BackendConfigError(f"routing weights sum to {total}, expected 1")
            if any(p.weight < 0 for p in self.profiles):
                raise BackendConfigError("routing weights must be non-negative")
        if self.retries < 0:
            raise BackendConfigError("retries must be non-negative")


def synthetic_tokens(text: str) -> int:
    return -(-len(text) // 4)


class Backend(Protocol):
    label: str

    def generate(self, req: GenerationRequest, rng: np.random.Generator) -> GenerationResult: ...


def make_backend(cfg: BackendConfig, client=None) -> Backend:
    cfg.validate()
    if cfg.mode == "scripted":
        from .scripted import ScriptedBackend

        return ScriptedBackend()
    from .remote import RemoteChatBackend

    return RemoteChatBackend(cfg, client=client)


def generate(req: GenerationRequest, cfg: BackendConfig, rng: np.random.Generator, client=None) -> GenerationResult:
    return make_backend(cfg, client=client).generate(req, rng)


__all__ = [
    "Backend",
    "BackendConfig",
    "BackendConfigError",
    "EndpointProfile",
    "GenerationError",
    "GenerationRequest",
    "GenerationResult",
    "generate",
    "make_backend",
    "synthetic_tokens",
]
