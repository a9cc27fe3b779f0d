"""Run configuration: TOML file, CLI overrides, built-in seed populations."""

from __future__ import annotations

import json
import secrets
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backends import BackendConfig, EndpointProfile
from .engine import LoopConfig
from .evaluators import Task, TaskSpec, task_spec

SEED_DIR = Path(__file__).parent / "seeds"

# keys that steer a run without changing what it computes
RUN_CONTROL_KEYS = ("out_dir", "max_iterations", "budget")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: Task
    seed: int
    out_dir: Path
    budget: float
    max_iterations: Optional[int]
    task_seeds: list[str]
    optimizer_seeds: list[str]
    backend: BackendConfig
    loop: LoopConfig
    spec: TaskSpec
    raw: dict = field(default_factory=dict)

    def digest_source(self) -> dict:
        return {k: v for k, v in self.raw.items() if k not in RUN_CONTROL_KEYS}


def _read_payloads(paths: list[str], base: Path) -> list[str]:
    out = []
    for p in paths:
        path = Path(p)
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise ConfigError(f"seed file not found: {path}")
        out.append(path.read_text())
    return out


def _program_wrapping(literal: str) -> str:
    return "import json\n\nprint(json.dumps(" + repr(json.loads(literal)) + "))\n"


def default_task_seeds(task: Task, mode: str) -> list[str]:
    literal = (SEED_DIR / f"{task.value}_seed.json").read_text().strip()
    return [literal if mode == "scripted" else _program_wrapping(literal)]


def default_optimizer_seeds(mode: str) -> list[str]:
    if mode == "scripted":
        return json.loads((SEED_DIR / "scripted_optimizers.json").read_text())
    return [(SEED_DIR / "task_prompt.txt").read_text(), (SEED_DIR / "optimizer_prompt.txt").read_text()]


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, dict):
            merged = _merge(out.get(k) if isinstance(out.get(k), dict) else {}, v)
            if merged:
                out[k] = merged
        else:
            out[k] = v
    return out


def load_raw(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None


def build(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a raw config mapping and resolve seeds, specs and sub-configs."""
    raw = dict(raw)
    try:
        task = Task(raw.get("task", "cp"))
    except ValueError:
        raise ConfigError(f"unknown task {raw.get('task')!r}") from None
    seed = raw.get("seed", 0)
    if seed == "entropy":
        seed = secrets.randbits(63)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer or \"entropy\"")
    raw["seed"] = seed
    budget = float(raw.get("budget", 10_000_000))
    if not budget > 0:
        raise ConfigError("budget must be positive")
    raw["budget"] = budget
    max_it = raw.get("max_iterations")

    b = dict(raw.get("backend", {}))
    profiles = [EndpointProfile(**p) for p in b.pop("profiles", [])]
    try:
        backend = BackendConfig(profiles=profiles, **b)
        backend.validate()
    except TypeError as exc:
        raise ConfigError(f"bad [backend] section: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    loop_kw = dict(raw.get("loop", {}))
    temps = dict(raw.get("temperatures", {}))
    try:
        loop = LoopConfig(budget=budget, max_iterations=max_it, **loop_kw)
        unknown = set(temps) - set(loop.temperatures)
        if unknown:
            raise ValueError(f"unknown sampler roles {sorted(unknown)}")
        loop.temperatures.update({k: float(v) for k, v in temps.items()})
        for role in loop.temperatures:
            if not loop.temperatures[role] > 0:
                raise ValueError(f"temperature for {role} must be positive")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [loop]/[temperatures] section: {exc}") from None

    ev = raw.get("evaluation", {})
    spec = task_spec(
        task,
        exec_timeout=float(ev.get("timeout", 120.0)),
        tolerance=float(ev.get("tolerance", 1e-9)),
        memory_mb=int(ev.get("memory_mb", 2048)),
    )

    seeds = raw.get("seeds", {})
    tasks = _read_payloads(seeds["tasks"], base_dir) if seeds.get("tasks") else default_task_seeds(task, backend.mode)
    opts = _read_payloads(seeds["optimizers"], base_dir) if seeds.get("optimizers") else default_optimizer_seeds(backend.mode)

    return RunConfig(
        task=task,
        seed=seed,
        out_dir=Path(raw.get("out_dir", f"runs/{task.value}")),
        budget=budget,
        max_iterations=max_it,
        task_seeds=tasks,
        optimizer_seeds=opts,
        backend=backend,
        loop=loop,
        spec=spec,
        raw=raw,
    )


def overrides_from_flags(**flags: Any) -> dict:
    """Map CLI flags onto the config-file layout."""
    loop = {k: flags.get(k) for k in ("cohort_size", "meta_every", "checkpoint_every", "workers")}
    return {
        "task": flags.get("task"),
        "seed": flags.get("seed"),
        "budget": flags.get("budget"),
        "out_dir": flags.get("out"),
        "max_iterations": flags.get("max_iterations"),
        "backend": {"mode": flags.get("backend")},
        "loop": loop,
    }


def load(path: Optional[Path], **flags: Any) -> RunConfig:
    raw = _merge(load_raw(path), overrides_from_flags(**flags))
    return build(raw, base_dir=Path(path).parent if path else Path("."))
