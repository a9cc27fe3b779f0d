"""Closed-loop co-evolution of task agents and optimizer agents.

One iteration samples a cohort of optimizers and a shared set of task
parents, lets every cohort member produce and evaluate one task agent,
turns those same scores into pairwise Elo updates, and then lets a lead
optimizer rewrite a subset of the optimizer population.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .backends import Backend, BackendConfig, GenerationError, GenerationRequest, GenerationResult
from .evaluators import Construction, EvalResult, TaskSpec, dump_construction, evaluate
from .population import AgentRecord, Kind, Population, default_descriptor
from .rating import INITIAL_RATING, EloLedger, elo_update, initialize_offspring_rating, pairwise_competition
from .sampling import DEFAULT_TEMPERATURES, Role, SamplerConfig, sample_indices, sample_subset

log = logging.getLogger(__name__)

LOG_NAME = "run.jsonl"
Evaluator = Callable[[str, TaskSpec], "tuple[EvalResult, Optional[Construction]]"]


@dataclass
class BudgetLedger:
    tokens_in_total: int = 0
    tokens_out_total: int = 0
    budget_eq: float = 10_000_000.0

    @property
    def equivalent(self) -> float:
        # input tokens are priced at a quarter of output tokens
        return self.tokens_out_total + 0.25 * self.tokens_in_total

    @property
    def exhausted(self) -> bool:
        return self.equivalent >= self.budget_eq

    def charge(self, tokens_in: int, tokens_out: int) -> None:
        if tokens_in < 0 or tokens_out < 0:
            raise ValueError("negative token charge")
        self.tokens_in_total += int(tokens_in)
        self.tokens_out_total += int(tokens_out)


@dataclass
class LoopConfig:
    cohort_size: int = 4
    task_parent_count: int = 3
    meta_subset_size: int = 3
    meta_every: int = 1
    draw_tol: float = 1e-9
    temperatures: dict = field(default_factory=lambda: {r.value: t for r, t in DEFAULT_TEMPERATURES.items()})
    task_capacity: int = 200
    optimizer_capacity: int = 50
    budget: float = 10_000_000.0
    max_iterations: Optional[int] = None
    checkpoint_every: int = 20
    k_factor: float = 32.0
    initial_rating: float = INITIAL_RATING
    workers: int = 1
    map_elites: bool = False

    def __post_init__(self):
        if self.cohort_size < 2:
            raise ValueError("cohort_size must be at least 2 for pairwise competition")
        if self.meta_subset_size < 1:
            raise ValueError("meta_subset_size must be at least 1")
        if self.task_parent_count < 1:
            raise ValueError("task_parent_count must be at least 1")
        if self.meta_every < 0 or self.checkpoint_every < 0:
            raise ValueError("schedules must be non-negative (0 disables)")

    def sampler(self, role: Role) -> SamplerConfig:
        return SamplerConfig(role, float(self.temperatures.get(role.value, DEFAULT_TEMPERATURES[role])))


@dataclass
class RunState:
    iteration: int
    task_pop: Population
    opt_pop: Population
    ledger: EloLedger
    budget: BudgetLedger
    rng: np.random.Generator
    config_digest: str = ""
    next_task: int = 0
    next_opt: int = 0
    evaluations: int = 0
    best: dict = field(default_factory=dict)

    def new_id(self, kind: Kind) -> str:
        if kind is Kind.TASK:
            self.next_task += 1
            return f"t{self.next_task:06d}"
        self.next_opt += 1
        return f"o{self.next_opt:06d}"


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class RunLog:
    """Append-only JSONL event sink; ``path=None`` keeps events in memory."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.events: list[dict] = []

    def emit(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.events.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def truncate_after(self, iteration: int) -> None:
        """Drop events past ``iteration`` so a resumed run does not duplicate them."""
        if self.path is None or not self.path.exists():
            return
        kept = [ln for ln in self.path.read_text().splitlines() if ln.strip() and json.loads(ln).get("iter", 0) <= iteration]
        self.path.write_text("".join(ln + "\n" for ln in kept))


class Engine:
    def __init__(
        self,
        spec: TaskSpec,
        backend: Backend,
        cfg: LoopConfig,
        backend_cfg: Optional[BackendConfig] = None,
        run_dir: Optional[Path] = None,
        evaluator: Evaluator = evaluate,
        config: Optional[dict] = None,
    ):
        self.spec = spec
        self.backend = backend
        self.cfg = cfg
        self.backend_cfg = backend_cfg or BackendConfig()
        self.run_dir = Path(run_dir) if run_dir else None
        self.evaluator = evaluator
        self.config = config or {}
        self.digest = config_digest(self.config)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log = RunLog(self.run_dir / LOG_NAME if self.run_dir else None)
        self.descriptor = default_descriptor if cfg.map_elites else None

    # -- setup ----------------------------------------------------------------

    def _evaluate(self, state: RunState, payload: str) -> tuple[EvalResult, Optional[Construction]]:
        state.evaluations += 1
        return self.evaluator(payload, self.spec)

    def _record_best(self, state: RunState, rec: AgentRecord, res: EvalResult, c) -> None:
        if not res.valid:
            return
        if state.best and res.s_norm <= state.best["s_norm"]:
            return
        state.best = {
            "id": rec.id,
            "payload": rec.payload,
            "construction": json.loads(dump_construction(c)) if c is not None else None,
            "s_raw": res.s_raw,
            "s_norm": res.s_norm,
        }

    def initialize(self, task_payloads: list[str], optimizer_payloads: list[str], seed: int) -> RunState:
        """Evaluate seed task agents and rate seed optimizers at the initial Elo."""
        if not task_payloads or not optimizer_payloads:
            raise ValueError("both seed populations must be non-empty")
        state = RunState(
            iteration=0,
            task_pop=Population(Kind.TASK, self.cfg.task_capacity),
            opt_pop=Population(Kind.OPTIMIZER, self.cfg.optimizer_capacity, descriptor=self.descriptor),
            ledger=EloLedger(k_factor=self.cfg.k_factor),
            budget=BudgetLedger(budget_eq=self.cfg.budget),
            rng=np.random.default_rng(seed),
            config_digest=self.digest,
        )
        for payload in task_payloads:
            res, c = self._evaluate(state, payload)
            rec = AgentRecord(state.new_id(Kind.TASK), Kind.TASK, payload, res.s_norm)
            state.task_pop.insert(rec)
            self._record_best(state, rec, res, c)
            self._log_eval(state, rec, res, None, 0)
        for payload in optimizer_payloads:
            rec = AgentRecord(state.new_id(Kind.OPTIMIZER), Kind.OPTIMIZER, payload, self.cfg.initial_rating)
            for gone in state.opt_pop.insert(rec):
                self.log.emit("evict", iter=0, id=gone.id, kind=gone.kind.value, score=gone.score)
            state.ledger.add(rec.id, self.cfg.initial_rating)
        state.ledger.ratings = {k: v for k, v in state.ledger.ratings.items() if k in state.opt_pop}
        return state

    # -- one iteration --------------------------------------------------------

    def _log_eval(self, state: RunState, rec: AgentRecord, res: EvalResult, operator: Optional[str], it: int) -> None:
        self.log.emit(
            "eval",
            iter=it,
            id=rec.id,
            operator=operator,
            valid=res.valid,
            s_raw=res.s_raw,
            s_norm=res.s_norm,
            violation=res.violation,
            eq_tokens=state.budget.equivalent,
        )

    def _request(self, operator: AgentRecord, parents: list[AgentRecord], kind: Kind) -> GenerationRequest:
        b = self.backend_cfg
        task = kind is Kind.TASK
        return GenerationRequest(
            operator=operator,
            parents=[(p.payload, p.score) for p in parents],
            target_kind=kind,
            temperature=b.task_temperature if task else b.optimizer_temperature,
            max_output_tokens=b.max_output_tokens,
            timeout=b.task_timeout if task else b.optimizer_timeout,
            retries=b.retries,
        )

    def _generate(self, req: GenerationRequest, seed: int):
        try:
            return self.backend.generate(req, np.random.default_rng(seed))
        except GenerationError as exc:
            return exc

    def _charge(self, state: RunState, n: int, operator: str, kind: Kind, out) -> None:
        ok = isinstance(out, GenerationResult)
        state.budget.charge(out.tokens_in, out.tokens_out)
        self.log.emit(
            "gen",
            iter=n,
            operator=operator,
            target=kind.value,
            ok=ok,
            tokens_in=out.tokens_in,
            tokens_out=out.tokens_out,
            backend=out.backend_label if ok else None,
            reason=None if ok else out.reason,
        )

    def run_iteration(self, state: RunState) -> RunState:
        if len(state.task_pop) == 0 or len(state.opt_pop) == 0:
            raise RuntimeError("both populations must be non-empty")
        cfg = self.cfg
        n = state.iteration + 1

        # (1) matchmaking cohort and a shared parent set
        cohort = sample_subset(state.opt_pop, min(cfg.cohort_size, len(state.opt_pop)), cfg.sampler(Role.MATCHMAKING), state.rng)
        parents = sample_subset(state.task_pop, min(cfg.task_parent_count, len(state.task_pop)), cfg.sampler(Role.TASK_PARENT), state.rng)
        seeds = [int(s) for s in state.rng.integers(0, 2**63 - 1, size=len(cohort))]

        # (2) every cohort member optimizes the same parents
        reqs = [self._request(o, parents, Kind.TASK) for o in cohort]

        def work(i: int):
            out = self._generate(reqs[i], seeds[i])
            if isinstance(out, GenerationError):
                return out, None
            return out, self.evaluator(out.payload, self.spec)

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(work, range(len(cohort))))
        else:
            outcomes = [work(i) for i in range(len(cohort))]

        round_scores = []
        for o, (out, evaluated) in zip(cohort, outcomes):
            self._charge(state, n, o.id, Kind.TASK, out)
            if evaluated is None:
                # a failed slot loses to every valid output
                round_scores.append(0.0)
                continue
            state.evaluations += 1
            res, c = evaluated
            rec = AgentRecord(state.new_id(Kind.TASK), Kind.TASK, out.payload, res.s_norm, [p.id for p in parents], n)
            state.task_pop.insert(rec)
            self._record_best(state, rec, res, c)
            self._log_eval(state, rec, res, o.id, n)
            round_scores.append(res.s_norm)

        # (3) reuse the same scores as pairwise outcomes
        if all(isinstance(out, GenerationError) for out, _ in outcomes) or len(cohort) < 2:
            self.log.emit("round", iter=n, void=True, cohort=[o.id for o in cohort])
        else:
            result = pairwise_competition(round_scores, cfg.draw_tol, [o.id for o in cohort])
            elo_update(state.ledger, result, n)
            for o in cohort:
                old = o.score
                o.score = state.ledger.ratings[o.id]
                o.eval_count += 1
                self.log.emit("elo", iter=n, id=o.id, old=old, new=o.score)

        # (4) self-referential step
        if cfg.meta_every and n % cfg.meta_every == 0:
            self._meta_step(state, n)

        state.iteration = n
        self.log.emit(
            "best_so_far",
            iter=n,
            eq_tokens=state.budget.equivalent,
            best_norm=state.best.get("s_norm", 0.0),
            best_id=state.best.get("id"),
        )
        if cfg.checkpoint_every and n % cfg.checkpoint_every == 0 and self.run_dir is not None:
            path = save_checkpoint(state, self.run_dir, self.config)
            self.log.emit("checkpoint", iter=n, path=path.name)
        return state

    def _meta_step(self, state: RunState, n: int) -> None:
        k = min(1 + self.cfg.meta_subset_size, len(state.opt_pop))
        drawn = sample_subset(state.opt_pop, k, self.cfg.sampler(Role.MENTORING), state.rng)
        lead, subset = drawn[0], drawn[1:] or drawn[:1]
        seed = int(state.rng.integers(0, 2**63 - 1))
        out = self._generate(self._request(lead, subset, Kind.OPTIMIZER), seed)
        self._charge(state, n, lead.id, Kind.OPTIMIZER, out)
        if isinstance(out, GenerationError):
            return
        rating = initialize_offspring_rating([o.score for o in subset])
        rec = AgentRecord(state.new_id(Kind.OPTIMIZER), Kind.OPTIMIZER, out.payload, rating, [lead.id] + [o.id for o in subset], n)
        evicted = state.opt_pop.insert(rec)
        state.ledger.add(rec.id, rating)
        self.log.emit("meta", iter=n, id=rec.id, lead=lead.id, parents=[o.id for o in subset], rating=rating)
        for gone in evicted:
            # evicted ratings survive only in the log
            state.ledger.ratings.pop(gone.id, None)
            self.log.emit("evict", iter=n, id=gone.id, kind=gone.kind.value, score=gone.score)

    # -- driver -----------------------------------------------------------------

    def run(self, state: RunState) -> RunState:
        """Iterate until the token budget or ``max_iterations`` is reached."""
        limit = self.cfg.max_iterations
        while not state.budget.exhausted and (limit is None or state.iteration < limit):
            self.run_iteration(state)
        return state


def summary(state: RunState, spec: TaskSpec) -> dict:
    best = state.best or {}
    return {
        "task": spec.task.value,
        "iterations": state.iteration,
        "best_agent": {"id": best.get("id"), "payload": best.get("payload")},
        "best_construction": best.get("construction"),
        "s_raw": best.get("s_raw", 0.0),
        "s_norm": best.get("s_norm", 0.0),
        "equivalent_tokens": state.budget.equivalent,
        "tokens_in": state.budget.tokens_in_total,
        "tokens_out": state.budget.tokens_out_total,
        "evaluations": state.evaluations,
    }


# -- checkpoints ------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def save_checkpoint(state: RunState, run_dir: Path, config: Optional[dict] = None) -> Path:
    """Write ``ckpt_<iter>/`` atomically (temp dir, then rename)."""
    run_dir = Path(run_dir)
    final = run_dir / f"ckpt_{state.iteration}"
    tmp = Path(tempfile.mkdtemp(prefix=f".ckpt_{state.iteration}_", dir=run_dir))
    try:
        _write_json(tmp / "task_pop.json", state.task_pop.to_dict())
        _write_json(tmp / "opt_pop.json", state.opt_pop.to_dict())
        _write_json(tmp / "ledger.json", state.ledger.to_dict())
        _write_json(tmp / "budget.json", asdict(state.budget))
        _write_json(tmp / "rng.json", state.rng.bit_generator.state)
        _write_json(
            tmp / "manifest.json",
            {
                "iteration": state.iteration,
                "config_digest": state.config_digest,
                "config": config or {},
                "best_norm": state.best.get("s_norm", 0.0),
                "counters": {"next_task": state.next_task, "next_opt": state.next_opt, "evaluations": state.evaluations},
                "best": state.best,
            },
        )
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return final


def read_manifest(ckpt_dir: Path) -> dict:
    return json.loads((Path(ckpt_dir) / "manifest.json").read_text())


def load_checkpoint(ckpt_dir: Path, map_elites: bool = False) -> RunState:
    ckpt_dir = Path(ckpt_dir)
    man = read_manifest(ckpt_dir)
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads((ckpt_dir / "rng.json").read_text())
    counters = man["counters"]
    return RunState(
        iteration=int(man["iteration"]),
        task_pop=Population.from_dict(json.loads((ckpt_dir / "task_pop.json").read_text())),
        opt_pop=Population.from_dict(
            json.loads((ckpt_dir / "opt_pop.json").read_text()),
            descriptor=default_descriptor if map_elites else None,
        ),
        ledger=EloLedger.from_dict(json.loads((ckpt_dir / "ledger.json").read_text())),
        budget=BudgetLedger(**json.loads((ckpt_dir / "budget.json").read_text())),
        rng=rng,
        config_digest=man["config_digest"],
        next_task=int(counters["next_task"]),
        next_opt=int(counters["next_opt"]),
        evaluations=int(counters["evaluations"]),
        best=man.get("best", {}),
    )


def list_checkpoints(run_dir: Path) -> list[Path]:
    found = [p for p in Path(run_dir).glob("ckpt_*") if p.is_dir() and p.name[5:].isdigit()]
    return sorted(found, key=lambda p: int(p.name[5:]))


def select_checkpoint(run_dir: Path, how: str = "latest", rng: Optional[np.random.Generator] = None, temperature: float = 1.2) -> Path:
    """Pick a checkpoint: the latest one, or a rank-softmax draw over best scores."""
    ckpts = list_checkpoints(run_dir)
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    if how == "latest":
        return ckpts[-1]
    if how != "best":
        raise ValueError(f"unknown checkpoint selection {how!r}")
    # later checkpoints first so ties favour fresher states
    ckpts = ckpts[::-1]
    scores = [float(read_manifest(p).get("best_norm", 0.0)) for p in ckpts]
    rng = rng or np.random.default_rng()
    return ckpts[sample_indices(scores, 1, temperature, rng)[0]]
