"""Task evaluation: run a task agent, validate its construction, score it.

Constructions travel as one JSON document, e.g.
``{"task": "cp", "circles": [[x, y, r], ...]}``; kissing-number sets use
``"vectors"`` and Heilbronn sets use ``"points"``.
"""

from __future__ import annotations

import enum
import functools
import itertools
import json
import math
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

SQRT3 = math.sqrt(3.0)
TRIANGLE_VERTICES = ((0.0, 0.0), (1.0, 0.0), (0.5, SQRT3 / 2.0))
TRIANGLE_AREA = SQRT3 / 4.0


class Task(str, enum.Enum):
    KN = "kn"
    CP = "cp"
    HT = "ht"


@dataclass(frozen=True)
class KNVectors:
    vectors: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class CPCircles:
    circles: tuple[tuple[float, float, float], ...]


@dataclass(frozen=True)
class HTPoints:
    points: tuple[tuple[float, float], ...]


Construction = Union[KNVectors, CPCircles, HTPoints]

_KEYS = {Task.KN: "vectors", Task.CP: "circles", Task.HT: "points"}
_VARIANTS = {Task.KN: KNVectors, Task.CP: CPCircles, Task.HT: HTPoints}


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    size: int
    s_ref: float
    exec_timeout: float = 120.0
    tolerance: float = 1e-9
    memory_mb: int = 2048

    def __post_init__(self):
        if not self.s_ref > 0:
            raise ValueError("s_ref must be positive")


def task_spec(task: Union[Task, str], **overrides) -> TaskSpec:
    """Default spec per task: KN in d=11, CP with 26 circles, HT with 11 points."""
    task = Task(task)
    base = {
        Task.KN: dict(size=11, s_ref=593.0),
        Task.CP: dict(size=26, s_ref=2.6350),
        Task.HT: dict(size=11, s_ref=0.036529889880030156),
    }[task]
    base.update(overrides)
    return TaskSpec(task=task, **base)


@dataclass
class EvalResult:
    valid: bool
    s_raw: float
    s_norm: float
    violation: Optional[str] = None
    exec_tokens_equivalent: float = 0.0
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


class ConstructionError(ValueError):
    pass


def _invalid(reason: str) -> EvalResult:
    return EvalResult(valid=False, s_raw=0.0, s_norm=0.0, violation=reason)


def _valid(s_raw: float, spec: TaskSpec) -> EvalResult:
    return EvalResult(valid=True, s_raw=float(s_raw), s_norm=float(s_raw) / spec.s_ref)


# -- wire format ------------------------------------------------------------


def parse_construction(doc: Union[str, dict], task: Optional[Union[Task, str]] = None) -> Construction:
    """Parse a construction document; ``task`` disambiguates docs without a tag."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ConstructionError(f"malformed construction: {exc}") from None
    if not isinstance(doc, dict):
        raise ConstructionError("construction must be a JSON object")
    tag = doc.get("task", task.value if isinstance(task, Task) else task)
    if tag is None:
        found = [t for t, k in _KEYS.items() if k in doc]
        if len(found) != 1:
            raise ConstructionError("cannot infer task of construction")
        tag = found[0]
    try:
        t = Task(tag)
    except ValueError:
        raise ConstructionError(f"unknown task {tag!r}") from None
    if task is not None and Task(task) != t:
        raise ConstructionError(f"construction is for {t.value}, expected {Task(task).value}")
    items = doc.get(_KEYS[t])
    if not isinstance(items, list):
        raise ConstructionError(f"missing list {_KEYS[t]!r}")
    try:
        if t is Task.KN:
            vecs = []
            for v in items:
                if not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
                    raise ConstructionError("kissing-number vectors must be integer lists")
                vecs.append(tuple(v))
            return KNVectors(tuple(vecs))
        width = 3 if t is Task.CP else 2
        rows = []
        for row in items:
            if len(row) != width or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in row):
                raise ConstructionError(f"each entry needs {width} numbers")
            rows.append(tuple(float(x) for x in row))
        return _VARIANTS[t](tuple(rows))
    except TypeError:
        raise ConstructionError("malformed construction entries") from None


def dump_construction(c: Construction) -> str:
    if isinstance(c, KNVectors):
        return json.dumps({"task": "kn", "vectors": [list(v) for v in c.vectors]}, separators=(",", ":"))
    if isinstance(c, CPCircles):
        return json.dumps({"task": "cp", "circles": [list(v) for v in c.circles]}, separators=(",", ":"))
    return json.dumps({"task": "ht", "points": [list(v) for v in c.points]}, separators=(",", ":"))


# -- checkers -----------------------------------------------------------------


def eval_kn(c: Construction, spec: TaskSpec) -> EvalResult:
    if not isinstance(c, KNVectors):
        return _invalid("expected integer vectors")
    d = spec.size
    for v in c.vectors:
        if len(v) != d:
            return _invalid(f"wrong dimension: vector of length {len(v)}, expected {d}")
    # python ints first: large entries would overflow int64 squares
    norms = [sum(x * x for x in v) for v in c.vectors]
    for i, n2 in enumerate(norms):
        if n2 == 0:
            return _invalid(f"vector {i} is zero")
        if n2 > 4:
            return _invalid(f"vector {i} has squared norm {n2} > 4")
    if len(c.vectors) > 1:
        X = np.asarray(c.vectors, dtype=np.int64)
        sq = np.asarray(norms, dtype=np.int64)
        D = sq[:, None] + sq[None, :] - 2 * (X @ X.T)
        np.fill_diagonal(D, 4)
        if D.min() < 4:
            i, j = np.unravel_index(int(np.argmin(D)), D.shape)
            i, j = sorted((int(i), int(j)))
            if D[i, j] == 0:
                return _invalid(f"duplicate vectors {i} and {j}")
            return _invalid(f"vectors {i} and {j} have squared distance {int(D[i, j])} < 4")
    return _valid(len(c.vectors), spec)


def eval_cp(c: Construction, spec: TaskSpec) -> EvalResult:
    if not isinstance(c, CPCircles):
        return _invalid("expected circles")
    if len(c.circles) != spec.size:
        return _invalid(f"wrong cardinality: {len(c.circles)} circles, expected {spec.size}")
    A = np.asarray(c.circles, dtype=float)
    if not np.all(np.isfinite(A)):
        return _invalid("non-finite circle data")
    x, y, r = A[:, 0], A[:, 1], A[:, 2]
    tol = spec.tolerance
    bad = np.flatnonzero(r <= 0)
    if bad.size:
        return _invalid(f"circle {bad[0]} has non-positive radius")
    out = (x < r - tol) | (x > 1 - r + tol) | (y < r - tol) | (y > 1 - r + tol)
    if out.any():
        return _invalid(f"circle {int(np.flatnonzero(out)[0])} leaves the unit square")
    dist = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
    gap = dist - (r[:, None] + r[None, :])
    iu = np.triu_indices(len(r), 1)
    overlap = gap[iu] < -tol
    if overlap.any():
        k = int(np.flatnonzero(overlap)[0])
        return _invalid(f"circles {int(iu[0][k])} and {int(iu[1][k])} overlap")
    return _valid(math.fsum(r.tolist()), spec)


def barycentric(points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of each point w.r.t. the unit equilateral triangle."""
    x, y = points[:, 0], points[:, 1]
    l3 = 2.0 * y / SQRT3
    l2 = x - 0.5 * l3
    l1 = 1.0 - l2 - l3
    return np.stack([l1, l2, l3], axis=1)


@functools.lru_cache(maxsize=8)
def _triples(n: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(n), 3)))


def min_triangle_area(points: np.ndarray) -> float:
    n = len(points)
    if n < 3:
        return 0.0
    idx = _triples(n)
    p, q, s = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    cross = (q[:, 0] - p[:, 0]) * (s[:, 1] - p[:, 1]) - (s[:, 0] - p[:, 0]) * (q[:, 1] - p[:, 1])
    return float(np.min(np.abs(cross)) / 2.0)


def eval_ht(c: Construction, spec: TaskSpec) -> EvalResult:
    """Score is the smallest triangle area as a fraction of the container's area."""
    if not isinstance(c, HTPoints):
        return _invalid("expected points")
    if len(c.points) != spec.size:
        return _invalid(f"wrong cardinality: {len(c.points)} points, expected {spec.size}")
    P = np.asarray(c.points, dtype=float)
    if not np.all(np.isfinite(P)):
        return _invalid("non-finite point coordinates")
    outside = (barycentric(P) < -spec.tolerance).any(axis=1)
    if outside.any():
        return _invalid(f"point {int(np.flatnonzero(outside)[0])} lies outside the triangle")
    return _valid(min_triangle_area(P) / TRIANGLE_AREA, spec)


_CHECKERS = {Task.KN: eval_kn, Task.CP: eval_cp, Task.HT: eval_ht}


def evaluate_construction(c: Construction, spec: TaskSpec) -> EvalResult:
    return _CHECKERS[spec.task](c, spec)


# -- execution ----------------------------------------------------------------


class ExecutionError(RuntimeError):
    pass


def is_literal(payload: str) -> bool:
    s = payload.lstrip()
    if not s.startswith("{"):
        return False
    try:
        return isinstance(json.loads(s), dict)
    except json.JSONDecodeError:
        return False


def _limit_resources(memory_mb: int):
    def apply():
        import resource

        limit = memory_mb * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        os.setsid()

    return apply


def _sandbox_env() -> dict:
    keep = {"PATH", "LANG", "LC_ALL", "HOME", "TMPDIR"}
    env = {k: v for k, v in os.environ.items() if k in keep}
    # blackhole proxies so library-level HTTP clients fail fast
    env.update(http_proxy="http://127.0.0.1:9", https_proxy="http://127.0.0.1:9", no_proxy="")
    env["PYTHONHASHSEED"] = "0"
    return env


def _last_json_object(stdout: str) -> Optional[str]:
    text = stdout.strip()
    if not text:
        return None
    if is_literal(text):
        return text
    for line in reversed(text.splitlines()):
        if is_literal(line):
            return line
    return None


def run_task_agent(payload: str, spec: TaskSpec) -> Construction:
    """Turn a payload into a construction.

    Literal JSON documents are parsed directly. Anything else is treated as a
    Python program, run in a fresh interpreter under a wall-clock timeout and
    an address-space cap; it must print one construction document to stdout.
    """
    if is_literal(payload):
        return parse_construction(payload, spec.task)
    with tempfile.TemporaryDirectory(prefix="escher_task_") as tmp:
        path = os.path.join(tmp, "agent.py")
        with open(path, "w") as f:
            f.write(payload)
        proc = subprocess.Popen(
            [sys.executable, "-I", path],
            cwd=tmp,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            env=_sandbox_env(),
            preexec_fn=_limit_resources(spec.memory_mb),
        )
        try:
            stdout, stderr = proc.communicate(timeout=spec.exec_timeout)
        except subprocess.TimeoutExpired:
            # the child leads its own session, so this also reaps anything it spawned
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.communicate()
            raise ExecutionError("timeout") from None
    if proc.returncode != 0:
        tail = stderr.strip().splitlines()[-1:] or [""]
        raise ExecutionError(f"nonzero exit {proc.returncode}: {tail[0][:200]}")
    doc = _last_json_object(stdout)
    if doc is None:
        raise ExecutionError("no construction emitted")
    return parse_construction(doc, spec.task)


def evaluate(payload: str, spec: TaskSpec) -> tuple[EvalResult, Optional[Construction]]:
    """Full evaluation function f: execute, validate, score."""
    t0 = time.perf_counter()
    try:
        c = run_task_agent(payload, spec)
    except (ExecutionError, ConstructionError) as exc:
        res = _invalid(str(exc))
        res.wall_time = time.perf_counter() - t0
        return res, None
    res = evaluate_construction(c, spec)
    res.wall_time = time.perf_counter() - t0
    return res, c
