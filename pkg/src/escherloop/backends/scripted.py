"""Deterministic, model-free generation backend.

Optimizer payloads are small strategy documents::

    {"op": "gaussian-perturb", "sigma": 0.01, "restart_p": 0.05,
     "meta_op": "meta-jitter", "meta_sigma": 0.3}

Applied to task parents, the strategy perturbs the best-scored parent's
construction (or, with probability ``restart_p``, a uniformly chosen parent)
and repairs it back into the feasible set. Applied to optimizer parents, the
acting strategy's ``meta_op`` rewrites the best-rated parent's parameters.
"""

from __future__ import annotations

import json
import math

import numpy as np

from ..evaluators import (
    SQRT3,
    ConstructionError,
    CPCircles,
    HTPoints,
    KNVectors,
    barycentric,
    dump_construction,
    parse_construction,
)
from ..population import Kind
from . import GenerationError, GenerationRequest, GenerationResult, synthetic_tokens

TASK_OPS = ("gaussian-perturb",)
META_OPS = ("meta-scale", "meta-jitter", None)
SIGMA_BOUNDS = (1e-6, 1.0)
CENTER_MARGIN = 1e-3


def parse_strategy(payload: str) -> dict:
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError:
        raise GenerationError("operator payload is not a strategy document", operator_fault=True) from None
    if not isinstance(doc, dict) or doc.get("op") not in TASK_OPS:
        raise GenerationError(f"unknown strategy op {doc.get('op') if isinstance(doc, dict) else doc!r}", operator_fault=True)
    sigma = doc.get("sigma")
    if not isinstance(sigma, (int, float)) or not sigma > 0 or not math.isfinite(sigma):
        raise GenerationError("strategy sigma must be a positive number", operator_fault=True)
    restart_p = doc.get("restart_p", 0.0)
    if not isinstance(restart_p, (int, float)) or not 0.0 <= restart_p <= 1.0:
        raise GenerationError("restart_p must lie in [0, 1]", operator_fault=True)
    if doc.get("meta_op") not in META_OPS:
        raise GenerationError(f"unknown meta op {doc.get('meta_op')!r}", operator_fault=True)
    return doc


def dump_strategy(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _pick_base(parents, restart_p: float, rng: np.random.Generator) -> str:
    if len(parents) > 1 and rng.random() < restart_p:
        return parents[int(rng.integers(len(parents)))][0]
    best = max(range(len(parents)), key=lambda i: (parents[i][1], -i))
    return parents[best][0]


# -- construction moves ---------------------------------------------------------


def repair_circles(xy: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Largest uniform-per-circle shrink that removes wall and pair violations."""
    xy = np.clip(xy, 0.0, 1.0)
    r = np.maximum(r, 0.0)
    wall = np.minimum(np.minimum(xy[:, 0], 1 - xy[:, 0]), np.minimum(xy[:, 1], 1 - xy[:, 1]))
    r = np.minimum(r, wall)
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    s = r[:, None] + r[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, d / s, np.inf)
    np.fill_diagonal(ratio, np.inf)
    # scaling each radius by its own worst ratio makes every pair feasible
    r = r * np.minimum(1.0, ratio.min(axis=1))
    return r


def grow_circles(xy: np.ndarray, r: np.ndarray, order: np.ndarray) -> np.ndarray:
    r = r.copy()
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    np.fill_diagonal(d, np.inf)
    for i in order:
        wall = min(xy[i, 0], 1 - xy[i, 0], xy[i, 1], 1 - xy[i, 1])
        r[i] = max(0.0, min(wall, float(np.min(d[i] - r))))
    return r


def mutate_circles(c: CPCircles, sigma: float, rng: np.random.Generator) -> CPCircles:
    A = np.asarray(c.circles, dtype=float)
    xy = A[:, :2] + rng.normal(0.0, sigma, size=(len(A), 2))
    r = A[:, 2] * np.exp(rng.normal(0.0, sigma, size=len(A)))
    # a center on the wall would force a zero radius
    xy = np.clip(xy, CENTER_MARGIN, 1.0 - CENTER_MARGIN)
    r = repair_circles(xy, r)
    r = grow_circles(xy, r, rng.permutation(len(A)))
    # stay a hair inside every constraint
    r = np.maximum(r * (1 - 1e-12) - 1e-13, 0.0)
    return CPCircles(tuple((float(x), float(y), float(rr)) for (x, y), rr in zip(xy, r)))


def project_to_triangle(P: np.ndarray) -> np.ndarray:
    lam = np.clip(barycentric(P), 0.0, None)
    lam = lam / lam.sum(axis=1, keepdims=True)
    return np.stack([lam[:, 1] + 0.5 * lam[:, 2], lam[:, 2] * SQRT3 / 2], axis=1)


def mutate_points(c: HTPoints, sigma: float, rng: np.random.Generator) -> HTPoints:
    P = np.asarray(c.points, dtype=float)
    P = project_to_triangle(P + rng.normal(0.0, sigma, size=P.shape))
    return HTPoints(tuple((float(x), float(y)) for x, y in P))


def _random_shell_vector(d: int, rng: np.random.Generator) -> tuple[int, ...]:
    v = np.zeros(d, dtype=int)
    if rng.random() < 0.05:
        v[int(rng.integers(d))] = 2 if rng.random() < 0.5 else -2
    else:
        idx = rng.choice(d, size=4, replace=False)
        v[idx] = rng.choice([-1, 1], size=4)
    return tuple(int(x) for x in v)


def mutate_vectors(c: KNVectors, sigma: float, rng: np.random.Generator, d: int = 11, attempts: int = 64) -> KNVectors:
    vecs = [tuple(v) for v in c.vectors]
    if vecs:
        d = len(vecs[0])
        drop = int(rng.binomial(len(vecs), min(sigma, 1.0)))
        keep = rng.permutation(len(vecs))[drop:]
        vecs = [vecs[i] for i in sorted(keep)]
    X = np.asarray(vecs, dtype=np.int64).reshape(-1, d)
    for _ in range(attempts):
        v = np.asarray(_random_shell_vector(d, rng), dtype=np.int64)
        if len(X) == 0 or int(np.min(np.sum((X - v) ** 2, axis=1))) >= 4:
            X = np.vstack([X, v])
    return KNVectors(tuple(tuple(int(x) for x in row) for row in X))


def mutate_construction(payload: str, sigma: float, rng: np.random.Generator) -> str:
    try:
        c = parse_construction(payload)
    except ConstructionError as exc:
        raise GenerationError(f"parent is not a literal construction: {exc}") from None
    if isinstance(c, CPCircles):
        out = mutate_circles(c, sigma, rng)
    elif isinstance(c, HTPoints):
        out = mutate_points(c, sigma, rng)
    else:
        out = mutate_vectors(c, sigma, rng)
    return dump_construction(out)


# -- strategy moves ---------------------------------------------------------------


def apply_meta(operator: dict, target: dict, rng: np.random.Generator) -> dict:
    child = dict(target)
    op = operator.get("meta_op")
    if op == "meta-scale":
        child["sigma"] = target["sigma"] * float(operator.get("meta_factor", 1.5))
    elif op == "meta-jitter":
        s = float(operator.get("meta_sigma", 0.3))
        child["sigma"] = target["sigma"] * math.exp(rng.normal(0.0, s))
        rp = target.get("restart_p", 0.0) * math.exp(rng.normal(0.0, s))
        child["restart_p"] = min(max(rp, 0.0), 1.0)
    child["sigma"] = min(max(child["sigma"], SIGMA_BOUNDS[0]), SIGMA_BOUNDS[1])
    return child


class ScriptedBackend:
    label = "scripted"

    def generate(self, req: GenerationRequest, rng: np.random.Generator) -> GenerationResult:
        strategy = parse_strategy(req.operator.payload)
        if req.target_kind is Kind.TASK:
            base = _pick_base(req.parents, strategy.get("restart_p", 0.0), rng)
            payload = mutate_construction(base, float(strategy["sigma"]), rng)
        else:
            best = max(range(len(req.parents)), key=lambda i: (req.parents[i][1], -i))
            target = parse_strategy(req.parents[best][0])
            payload = dump_strategy(apply_meta(strategy, target, rng))
        n = synthetic_tokens(payload)
        return GenerationResult(payload=payload, tokens_in=n, tokens_out=n, backend_label=self.label)
