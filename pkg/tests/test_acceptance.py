"""Acceptance gate: one PASS/FAIL line per primary criterion.

Run with ``pytest tests/test_acceptance.py`` (verdicts are listed in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import json
import math
import random
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

sys.path.insert(0, str(Path(__file__).parent))

from conftest import VERDICTS, load_data  # noqa: E402
from escherloop.backends import GenerationError, GenerationResult  # noqa: E402
from escherloop.backends.scripted import ScriptedBackend  # noqa: E402
from escherloop.cli import main as cli_main  # noqa: E402
from escherloop.config import default_optimizer_seeds, default_task_seeds  # noqa: E402
from escherloop.engine import Engine, LoopConfig  # noqa: E402
from escherloop.evaluators import (  # noqa: E402
    CPCircles,
    EvalResult,
    HTPoints,
    KNVectors,
    Task,
    eval_cp,
    eval_ht,
    eval_kn,
    evaluate,
    parse_construction,
    task_spec,
)
from escherloop.rating import EloLedger, elo_update, pairwise_competition  # noqa: E402
from escherloop.sampling import rank_softmax_probs, sample_indices  # noqa: E402
from oracles import cp_oracle, ht_oracle, kn_oracle, random_cp, random_ht, random_kn  # noqa: E402

KN, CP, HT = task_spec("kn"), task_spec("cp"), task_spec("ht")


def verdict(name: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{elapsed:.2f}s / limit {limit:g}s]"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# -- evaluator constants ---------------------------------------------------------------


def test_evaluator_constants():
    checks = []
    worst = 0.0

    t = time.perf_counter()
    kn = eval_kn(parse_construction(load_data("kn_582.json")), KN)
    worst = max(worst, time.perf_counter() - t)
    checks.append(("KN 582", kn.valid and kn.s_raw == 582 and abs(kn.s_norm - 0.9815) <= 5e-5, kn.s_norm))

    t = time.perf_counter()
    cp = eval_cp(parse_construction({"task": "cp", **load_data("cp_sum_2.6352223118.json")}), CP)
    worst = max(worst, time.perf_counter() - t)
    checks.append(("CP 2.6352223118", cp.valid and abs(cp.s_norm - 1.0001) <= 5e-5 and cp.s_norm > 1.0, cp.s_norm))

    t = time.perf_counter()
    ht = eval_ht(parse_construction({"task": "ht", **load_data("ht_min_area_0.0365253447.json")}), HT)
    worst = max(worst, time.perf_counter() - t)
    checks.append(("HT 0.0365253447", ht.valid and abs(ht.s_norm - 0.9999) <= 5e-5, ht.s_norm))

    detail = ", ".join(f"{n} -> {v:.6f}{'' if ok else ' (wrong)'}" for n, ok, v in checks)
    verdict("evaluator constants", all(ok for _, ok, _ in checks), detail, worst, 1.0)


# -- evaluator vs oracle ---------------------------------------------------------------


def test_evaluator_oracle_equivalence():
    t = time.perf_counter()
    rnd = random.Random(20240611)
    mismatches = {"kn": 0, "cp": 0, "ht": 0}
    valid = {"kn": 0, "cp": 0, "ht": 0}
    for _ in range(1000):
        v = random_kn(rnd)
        ok, s = kn_oracle(v)
        res = eval_kn(KNVectors(tuple(map(tuple, v))), KN)
        mismatches["kn"] += res.valid != ok or res.s_raw != s
        valid["kn"] += ok

        c = random_cp(rnd)
        ok, s = cp_oracle(c)
        res = eval_cp(CPCircles(tuple(c)), CP)
        mismatches["cp"] += res.valid != ok or abs(res.s_raw - s) > 1e-12
        valid["cp"] += ok

        p = random_ht(rnd)
        ok, s = ht_oracle(p)
        res = eval_ht(HTPoints(tuple(p)), HT)
        mismatches["ht"] += res.valid != ok or abs(res.s_raw - s) > 1e-12
        valid["ht"] += ok
    # both branches must actually be exercised
    mixed = all(0 < valid[k] < 1000 for k in valid)
    detail = "; ".join(f"{k}: {mismatches[k]} mismatches, {valid[k]}/1000 valid" for k in mismatches)
    verdict("evaluator oracle equivalence", mixed and not any(mismatches.values()), detail, time.perf_counter() - t, 30.0)


# -- Elo mechanism ---------------------------------------------------------------------


class NoisyScoreBackend:
    """Optimizer ``payload`` is a mean score; each generation emits mean + N(0, sd)."""

    label = "noisy"

    def __init__(self, sd):
        self.sd = sd

    def generate(self, req, rng):
        s = float(req.operator.payload) + rng.normal(0.0, self.sd)
        return GenerationResult(json.dumps({"score": s}), 1, 1, self.label)


def score_evaluator(payload, spec):
    s = json.loads(payload)["score"]
    return EvalResult(True, s, s, None), None


def ranking_fidelity(seed, means, sd, rounds=200, cohort=4):
    eng = Engine(CP, NoisyScoreBackend(sd), LoopConfig(cohort_size=cohort, meta_every=0, checkpoint_every=0,
                                                         max_iterations=rounds, budget=1e12), evaluator=score_evaluator, config={})
    state = eng.initialize([json.dumps({"score": 0.0})], [str(m) for m in means], seed)
    eng.run(state)
    elo = [state.ledger.ratings[f"o{i + 1:06d}"] for i in range(len(means))]
    return spearmanr(elo, means).statistic


def test_elo_mechanism():
    t = time.perf_counter()
    # (a) zero-sum on every round of a fuzz
    rng = np.random.default_rng(7)
    ledger = EloLedger()
    ids = [f"o{i}" for i in range(12)]
    for i in ids:
        ledger.add(i)
    worst = 0.0
    for n in range(500):
        k = int(rng.integers(2, 7))
        cohort = list(rng.choice(ids, size=k, replace=False))
        scores = list(np.round(rng.random(k), int(rng.integers(1, 4))))
        before = sum(ledger.ratings.values())
        elo_update(ledger, pairwise_competition(scores, 1e-9, cohort), n)
        worst = max(worst, abs(sum(ledger.ratings.values()) - before))
    zero_sum = worst <= 1e-9

    # (b) two equal ratings, one win
    pair = EloLedger(ratings={"a": 1200.0, "b": 1200.0})
    d = elo_update(pair, pairwise_competition([0.9, 0.1], 1e-9, ["a", "b"]), 1)
    sixteen = d == {"a": 16.0, "b": -16.0}

    # (c) five optimizers whose means are spaced one standard deviation apart
    sd = 0.1
    means = [0.3 + sd * i for i in range(5)]
    rhos = [ranking_fidelity(s, means, sd) for s in range(10)]
    good = sum(r >= 0.9 for r in rhos)
    detail = (
        f"max |round sum| {worst:.2e}; equal-rating win -> {d}; "
        f"Spearman >= 0.9 in {good}/10 seeds (rhos {', '.join(f'{r:.2f}' for r in rhos)})"
    )
    verdict("Elo mechanism", zero_sum and sixteen and good >= 9, detail, time.perf_counter() - t, 60.0)


# -- sampling ----------------------------------------------------------------------


def test_sampling():
    t = time.perf_counter()
    p = rank_softmax_probs([0.2, 0.9], 1.0)
    e = math.exp(-1.0)
    hand = [e / (1 + e), 1 / (1 + e)]  # the 0.9 candidate holds rank 0
    two = max(abs(a - b) for a, b in zip(p, hand)) <= 1e-6

    scores = [0.1, 0.7, 0.4, 0.9, 0.3]
    tau, n = 1.2, 100_000
    probs = np.asarray(rank_softmax_probs(scores, tau))
    rng = np.random.default_rng(3)
    counts = np.zeros(len(scores))
    for _ in range(n):
        counts[sample_indices(scores, 1, tau, rng)[0]] += 1
    z = np.abs(counts - n * probs) / np.sqrt(n * probs * (1 - probs))
    mc = bool(np.all(z <= 3))

    s = np.asarray(scores)
    transforms = [lambda x: 3 * x + 1, np.exp, lambda x: x**3, lambda x: np.arctan(10 * x)]
    invariant = all(np.array_equal(rank_softmax_probs(list(f(s)), tau), probs) for f in transforms)
    detail = f"2-candidate max err {max(abs(a - b) for a, b in zip(p, hand)):.1e}; max z {z.max():.2f} over {n} draws; monotone invariance {invariant}"
    verdict("sampling", two and mc and invariant, detail, time.perf_counter() - t, 30.0)


# -- budget -------------------------------------------------------------------------


class FuzzBackend:
    """Random token counts, random failures, random payload validity."""

    label = "fuzz"

    def __init__(self, task_payload):
        self.task_payload = task_payload

    def generate(self, req, rng):
        tin, tout = int(rng.integers(0, 5000)), int(rng.integers(1, 3000))
        roll = rng.random()
        if roll < 0.15:
            raise GenerationError("fuzzed failure", tokens_in=tin, tokens_out=tout)
        payload = self.task_payload if req.target_kind.value == "task" and roll > 0.3 else "opt"
        return GenerationResult(payload, tin, tout, self.label)


def test_budget_accounting():
    t = time.perf_counter()
    tasks = default_task_seeds(Task.CP, "scripted")
    exact, halted, runs = True, True, 0
    for seed in range(10):
        budget = float(np.random.default_rng(seed).integers(5_000, 60_000))
        eng = Engine(CP, FuzzBackend(tasks[0]), LoopConfig(budget=budget, checkpoint_every=0), config={})
        state = eng.run(eng.initialize(tasks, ["a", "b", "c", "d"], seed))
        gens = [e for e in eng.log.events if e["event"] == "gen"]
        tin = sum(e["tokens_in"] for e in gens)
        tout = sum(e["tokens_out"] for e in gens)
        exact &= state.budget.equivalent == tout + 0.25 * tin == tout + tin / 4
        exact &= (state.budget.tokens_in_total, state.budget.tokens_out_total) == (tin, tout)
        # spent before the final round must still have been under budget
        last = state.iteration
        before_last = sum(e["tokens_out"] + 0.25 * e["tokens_in"] for e in gens if e["iter"] < last)
        halted &= state.budget.equivalent >= budget and before_last < budget
        runs += 1
    detail = f"{runs} fuzzed runs; ledger equals summed log charges: {exact}; stopped within one round: {halted}"
    verdict("budget accounting", exact and halted, detail, time.perf_counter() - t, 10.0)


# -- closed loop ---------------------------------------------------------------------


def _best_after(opt_payloads, seed, meta_every, budget):
    tasks = default_task_seeds(Task.CP, "scripted")
    cfg = LoopConfig(budget=budget, meta_every=meta_every, checkpoint_every=0)
    eng = Engine(CP, ScriptedBackend(), cfg, config={})
    return eng.run(eng.initialize(tasks, opt_payloads, seed)).best["s_norm"]


def test_closed_loop_benefit():
    # every default seed strategy, run alone with no self-referential step, is a baseline
    t = time.perf_counter()
    budget = 200_000
    opts = default_optimizer_seeds("scripted")
    loop = [_best_after(opts, s, 1, budget) for s in range(10)]
    parts, ok = [], True
    for j, single in enumerate(opts):
        wins = sum(loop[s] >= _best_after([single], s, 0, budget) for s in range(10))
        sigma = json.loads(single)["sigma"]
        parts.append(f"vs sigma={sigma}: {wins}/10")
        ok &= wins >= 7
    detail = f"budget {budget} eq. tokens; mean loop best {np.mean(loop):.4f}; " + ", ".join(parts)
    verdict("closed-loop benefit", ok, detail, time.perf_counter() - t, 300.0)


# -- determinism --------------------------------------------------------------------


def test_determinism(tmp_path=None):
    import tempfile

    t = time.perf_counter()
    root = Path(tmp_path or tempfile.mkdtemp())
    cfg = Path(__file__).resolve().parents[1] / "configs" / "cp.toml"
    full, replay = root / "full", root / "replay"
    args = ["run", "--config", str(cfg), "--seed", "11", "--budget", "1e9", "--max-iterations", "50",
            "--checkpoint-every", "20", "--out", str(full)]
    assert cli_main(args) == 0
    assert cli_main(["resume", str(full / "ckpt_20"), "--out", str(replay)]) == 0

    def tail(path):
        return [ln for ln in path.read_text().splitlines() if json.loads(ln).get("iter", 0) > 20]

    a, b = tail(full / "run.jsonl"), tail(replay / "run.jsonl")
    logs_same = a == b and len(a) > 0
    iters = {json.loads(ln)["iter"] for ln in a}
    summary_same = (full / "summary.json").read_bytes() == (replay / "summary.json").read_bytes()
    detail = f"{len(a)} log events over iterations {min(iters)}-{max(iters)} identical: {logs_same}; summary identical: {summary_same}"
    verdict("determinism", logs_same and summary_same and iters == set(range(21, 51)), detail, time.perf_counter() - t, 120.0)


# -- evaluation count ------------------------------------------------------------------


def test_for_free_evaluation_count():
    t = time.perf_counter()
    calls = []

    def counting(payload, spec):
        calls.append(payload)
        return evaluate(payload, spec)

    cohort = 4
    eng = Engine(CP, ScriptedBackend(), LoopConfig(cohort_size=cohort, checkpoint_every=0), evaluator=counting, config={})
    state = eng.initialize(default_task_seeds(Task.CP, "scripted"), default_optimizer_seeds("scripted"), 5)
    per_round, elo_rounds = [], 0
    for _ in range(100):
        before = len(calls)
        eng.run_iteration(state)
        per_round.append(len(calls) - before)
        elo_rounds += any(e["event"] == "elo" and e["iter"] == state.iteration for e in eng.log.events[-12:])
    gens_per_round = sum(1 for e in eng.log.events if e["event"] == "gen" and e["target"] == "task") / 100
    ok = all(n == cohort for n in per_round) and gens_per_round == cohort and elo_rounds == 100
    detail = f"evaluator calls per round: min {min(per_round)}, max {max(per_round)} (|I| = {cohort}); rounds with Elo updates: {elo_rounds}/100"
    verdict("'for free' evaluation count", ok, detail, time.perf_counter() - t, 120.0)


if __name__ == "__main__":
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
