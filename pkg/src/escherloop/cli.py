"""Command line entry point: ``run``, ``resume``, ``eval`` and ``report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as configmod
from .backends import BackendConfigError, make_backend
from .engine import LOG_NAME, Engine, RunLog, load_checkpoint, read_manifest, select_checkpoint, summary
from .evaluators import ConstructionError, Task, evaluate, task_spec

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("escherloop")


def _write_summary(state, spec, out_dir: Path) -> None:
    (out_dir / "summary.json").write_text(json.dumps(summary(state, spec), sort_keys=True, indent=2) + "\n")


def _engine(cfg: configmod.RunConfig, out_dir: Path, raw: dict) -> Engine:
    backend = make_backend(cfg.backend)
    if cfg.backend.mode == "remote":
        backend.check_credentials()
    digest_src = {k: v for k, v in raw.items() if k not in configmod.RUN_CONTROL_KEYS}
    eng = Engine(cfg.spec, backend, cfg.loop, cfg.backend, run_dir=out_dir, config=digest_src)
    eng.config = raw
    return eng


def cmd_run(args) -> int:
    try:
        cfg = configmod.load(
            Path(args.config) if args.config else None,
            task=args.task,
            seed=args.seed,
            budget=args.budget,
            out=args.out,
            max_iterations=args.max_iterations,
            backend=args.backend,
            cohort_size=args.cohort_size,
            meta_every=args.meta_every,
            checkpoint_every=args.checkpoint_every,
            workers=args.workers,
        )
    except configmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = cfg.out_dir
    if out_dir.exists() and (out_dir / LOG_NAME).exists():
        # a fresh run owns its directory
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        eng = _engine(cfg, out_dir, cfg.raw)
    except BackendConfigError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    (out_dir / "config.json").write_text(json.dumps(cfg.raw, sort_keys=True, indent=2) + "\n")
    state = eng.initialize(cfg.task_seeds, cfg.optimizer_seeds, cfg.seed)
    state = eng.run(state)
    _write_summary(state, cfg.spec, out_dir)
    print(json.dumps({k: v for k, v in summary(state, cfg.spec).items() if k not in ("best_construction", "best_agent")}))
    return EXIT_OK


def cmd_resume(args) -> int:
    target = Path(args.path)
    try:
        if (target / "manifest.json").exists():
            ckpt = target
        else:
            ckpt = select_checkpoint(target, args.pick, rng=np.random.default_rng(args.pick_seed))
        man = read_manifest(ckpt)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raw = dict(man["config"])
    if args.max_iterations is not None:
        raw["max_iterations"] = args.max_iterations
    if args.budget is not None:
        raw["budget"] = args.budget
    out_dir = Path(args.out) if args.out else ckpt.parent
    raw["out_dir"] = str(out_dir)
    try:
        # populations come from the checkpoint, so seed files are not re-read
        cfg = configmod.build({k: v for k, v in raw.items() if k != "seeds"})
    except configmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir.mkdir(parents=True, exist_ok=True)
    src_log = ckpt.parent / LOG_NAME
    if src_log.exists() and src_log.resolve() != (out_dir / LOG_NAME).resolve():
        shutil.copyfile(src_log, out_dir / LOG_NAME)
    try:
        eng = _engine(cfg, out_dir, raw)
    except BackendConfigError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    state = load_checkpoint(ckpt, map_elites=cfg.loop.map_elites)
    if state.config_digest != eng.digest:
        log.warning("config digest %s differs from checkpoint digest %s", eng.digest, state.config_digest)
    eng.log.truncate_after(state.iteration)
    state = eng.run(state)
    _write_summary(state, cfg.spec, out_dir)
    print(json.dumps({"resumed_from": ckpt.name, "iterations": state.iteration, "s_norm": state.best.get("s_norm", 0.0)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        print(f"input not found: {path}", file=sys.stderr)
        return EXIT_INVALID
    payload = path.read_text()
    task = args.task
    if task is None:
        try:
            task = json.loads(payload).get("task")
        except (json.JSONDecodeError, AttributeError):
            task = None
    if task is None:
        print("cannot determine task; pass --task", file=sys.stderr)
        return EXIT_INVALID
    try:
        spec = task_spec(Task(task), exec_timeout=args.timeout)
    except ValueError:
        print(f"unknown task {task!r}", file=sys.stderr)
        return EXIT_INVALID
    res, _ = evaluate(payload, spec)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return EXIT_OK if res.valid else EXIT_INVALID


def read_log(path: Path) -> list[dict]:
    events = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                ev = json.loads(line)
            except json.JSONDecodeError:
                raise ValueError(f"corrupt log line {n}") from None
            if not isinstance(ev, dict) or "event" not in ev:
                raise ValueError(f"corrupt log line {n}")
            events.append(ev)
    return events


def report_rows(events: list[dict], kind: str) -> tuple[list[str], list[list]]:
    if kind == "best_so_far":
        best, rows = None, []
        for ev in events:
            if ev["event"] != "eval":
                continue
            s = ev["s_norm"] if ev.get("valid", True) else 0.0
            best = s if best is None else max(best, s)
            rows.append([ev["eq_tokens"], best])
        return ["equivalent_tokens", "best_norm_score"], rows
    if kind == "elo":
        rows = [[ev["iter"], ev["id"], ev["new"]] for ev in events if ev["event"] == "elo"]
        return ["iteration", "optimizer_id", "rating"], rows
    raise ValueError(f"unknown report kind {kind!r}")


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / LOG_NAME if run_dir.is_dir() else run_dir
    try:
        events = read_log(path)
        header, rows = report_rows(events, args.kind)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="escherloop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="start a new run")
    r.add_argument("--config")
    r.add_argument("--task", choices=[t.value for t in Task])
    r.add_argument("--seed", type=int)
    r.add_argument("--backend", choices=["scripted", "remote"])
    r.add_argument("--budget", type=float)
    r.add_argument("--out")
    r.add_argument("--max-iterations", type=int)
    r.add_argument("--cohort-size", type=int)
    r.add_argument("--meta-every", type=int)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    rs = sub.add_parser("resume", help="continue from a checkpoint or run directory")
    rs.add_argument("path", help="ckpt_<iter>/ directory or a run directory")
    rs.add_argument("--pick", choices=["latest", "best"], default="latest")
    rs.add_argument("--pick-seed", type=int, default=0)
    rs.add_argument("--out")
    rs.add_argument("--max-iterations", type=int)
    rs.add_argument("--budget", type=float)
    rs.set_defaults(func=cmd_resume)

    e = sub.add_parser("eval", help="evaluate a construction or program file")
    e.add_argument("input")
    e.add_argument("--task", choices=[t.value for t in Task])
    e.add_argument("--timeout", type=float, default=120.0)
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="CSV series from a run log")
    rp.add_argument("run_dir")
    rp.add_argument("--kind", choices=["best_so_far", "elo"], default="best_so_far")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
