"""Command line entry points.

Exit codes are a stable contract:

    0  success (a declined plan or an escalation is a normal outcome)
    2  configuration error (bad config file, unknown fixture, bad flag)
    3  reference error (a lineage ref that is not in the log)
    4  integrity error (missing, corrupt or tampered log / checkpoint)
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from .orchestrator import InvalidConfig, Mode, Session
from .plan import AutoAccept, DenyAll, InteractivePolicy
from .scenario import FixtureMissing, iterations, read_config, run_scenario, scenario_config, load_config
from .session import Checkpoint, CorruptCheckpoint, SessionLog, UnknownRef, exposure_analysis, trace_backward
from .sim import (
    CohortConfig,
    compare_architectures,
    comparison_text,
    funnel_text,
    ledger_fixture,
    ledger_report,
    load_cohort_config,
    run_cohort,
    run_cohorts,
    write_report,
)

EXIT_OK, EXIT_CONFIG, EXIT_REF, EXIT_INTEGRITY = 0, 2, 3, 4
OUT_ENV = "RIVALS_OUT"
MANIFEST = "manifest.json"


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "rivals-out"))


# ---------------------------------------------------------------------------
# run directories: log.jsonl, checkpoints/, result.json, manifest.json


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run(sess: Session, run_dir: Path, extra: dict | None = None) -> Path:
    if run_dir.exists() and any(run_dir.iterdir()):
        raise FileExistsError(f"{run_dir} already holds a run; logs are never overwritten")
    run_dir.mkdir(parents=True, exist_ok=True)
    sess.log.write(run_dir / "log.jsonl")
    cp_dir = run_dir / "checkpoints"
    cp_dir.mkdir(exist_ok=True)
    for cp in sess.checkpoints:
        if cp is not None:
            cp.write(cp_dir / f"cp-{cp.index:04d}.json")
    result = {
        "session": sess.log.session_id,
        "branch": sess.log.branch,
        "seed": sess.seed,
        "mode": sess.config.mode.value,
        "status": sess.status.value,
        "user_verdict": None if sess.user_verdict is None else sess.user_verdict.value,
        "steps": 0 if sess.plan is None else len(sess.plan.steps),
        "iterations": {str(k): v for k, v in iterations(sess).items()},
        "result": sess.result,
        **(extra or {}),
    }
    (run_dir / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST
                   and p.parent in (run_dir, cp_dir))
    manifest = {str(p.relative_to(run_dir)): _sha(p) for p in files}
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir


def verify_run(run_dir: Path) -> dict:
    mpath = run_dir / MANIFEST
    if not mpath.is_file():
        raise CorruptCheckpoint(f"{run_dir} has no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
    except ValueError:
        raise CorruptCheckpoint(f"{mpath} is unreadable") from None
    for rel, digest in manifest.items():
        p = run_dir / rel
        if not p.is_file():
            raise CorruptCheckpoint(f"{p} is missing")
        if _sha(p) != digest:
            raise CorruptCheckpoint(f"{p} does not match its recorded hash")
    return manifest


def _resolve_log(path: Path) -> tuple[Path, SessionLog]:
    """Accept a run directory or a log file inside one."""
    run_dir = path if path.is_dir() else path.parent
    if not path.exists():
        raise CorruptCheckpoint(f"{path} does not exist")
    verify_run(run_dir)
    return run_dir, SessionLog.read(run_dir / "log.jsonl")


def summary_text(sess: Session) -> str:
    res = sess.result
    lines = [f"session {sess.log.session_id} [{sess.log.branch}] seed {sess.seed}: {sess.status.value}"
             f" (user verdict: {None if sess.user_verdict is None else sess.user_verdict.value})"]
    if sess.plan is not None:
        its = iterations(sess)
        lines.append(f"  plan: {len(sess.plan.steps)} steps, critique iterations "
                     + "/".join(str(its.get(s.id, 0)) for s in sess.plan.steps) + f" (total {sum(its.values())})")
    if res:
        if "matched_count" in res:
            lines.append(f"  matched {res['matched_count']}/{res['invoice_count']} invoices "
                         f"({res['match_rate_pct']:.2f}%), matched total {res['matched_total_cents'] / 100:,.2f}")
            lines.append(f"  PAYMENT_PENDING: {res['pending_count']} ({res['pending_total_cents'] / 100:,.2f}); "
                         f"discrepancy {res['discrepancy_cents'] / 100:,.2f}")
        else:
            lines.append(f"  result: {res}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(args) -> int:
    cfg = load_cohort_config(args.config)
    n = args.sessions or cfg.sessions
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out) / "simulate"
    if args.seeds > 1:
        res = run_cohorts(n, cfg, range(seed, seed + args.seeds))
        text = "\n".join(f"  {k:<12}{100 * v:7.2f}%" for k, v in res["mean"].items())
        text = f"Funnel averaged over {args.seeds} seeds ({seed}..{seed + args.seeds - 1}), {n} sessions each\n{text}"
        paths = write_report(out, f"cohort-{n}x{args.seeds}-seed{seed}", text, res)
    else:
        res = run_cohort(n, cfg, seed, keep_logs=not args.no_logs)
        text = (f"Cohort of {n} sessions, seed {seed}\n" + funnel_text(res.funnel, res.expected_escape)
                + "\n\n" + ledger_report(res.outcomes).text())
        paths = write_report(out, f"cohort-{n}-seed{seed}", text, res.report())
        if res.logs:
            log_dir = out / f"logs-{n}-seed{seed}"
            log_dir.mkdir(parents=True, exist_ok=True)
            for log in res.logs:
                log.write(log_dir / f"{log.session_id}.jsonl")
    print(text)
    print(f"report: {paths[0]}")
    return EXIT_OK


def _scenario_config(args):
    raw = read_config(args.config) if args.config else load_config("scenario")
    return scenario_config(raw, args.mode)


def cmd_scenario(args) -> int:
    policy = InteractivePolicy() if args.interactive else AutoAccept()
    cfg = _scenario_config(args)
    sess = run_scenario(args.name, args.seed, cfg, policy, branch=args.branch or "main")
    run_dir = Path(args.out) / args.name / (args.branch or "main")
    write_run(sess, run_dir)
    print(summary_text(sess))
    print(f"run: {run_dir}")
    return EXIT_OK


def _next_branch(run_dir: Path) -> str:
    k = 1
    while (run_dir / f"branch-{k}").exists():
        k += 1
    return f"branch-{k}"


def cmd_replay(args) -> int:
    run_dir, log = _resolve_log(Path(args.run))
    cps = sorted((run_dir / "checkpoints").glob("cp-*.json"))
    if not cps:
        raise CorruptCheckpoint(f"{run_dir} has no checkpoints")
    index = len(cps) - 1 if args.checkpoint is None else args.checkpoint
    path = run_dir / "checkpoints" / f"cp-{index:04d}.json"
    if not path.is_file():
        raise UnknownRef(f"checkpoint {index}")
    cp = Checkpoint.read(path)
    name = args.branch or _next_branch(run_dir)
    if "/" in name or (run_dir / name).exists():
        raise InvalidConfig(f"branch name {name!r} is taken or not a plain name")
    policy = {"auto": AutoAccept(), "deny": DenyAll(), None: None}[args.policy]
    if args.interactive:
        policy = InteractivePolicy()
    sess = Session.restore(cp, log, policy=policy, branch=f"{log.branch}/{name}").run()
    write_run(sess, run_dir / name, {"parent": log.branch, "checkpoint": index})
    same = [e.to_line() for e in sess.log] == [e.to_line() for e in log]
    print(summary_text(sess))
    print(f"forked from checkpoint {index} (log position {cp.log_position}); "
          f"{'identical to the parent suffix' if same else 'diverges from the parent'}")
    print(f"branch: {run_dir / name}")
    return EXIT_OK


def cmd_trace(args) -> int:
    _, log = _resolve_log(Path(args.run))
    res = trace_backward(log, args.ref)
    print(f"backward trace of {args.ref}: {len(res.nodes)} nodes, {len(res.edges)} edges, "
          f"events {list(res.events)}")
    for src, dst in res.edges:
        print(f"  {src} -> {dst}")
    print("roots: " + ", ".join(sorted(res.roots)))
    return EXIT_OK


def cmd_expose(args) -> int:
    _, log = _resolve_log(Path(args.run))
    out = sorted(exposure_analysis(log, args.ref))
    print(f"exposure of {args.ref}: {len(out)} downstream refs")
    for ref in out:
        print(f"  {ref}")
    if not out:
        print("  (none)")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) / "report"
    if args.what == "ledger":
        if args.config:
            cfg = load_cohort_config(args.config)
            n = args.sessions or cfg.sessions
            seed = cfg.seed if args.seed is None else args.seed
            rep = ledger_report(run_cohort(n, cfg, seed).outcomes)
            name = f"ledger-{n}-seed{seed}"
        else:
            rep = ledger_report(ledger_fixture())
            name = "ledger-fixture"
        text = rep.text()
        data = rep.to_dict()
    else:
        raw = read_config(args.config) if args.config else None
        rows = compare_architectures(config=raw, seed=args.seed)
        text = comparison_text(rows)
        data = {"rows": [{"mode": r.mode, "trials": r.trials, "correct": r.correct, "accuracy": r.accuracy,
                          "mean_latency_s": r.mean_latency} for r in rows]}
        name = "compare"
    paths = write_report(out, name, text, data)
    print(text)
    print(f"report: {paths[0]}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rivals", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True)

    def out_flag(sp):
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./rivals-out)")

    sp = sub.add_parser("simulate", help="run a Monte Carlo cohort and write its funnel report")
    sp.add_argument("--config", default="calibrated", help="config file or packaged config name")
    sp.add_argument("--sessions", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--seeds", type=int, default=1, help="average the funnel over this many consecutive seeds")
    sp.add_argument("--no-logs", action="store_true", help="skip writing per-session logs")
    out_flag(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("scenario", help="run the financial reconciliation fixture")
    sp.add_argument("name", nargs="?", default="financial-q1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", default=None)
    sp.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    sp.add_argument("--interactive", action="store_true", help="approve the plan and escalations on the terminal")
    sp.add_argument("--branch", default=None)
    out_flag(sp)
    sp.set_defaults(func=cmd_scenario)

    sp = sub.add_parser("replay", help="fork a recorded run from a checkpoint into a new branch directory")
    sp.add_argument("run", help="run directory (or its log.jsonl)")
    sp.add_argument("--checkpoint", type=int, default=None, help="checkpoint index (default: the last)")
    sp.add_argument("--branch", default=None, help="branch directory name (default branch-N)")
    sp.add_argument("--policy", choices=["auto", "deny"], default=None, help="swap the approval policy")
    sp.add_argument("--interactive", action="store_true")
    sp.set_defaults(func=cmd_replay)

    for verb, fn, text in (("trace", cmd_trace, "everything a ref was derived from"),
                           ("expose", cmd_expose, "everything downstream of a ref")):
        sp = sub.add_parser(verb, help=text)
        sp.add_argument("run", help="run directory (or its log.jsonl)")
        sp.add_argument("ref")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("report", help="recovery ledger or architecture comparison")
    sp.add_argument("what", choices=["ledger", "compare"])
    sp.add_argument("--config", default=None, help="cohort config for a simulated ledger, or a comparative config")
    sp.add_argument("--sessions", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    out_flag(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", "unset") is None:
        args.out = str(default_out())
    try:
        return args.func(args)
    except (InvalidConfig, FixtureMissing) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnknownRef as exc:
        print(f"unknown reference: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_REF
    except (CorruptCheckpoint, FileExistsError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
