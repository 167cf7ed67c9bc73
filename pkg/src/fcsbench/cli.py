"""Scheduling-latency benchmark for a periodic quadrotor attitude task.

Exit codes: 0 completed (deadline misses are data, not failures),
1 configuration or privilege error, 2 environment unsupported.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, default_core, gains_from_kv, matrix_cells, read_kv
from .control import (
    ClosedLoop,
    ControllerGains,
    FlightControlPayload,
    VehicleParams,
    allocate_squared,
    hover_state,
)
from .executor import (
    AppliedConfig,
    ConfigurationError,
    EnvReport,
    ExecutorError,
    PayloadError,
    PermissionDeniedError,
    PolicyUnsupportedError,
    SimulatedClock,
    TaskSpec,
    configure_thread,
    detect_environment,
    policy_to_dict,
    run_periodic,
)
from .stats import (
    EmptySeriesError,
    ExperimentResult,
    ReportWriteError,
    compute_stats,
    format_table,
    ns_to_us,
    render_report,
    write_json,
    write_series_csv,
)
from .stress import (
    AffinityViolationError,
    StressError,
    StressProfile,
    external_command,
    full_profile,
    start_stress,
    stop_stress,
)
from . import trace

log = logging.getLogger("fcsbench")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNSUPPORTED = 2

RUN_ARTIFACTS = ("series.csv", "stats.json", "env.json")


class EnvironmentUnsupported(RuntimeError):
    pass


@dataclass
class RunOutcome:
    result: ExperimentResult
    out_dir: Path
    series: object
    applied: AppliedConfig | None


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (PolicyUnsupportedError, EnvironmentUnsupported, AffinityViolationError)):
        return EXIT_UNSUPPORTED
    return EXIT_CONFIG


def _measure(spec: TaskSpec, payload, clock, configure: bool):
    """Configure a fresh thread and run the periodic loop on it."""
    box: dict = {}

    def body():
        try:
            box["applied"] = configure_thread(spec) if configure else None
            box["series"] = run_periodic(spec, payload, clock)
        except BaseException as exc:  # handed back to the caller's thread
            box["error"] = exc

    t = threading.Thread(target=body, name="fcsbench-measure")
    t.start()
    t.join()
    if "error" in box:
        raise box["error"]
    return box["applied"], box["series"]


def execute_run(cfg: RunConfig, env: EnvReport | None = None, clock=None) -> RunOutcome:
    """One benchmark cell: env, stress, thread setup, loop, stats, artifacts."""
    out_dir = cfg.output_dir()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    env = env or detect_environment()
    spec = cfg.task_spec()
    payload = FlightControlPayload(params=cfg.vehicle_params(), gains=cfg.controller_gains(),
                                   dt=cfg.period_us * 1e-6)
    if cfg.simulate:
        clock = clock or SimulatedClock()

    profile = cfg.stress_profile()
    handle = None
    stress_summary = None
    if profile is not None and not cfg.simulate:
        try:
            handle = start_stress(profile)
        except AffinityViolationError as exc:
            raise EnvironmentUnsupported(f"cannot isolate stressors: {exc}") from exc
    try:
        applied, series = _measure(spec, payload, clock, configure=not cfg.simulate)
    finally:
        if handle is not None:
            stress_summary = stop_stress(handle).to_dict()

    lat_us = ns_to_us(series.latency_ns)
    exec_us = ns_to_us(series.exec_ns)
    try:
        stats = compute_stats(lat_us, spec.D_us, exec_us)
    except EmptySeriesError:
        stats = None
    warm = None
    if cfg.warmup and len(series) > cfg.warmup:
        warm = compute_stats(lat_us[cfg.warmup:], spec.D_us, exec_us[cfg.warmup:])

    policy = spec.policy
    result = ExperimentResult(
        scheduler=policy.kind,
        parameters=policy.parameters,
        kernel=env.kernel_label,
        stress=cfg.stress != "off",
        stats=stats,
        series_path=str(out_dir / "series.csv"),
        config=cfg.to_dict(),
        warmup_stats=warm,
    )
    write_series_csv(out_dir / "series.csv", series)
    write_json(out_dir / "env.json", env.to_dict())
    write_json(
        out_dir / "stats.json",
        {
            "result": result.to_dict(),
            "applied": applied.to_dict() if applied else None,
            "requested_policy": policy_to_dict(policy),
            "skipped_periods": series.skipped_periods,
            "schedule_intact": series.schedule_intact(),
            "exec_stats": compute_stats(exec_us).to_dict() if len(series) else None,
            "stress": stress_summary,
            "simulated": cfg.simulate,
            "version": __version__,
        },
    )
    return RunOutcome(result, out_dir, series, applied)


# -- subcommands ------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    kv = read_kv(args.config) if getattr(args, "config", None) else {}
    return RunConfig.from_kv(
        kv,
        policy=args.policy,
        nice=args.nice,
        prio=args.prio,
        runtime_us=args.runtime_us,
        deadline_us=args.deadline_us,
        period_us=args.period_us,
        core=args.core,
        iterations=args.iterations,
        warmup=args.warmup,
        memlock=False if args.no_memlock else None,
        stress=args.stress,
        output=args.output,
        label=args.label,
        simulate=True if args.simulate else None,
    )


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    outcome = execute_run(cfg)
    r = outcome.result
    print(format_table([r]), end="")
    misses = r.stats.miss_count if r.stats else 0
    print(f"{len(outcome.series)} iterations, {misses} deadline misses, "
          f"{outcome.series.skipped_periods} skipped periods -> {outcome.out_dir}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    kv = read_kv(args.config) if args.config else {}
    cooldown = float(args.cooldown if args.cooldown is not None else kv.get("cooldown_s", 5.0))
    seed = args.shuffle_seed if args.shuffle_seed is not None else kv.get("shuffle_seed")
    for key, val in (("iterations", args.iterations), ("simulate", args.simulate or None)):
        if val is not None:
            kv[key] = str(val)
    cells = matrix_cells(kv)
    if seed is not None:
        random.Random(int(seed)).shuffle(cells)
    root = Path(args.output or os.environ.get("FCSBENCH_OUTPUT", "results")) / (args.name or "matrix")

    env = detect_environment()
    results, failed = [], []
    for i, cell in enumerate(cells):
        cell.output = str(root / f"{i:02d}-{cell.resolved_label}")
        log.info("cell %d/%d: %s", i + 1, len(cells), cell.resolved_label)
        try:
            results.append(execute_run(cell, env=env).result)
        except (ExecutorError, StressError, EnvironmentUnsupported, ReportWriteError) as exc:
            failed.append({"cell": cell.resolved_label, "error": str(exc), "exit_code": exit_code_for(exc)})
            print(f"cell {cell.resolved_label} failed: {exc}", file=sys.stderr)
        if cooldown > 0 and i + 1 < len(cells):
            time.sleep(cooldown)

    write_json(root / "matrix_status.json", {
        "cells": len(cells), "completed": len(results), "failed": failed, "env": env.to_dict(),
    })
    if results:
        render_report(results, root, env=env.to_dict())
        print(format_table(results), end="")
    print(f"{len(results)} of {len(cells)} cells completed, {len(failed)} flagged -> {root}")
    for f in failed:
        print(f"  FLAGGED {f['cell']}: {f['error']}")
    if not results and failed:
        return max(f["exit_code"] for f in failed)
    return EXIT_OK


def _collect_results(paths) -> tuple[list[ExperimentResult], dict | None]:
    results, env = [], None
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("stats.json"))
        for f in files:
            with open(f, encoding="utf-8") as fp:
                data = json.load(fp)
            results.append(ExperimentResult.from_dict(data["result"]))
            env_file = f.with_name("env.json")
            if env is None and env_file.exists():
                env = json.loads(env_file.read_text(encoding="utf-8"))
    return results, env


def cmd_report(args) -> int:
    results, env = _collect_results(args.inputs)
    if not results:
        print("no stats.json found under the given paths", file=sys.stderr)
        return EXIT_CONFIG
    paths = render_report(results, args.output, env=env)
    print(format_table(results), end="")
    print(f"report written to {paths['report'].parent}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.fixture:
        path = trace.fixture_path(args.fixture)
    elif args.trace == "-":
        path = None
    else:
        path = Path(args.trace)
    try:
        parsed = trace.parse_trace(sys.stdin.buffer) if path is None else trace.parse_trace_file(path)
    except OSError as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    records = trace.classify_activations(parsed.events, args.task)
    summary = trace.summarize(records)
    summary["skipped_lines"] = parsed.skipped_count
    print(trace.summary_line(summary))
    print(
        f"records: {summary['total']} (Direct {summary['Direct']['count']}, "
        f"Deferred {summary['Deferred']['count']}, incomplete {summary['incomplete']}); "
        f"skipped lines: {parsed.skipped_count}"
    )
    if args.compare:
        other = trace.parse_trace_file(args.compare)
        try:
            dil = trace.exec_dilation(
                trace.execution_spans(parsed.events, args.task),
                trace.execution_spans(other.events, args.task),
            )
            summary["dilation"] = {"exec_time_a_us": dil.exec_time_a_us,
                                   "exec_time_b_us": dil.exec_time_b_us, "ratio": dil.ratio}
            print(dil)
        except trace.InsufficientDataError as exc:
            print(f"dilation: {exc}", file=sys.stderr)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        trace.write_records_csv(out / "activations.csv", records)
        trace.write_records_json(out / "activations.json", records, summary)
    return EXIT_OK


def _stress_profile_from_args(args) -> StressProfile:
    cores = None
    if args.cores:
        from .executor import parse_cpu_list

        cores = frozenset(parse_cpu_list(args.cores))
    if args.profile == "full":
        base = full_profile(measurement_core=args.measurement_core)
    else:
        base = StressProfile(measurement_core=args.measurement_core)
    updates = {
        "cpu_workers": args.cpu, "vm_workers": args.vm, "vm_fraction": args.vm_fraction,
        "switch_pairs": args.switch, "fork_workers": args.fork,
    }
    values = {k: v for k, v in updates.items() if v is not None}
    return StressProfile(
        **{**{f: getattr(base, f) for f in (
            "cpu_workers", "vm_workers", "vm_fraction", "switch_pairs", "fork_workers")}, **values},
        allowed_cores=cores,
        duration_s=args.duration,
        measurement_core=args.measurement_core,
    )


def cmd_stress(args) -> int:
    profile = _stress_profile_from_args(args)
    if args.print_command:
        print(external_command(profile))
        return EXIT_OK
    if profile.duration_s is None:
        print("stress needs --duration unless --print-command is given", file=sys.stderr)
        return EXIT_CONFIG
    handle = start_stress(profile)
    print(f"{len(handle.workers)} workers on cores {sorted(handle.cores)}: {external_command(handle.attained)}")
    try:
        handle.wait()
    except KeyboardInterrupt:
        pass
    summary = stop_stress(handle)
    print(json.dumps(summary.to_dict(), indent=2))
    return EXIT_OK


def cmd_env(args) -> int:
    print(json.dumps(detect_environment().to_dict(), indent=2))
    return EXIT_OK


# -- selftest ---------------------------------------------------------------


def _check_executor() -> str | None:
    spec = TaskSpec(iterations=50)
    clock = SimulatedClock(start_ns=1_000_000, oversleep_ns={10: 3_000_000})
    s = run_periodic(spec, lambda: clock.advance(50_000), clock)
    late = np.flatnonzero(s.latency_ns)
    if list(late) != [10] or int(s.latency_ns[10]) != 3_000_000:
        return f"expected one 3 ms late wake at iteration 10, got {list(late)}"
    if not s.schedule_intact():
        return "schedule drifted after oversleep"
    clock = SimulatedClock()
    s = run_periodic(spec, lambda: clock.advance(100_000), clock)
    if s.latency_ns.any() or s.miss_count:
        return "ideal clock produced non-zero latency or misses"
    return None


def _check_stats() -> str | None:
    rng = np.random.default_rng(7)
    for n in (1, 2, 99, 100, 1001):
        x = rng.integers(0, 10_000, n)
        st = compute_stats(x)
        s = sorted(int(v) for v in x)
        ref = {
            "median_us": s[-(-n // 2) - 1], "p90_us": s[-(-90 * n // 100) - 1],
            "p99_us": s[-(-99 * n // 100) - 1], "max_us": s[-1], "mean_us": sum(s) / n,
        }
        for k, v in ref.items():
            if getattr(st, k) != v:
                return f"{k} = {getattr(st, k)} != reference {v} (n={n})"
    return None


def _check_allocator(params: VehicleParams) -> str | None:
    A = np.array(params.mixing_matrix())
    rng = np.random.default_rng(11)
    for _ in range(1000):
        cmd = np.array([
            rng.uniform(0.2, 1.0) * params.max_thrust,
            *rng.uniform(-0.2, 0.2, 2), rng.uniform(-0.02, 0.02),
        ])
        s = np.array(allocate_squared(cmd[0], tuple(cmd[1:]), params))
        err = np.linalg.norm(A @ s - cmd) / np.linalg.norm(cmd)
        if err > 1e-9:
            return f"mixing round-trip error {err:.3g} for command {cmd}"
    return None


def _check_hover(params: VehicleParams, gains: ControllerGains) -> str | None:
    loop = ClosedLoop(state=hover_state(), gains=gains, params=params)
    loop.run(2500)
    err = loop.position_error()
    if not err < 1e-6:
        return f"hover drifted {err:.3g} m after 10 s"
    return None


def cmd_selftest(args) -> int:
    params = VehicleParams()
    failures = 0
    gains_error = None
    gains = ControllerGains()
    if args.gains:
        try:
            gains = gains_from_kv(read_kv(args.gains))
        except (ConfigurationError, OSError) as exc:
            gains_error = f"gains config {args.gains} rejected: {exc}"
    checks = [
        ("executor-simulated-clock", _check_executor),
        ("stats-oracle", _check_stats),
        ("allocator-round-trip", lambda: _check_allocator(params)),
        ("hover-hold", lambda: gains_error or _check_hover(params, gains)),
    ]
    for name, fn in checks:
        try:
            problem = fn()
        except Exception as exc:  # report, keep going
            problem = f"{type(exc).__name__}: {exc}"
        if problem:
            failures += 1
            print(f"FAIL {name}: {problem}")
        else:
            print(f"PASS {name}")
    return EXIT_OK if failures == 0 else EXIT_CONFIG


# -- parser -----------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--policy", choices=["other", "fifo", "rr", "deadline"], help="scheduling class (default other)")
    p.add_argument("--nice", type=int, help="nice value for other (default 0)")
    p.add_argument("--prio", type=int, help="priority 1-99 for fifo/rr (default 50)")
    p.add_argument("--runtime-us", type=int, help="deadline runtime budget (default 400)")
    p.add_argument("--deadline-us", type=int, help="relative deadline (default 4000)")
    p.add_argument("--period-us", type=int, help="loop period (default 4000, i.e. 250 Hz)")
    p.add_argument("--core", type=int, help=f"measurement CPU (default {default_core()})")
    p.add_argument("--iterations", type=int, help="loop iterations (default 10000)")
    p.add_argument("--warmup", type=int, help="leading samples excluded from the extra warm-up stats")
    p.add_argument("--no-memlock", action="store_true", help="skip mlockall")
    p.add_argument("--stress", choices=["off", "full"], help="background load during the run")
    p.add_argument("--output", "-o")
    p.add_argument("--label", help="run name; also the default output subdirectory")
    p.add_argument("--simulate", action="store_true",
                   help="simulated clock, no thread configuration or stress (dry run)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcsbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="run the experiment matrix")
    p.add_argument("--config", help="matrix file (policies, nice, prio, runtime_us, stress, ...)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--cooldown", type=float, help="seconds between cells (default 5)")
    p.add_argument("--shuffle-seed", type=int)
    p.add_argument("--output", "-o")
    p.add_argument("--name", help="subdirectory name (default 'matrix')")
    p.add_argument("--simulate", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("stress", help="run stressors standalone or print a stress-ng command")
    p.add_argument("--profile", choices=["full", "none"], default="full")
    p.add_argument("--cpu", type=int)
    p.add_argument("--vm", type=int)
    p.add_argument("--vm-fraction", type=float)
    p.add_argument("--switch", type=int)
    p.add_argument("--fork", type=int)
    p.add_argument("--cores", help="CPU list for stressors, e.g. 0-1")
    p.add_argument("--measurement-core", type=int, default=None)
    p.add_argument("--duration", type=float)
    p.add_argument("--print-command", action="store_true")
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("analyze", help="classify task activations in a trace dump")
    p.add_argument("trace", nargs="?", default="-", help="trace file, '-' for stdin")
    p.add_argument("--task", default="fcs")
    p.add_argument("--fixture", help="use a bundled fixture (activation_pair, activation_direct, activation_deferred)")
    p.add_argument("--compare", help="second trace; report execution-time dilation")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="consolidate run directories into one report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("env", help="print kernel and tuning report")
    p.set_defaults(func=cmd_env)

    p = sub.add_parser("selftest", help="run built-in deterministic checks")
    p.add_argument("--gains", help="gains config file to validate with the hover check")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PermissionDeniedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PolicyUnsupportedError, EnvironmentUnsupported, AffinityViolationError) as exc:
        print(f"unsupported: {exc} (no fallback policy was applied)", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (ConfigurationError, StressError, ValueError, ReportWriteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PayloadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
