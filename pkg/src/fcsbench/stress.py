"""Synthetic interference: compute, memory and kernel stressors.

Each worker is a forked process pinned to ``allowed_cores`` (never the
measurement core).  Workers poll a shared stop flag every loop iteration
and bump a per-worker counter so callers can prove the stress actually ran.

========  =====================================================  ==========================
kind      loop body                                              pressure
========  =====================================================  ==========================
cpu       64x64 float64 matrix product                           ALU / FP pipeline
vm        sequential write, then 64-byte-stride reads, chunked    L3 thrashing, DRAM traffic
switch    ping-pong one byte over a pipe pair (2 processes)      context switches
fork      fork + _exit + waitpid, at most 500 per second         runqueue lock, softirq
========  =====================================================  ==========================
"""

from __future__ import annotations

import argparse
import ctypes
import logging
import multiprocessing as mp
import os
import shlex
import time
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

CACHE_LINE = 64
MATRIX_SIZE = 64
FORK_RATE_CAP = 500.0
_VM_CHUNK = 16 << 20
_MIN_VM_BYTES = 1 << 20


class StressError(RuntimeError):
    pass


class AffinityViolationError(StressError):
    pass


@dataclass(frozen=True)
class StressProfile:
    cpu_workers: int = 0
    vm_workers: int = 0
    vm_fraction: float = 0.75
    switch_pairs: int = 0
    fork_workers: int = 0
    allowed_cores: frozenset[int] | None = None
    duration_s: float | None = None
    measurement_core: int | None = None

    def __post_init__(self):
        counts = (self.cpu_workers, self.vm_workers, self.switch_pairs, self.fork_workers)
        if any(c < 0 for c in counts):
            raise ValueError("worker counts must be >= 0")
        if not 0.0 < self.vm_fraction <= 0.9:
            raise ValueError(f"vm_fraction must be in (0, 0.9], got {self.vm_fraction}")
        if self.allowed_cores is not None:
            object.__setattr__(self, "allowed_cores", frozenset(int(c) for c in self.allowed_cores))
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def worker_count(self) -> int:
        return self.cpu_workers + self.vm_workers + 2 * self.switch_pairs + self.fork_workers

    def resolved_cores(self) -> frozenset[int]:
        """Allowed cores after removing the measurement core; validated."""
        ncpu = os.cpu_count() or 1
        cores = self.allowed_cores
        if cores is None:
            cores = frozenset(range(ncpu)) - {self.measurement_core}
        if self.measurement_core is not None and self.measurement_core in cores:
            raise AffinityViolationError(
                f"allowed cores {sorted(cores)} include measurement core {self.measurement_core}"
            )
        bad = [c for c in cores if not 0 <= c < ncpu]
        if bad:
            raise AffinityViolationError(f"cores {bad} are not online ({ncpu} CPU(s))")
        if not cores and self.worker_count:
            raise AffinityViolationError(
                f"no core left for stressors: {ncpu} CPU(s) online, "
                f"measurement core {self.measurement_core}"
            )
        return cores


def full_profile(measurement_core: int | None = None, **overrides) -> StressProfile:
    """Four matrix workers, two vm workers over 75% of memory, switch and fork classes."""
    base = StressProfile(
        cpu_workers=4,
        vm_workers=2,
        vm_fraction=0.75,
        switch_pairs=2,
        fork_workers=2,
        measurement_core=measurement_core,
    )
    return replace(base, **overrides)


def available_memory() -> int:
    """MemAvailable in bytes, falling back to free physical pages."""
    try:
        with open("/proc/meminfo", encoding="ascii") as fp:
            for line in fp:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")


# -- worker bodies ----------------------------------------------------------


def _cpu_loop(slot, stop, counters, deadline):
    rng = np.random.default_rng(slot)
    a = rng.random((MATRIX_SIZE, MATRIX_SIZE))
    b = rng.random((MATRIX_SIZE, MATRIX_SIZE)) / MATRIX_SIZE
    c = np.empty_like(a)
    while not stop.value and time.monotonic() < deadline:
        np.matmul(a, b, out=c)
        a, c = c, a
        counters[slot] += 1


def _vm_alloc(target: int):
    size = max(target, _MIN_VM_BYTES)
    while size >= _MIN_VM_BYTES:
        try:
            return np.empty(size, dtype=np.uint8)
        except MemoryError:
            size //= 2
    return None


def _vm_loop(slot, stop, counters, deadline, buf):
    n = buf.size
    value = 0
    while not stop.value and time.monotonic() < deadline:
        value = (value + 1) & 0xFF
        for start in range(0, n, _VM_CHUNK):
            if stop.value:
                return
            buf[start:start + _VM_CHUNK] = value
            counters[slot] += 1
        for start in range(0, n, _VM_CHUNK):
            if stop.value:
                return
            int(buf[start:start + _VM_CHUNK:CACHE_LINE].sum())
            counters[slot] += 1


def _ping_loop(slot, stop, counters, deadline, fds):
    w, r = fds
    while not stop.value and time.monotonic() < deadline:
        os.write(w, b"x")
        if not os.read(r, 1):
            return
        counters[slot] += 1
    try:
        os.write(w, b"q")
    except OSError:
        pass


def _pong_loop(slot, stop, counters, deadline, fds):
    r, w = fds
    while True:
        d = os.read(r, 1)
        if not d or d == b"q":
            return
        os.write(w, b"x")
        counters[slot] += 1


def _fork_loop(slot, stop, counters, deadline, rate):
    interval = 1.0 / rate
    next_t = time.monotonic()
    while not stop.value and time.monotonic() < deadline:
        pid = os.fork()
        if pid == 0:
            os._exit(0)
        os.waitpid(pid, 0)
        counters[slot] += 1
        next_t += interval
        delay = next_t - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        else:
            next_t = time.monotonic()


def _worker_main(kind, slot, cores, stop, counters, ready, attained, deadline, arg):
    os.sched_setaffinity(0, cores)
    if kind == "vm":
        buf = _vm_alloc(arg)
        attained[slot] = 0 if buf is None else buf.size
        ready[slot] = 1
        if buf is not None:
            _vm_loop(slot, stop, counters, deadline, buf)
        return
    ready[slot] = 1
    if kind == "cpu":
        _cpu_loop(slot, stop, counters, deadline)
    elif kind == "ping":
        _ping_loop(slot, stop, counters, deadline, arg)
    elif kind == "pong":
        _pong_loop(slot, stop, counters, deadline, arg)
    elif kind == "fork":
        _fork_loop(slot, stop, counters, deadline, arg)


# -- supervisor -------------------------------------------------------------


@dataclass
class WorkerInfo:
    kind: str
    slot: int
    process: mp.process.BaseProcess


@dataclass
class StressSummary:
    already_stopped: bool
    workers: list[dict]
    stragglers: list[int]
    elapsed_s: float
    attained: StressProfile

    @property
    def loop_counts(self) -> list[int]:
        return [w["loops"] for w in self.workers]

    def to_dict(self) -> dict:
        return {
            "already_stopped": self.already_stopped,
            "elapsed_s": self.elapsed_s,
            "stragglers": self.stragglers,
            "workers": self.workers,
            "external_command": external_command(self.attained),
        }


@dataclass
class StressHandle:
    profile: StressProfile
    attained: StressProfile
    cores: frozenset[int]
    workers: list[WorkerInfo]
    _stop: object
    _counters: object
    _fds: list[int] = field(default_factory=list)
    started_at: float = field(default_factory=time.monotonic)
    summary: StressSummary | None = None

    @property
    def live(self) -> bool:
        return self.summary is None

    def pids(self) -> list[int]:
        return [w.process.pid for w in self.workers]

    def counts(self) -> list[int]:
        return [int(self._counters[w.slot]) for w in self.workers]

    def affinities(self) -> dict[int, frozenset[int]]:
        """Current CPU mask of every live worker, read from the kernel."""
        out = {}
        for pid in self.pids():
            try:
                out[pid] = frozenset(os.sched_getaffinity(pid))
            except ProcessLookupError:
                pass
        return out

    def wait(self) -> None:
        """Block until the profile duration has elapsed (no-op if unbounded)."""
        if self.profile.duration_s is None:
            return
        remaining = self.started_at + self.profile.duration_s - time.monotonic()
        if remaining > 0:
            time.sleep(remaining)

    def stop(self, grace_s: float = 5.0) -> StressSummary:
        return stop_stress(self, grace_s)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        stop_stress(self)


def start_stress(profile: StressProfile, ready_timeout_s: float = 30.0) -> StressHandle:
    """Start every worker of ``profile`` and confirm each is pinned off the measured core."""
    cores = profile.resolved_cores()
    ctx = mp.get_context("fork")
    n_slots = profile.worker_count
    stop = ctx.RawValue(ctypes.c_bool, False)
    counters = ctx.RawArray(ctypes.c_uint64, max(n_slots, 1))
    ready = ctx.RawArray(ctypes.c_uint8, max(n_slots, 1))
    attained = ctx.RawArray(ctypes.c_uint64, max(n_slots, 1))
    deadline = float("inf") if profile.duration_s is None else time.monotonic() + profile.duration_s

    plan: list[tuple[str, object]] = []
    plan += [("cpu", None)] * profile.cpu_workers
    vm_bytes = 0
    avail = available_memory() if profile.vm_workers else 0
    if profile.vm_workers:
        vm_bytes = int(profile.vm_fraction * avail / profile.vm_workers)
        plan += [("vm", vm_bytes)] * profile.vm_workers
    fds: list[int] = []
    for _ in range(profile.switch_pairs):
        r1, w1 = os.pipe()
        r2, w2 = os.pipe()
        fds += [r1, w1, r2, w2]
        plan += [("ping", (w1, r2)), ("pong", (r1, w2))]
    plan += [("fork", FORK_RATE_CAP)] * profile.fork_workers

    workers: list[WorkerInfo] = []
    saved = os.sched_getaffinity(0) if cores else None
    try:
        if cores:
            # children inherit the mask at fork; they re-assert it on entry
            os.sched_setaffinity(0, cores)
        for slot, (kind, arg) in enumerate(plan):
            proc = ctx.Process(
                target=_worker_main,
                args=(kind, slot, cores, stop, counters, ready, attained, deadline, arg),
                name=f"fcsbench-stress-{kind}-{slot}",
                daemon=True,
            )
            proc.start()
            workers.append(WorkerInfo(kind, slot, proc))
    finally:
        if saved is not None:
            os.sched_setaffinity(0, saved)
        for fd in fds:
            os.close(fd)

    handle = StressHandle(profile, profile, cores, workers, stop, counters)
    t_end = time.monotonic() + ready_timeout_s
    while any(not ready[w.slot] and w.process.is_alive() for w in workers):
        if time.monotonic() > t_end:
            stop_stress(handle)
            raise StressError("stress workers did not come up in time")
        time.sleep(0.005)

    for pid, mask in handle.affinities().items():
        if not mask <= cores or (profile.measurement_core is not None and profile.measurement_core in mask):
            stop_stress(handle)
            raise AffinityViolationError(f"worker {pid} has affinity {sorted(mask)}, allowed {sorted(cores)}")

    vm_workers = [w for w in workers if w.kind == "vm"]
    live_vm = [w for w in vm_workers if attained[w.slot] > 0]
    if vm_workers:
        got = sum(int(attained[w.slot]) for w in live_vm)
        frac = min(max(got / avail, 1e-6), 0.9) if got else profile.vm_fraction
        if len(live_vm) < len(vm_workers) or any(attained[w.slot] < vm_bytes for w in live_vm):
            log.warning(
                "vm stressors reduced: %d of %d workers, %d bytes total",
                len(live_vm), len(vm_workers), got,
            )
            handle.attained = replace(profile, vm_workers=len(live_vm), vm_fraction=frac)
    return handle


def stop_stress(handle: StressHandle, grace_s: float = 5.0) -> StressSummary:
    """Signal, join, then escalate to SIGTERM/SIGKILL.  Idempotent."""
    if handle.summary is not None:
        return replace(handle.summary, already_stopped=True)
    handle._stop.value = True
    t_end = time.monotonic() + grace_s
    for w in handle.workers:
        w.process.join(max(t_end - time.monotonic(), 0.0))
    stragglers = []
    for w in handle.workers:
        if w.process.is_alive():
            stragglers.append(w.process.pid)
            w.process.terminate()
            w.process.join(1.0)
            if w.process.is_alive():
                w.process.kill()
                w.process.join(1.0)
    if stragglers:
        log.warning("stress workers %s ignored the stop flag and were terminated", stragglers)
    workers = [
        {
            "kind": w.kind,
            "slot": w.slot,
            "pid": w.process.pid,
            "loops": int(handle._counters[w.slot]),
            "exitcode": w.process.exitcode,
        }
        for w in handle.workers
    ]
    for w in handle.workers:
        w.process.close()
    handle.summary = StressSummary(
        already_stopped=False,
        workers=workers,
        stragglers=stragglers,
        elapsed_s=time.monotonic() - handle.started_at,
        attained=handle.attained,
    )
    return handle.summary


# -- external tool ----------------------------------------------------------


def _fmt_cores(cores) -> str:
    return ",".join(str(c) for c in sorted(cores))


def external_command(profile: StressProfile) -> str:
    """Equivalent ``stress-ng`` invocation for the profile."""
    args = ["stress-ng"]
    if profile.cpu_workers:
        args += ["--cpu", str(profile.cpu_workers), "--cpu-method", "matrixprod"]
    if profile.vm_workers:
        args += ["--vm", str(profile.vm_workers), "--vm-bytes", f"{profile.vm_fraction * 100:.10g}%"]
    if profile.switch_pairs:
        args += ["--switch", str(profile.switch_pairs)]
    if profile.fork_workers:
        args += ["--fork", str(profile.fork_workers)]
    if profile.allowed_cores is not None:
        args += ["--taskset", _fmt_cores(profile.allowed_cores)]
    if profile.duration_s is not None:
        args += ["--timeout", f"{profile.duration_s:.10g}s"]
    return shlex.join(args)


def _cpu_set(text: str) -> frozenset[int]:
    from .executor import parse_cpu_list

    return frozenset(parse_cpu_list(text))


def parse_external_command(command: str, measurement_core: int | None = None) -> StressProfile:
    """Inverse of :func:`external_command` for the flags it emits."""
    argv = shlex.split(command)
    if not argv or os.path.basename(argv[0]) != "stress-ng":
        raise ValueError(f"not a stress-ng command: {command!r}")
    p = argparse.ArgumentParser(prog="stress-ng", add_help=False)
    p.add_argument("--cpu", type=int, default=0)
    p.add_argument("--cpu-method")
    p.add_argument("--vm", type=int, default=0)
    p.add_argument("--vm-bytes")
    p.add_argument("--switch", type=int, default=0)
    p.add_argument("--fork", type=int, default=0)
    p.add_argument("--taskset")
    p.add_argument("--timeout")
    ns, _ = p.parse_known_args(argv[1:])
    fraction = 0.75
    if ns.vm_bytes:
        if not ns.vm_bytes.endswith("%"):
            raise ValueError("only percentage --vm-bytes values are supported")
        fraction = float(ns.vm_bytes[:-1]) / 100.0
    duration = None
    if ns.timeout:
        duration = float(ns.timeout.rstrip("s"))
    return StressProfile(
        cpu_workers=ns.cpu,
        vm_workers=ns.vm,
        vm_fraction=fraction,
        switch_pairs=ns.switch,
        fork_workers=ns.fork,
        allowed_cores=_cpu_set(ns.taskset) if ns.taskset else None,
        duration_s=duration,
        measurement_core=measurement_core,
    )
