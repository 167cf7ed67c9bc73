"""Periodic real-time execution: thread setup, absolute-deadline loop, samples.

The loop sleeps until ``t0 + k*T`` on the monotonic clock, records the wake
time, runs the payload and records its duration.  Samples go into
preallocated arrays; nothing in the loop appends or builds containers.
"""

from __future__ import annotations

import errno
import os
import platform
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Union

import numpy as np

from . import _linux


class ExecutorError(RuntimeError):
    """Base class for thread-setup and run failures."""


class ConfigurationError(ExecutorError):
    """Invalid request or readback mismatch."""


class PermissionDeniedError(ExecutorError):
    hint = (
        "real-time policies need CAP_SYS_NICE (run as root, or raise "
        "RLIMIT_RTPRIO / `ulimit -r`); memory locking needs CAP_IPC_LOCK"
    )


class PolicyUnsupportedError(ExecutorError):
    """The running kernel does not offer the requested policy."""


class InvalidCoreError(ConfigurationError):
    pass


class ClockFailureError(ExecutorError):
    pass


class PayloadError(ExecutorError):
    """Payload raised mid-run; ``series`` holds the completed iterations."""

    def __init__(self, message: str, series: "SampleSeries"):
        super().__init__(message)
        self.series = series


# -- policies ---------------------------------------------------------------


@dataclass(frozen=True)
class Other:
    nice: int = 0

    def __post_init__(self):
        if not -20 <= self.nice <= 19:
            raise ConfigurationError(f"nice must be in -20..19, got {self.nice}")

    kind = "OTHER"

    @property
    def parameters(self) -> str:
        return f"Nice {self.nice}"


@dataclass(frozen=True)
class Fifo:
    prio: int = 50

    def __post_init__(self):
        _check_prio(self.prio)

    kind = "FIFO"

    @property
    def parameters(self) -> str:
        return f"Priority {self.prio}"


@dataclass(frozen=True)
class RoundRobin:
    prio: int = 50

    def __post_init__(self):
        _check_prio(self.prio)

    kind = "RR"

    @property
    def parameters(self) -> str:
        return f"Priority {self.prio}"


@dataclass(frozen=True)
class Deadline:
    runtime_us: int = 400
    deadline_us: int = 4000
    period_us: int = 4000

    def __post_init__(self):
        if not 0 < self.runtime_us <= self.deadline_us <= self.period_us:
            raise ConfigurationError(
                "deadline policy requires 0 < runtime <= deadline <= period, got "
                f"{self.runtime_us}/{self.deadline_us}/{self.period_us} us"
            )

    kind = "DEADLINE"

    @property
    def parameters(self) -> str:
        return f"R{self.runtime_us}, D{self.deadline_us}"


SchedPolicy = Union[Other, Fifo, RoundRobin, Deadline]
POLICY_TYPES = {"other": Other, "fifo": Fifo, "rr": RoundRobin, "deadline": Deadline}


def _check_prio(prio: int) -> None:
    if not 1 <= prio <= 99:
        raise ConfigurationError(f"priority must be in 1..99, got {prio}")


def policy_to_dict(policy: SchedPolicy) -> dict:
    return {"kind": policy.kind, **asdict(policy)}


def policy_from_dict(d: dict) -> SchedPolicy:
    d = dict(d)
    cls = POLICY_TYPES[d.pop("kind").lower()]
    return cls(**d)


@dataclass(frozen=True)
class TaskSpec:
    """Periodic task {C, T, D, P}; times in microseconds."""

    policy: SchedPolicy = field(default_factory=Other)
    T_us: int = 4000
    D_us: int = 4000
    C_est_us: int | None = None
    core: int | None = None
    iterations: int = 10_000
    memlock: bool = True

    def __post_init__(self):
        if self.T_us <= 0:
            raise ConfigurationError("period must be positive")
        if not 0 < self.D_us <= self.T_us:
            raise ConfigurationError(f"deadline must be in (0, T], got D={self.D_us} T={self.T_us}")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")

    @property
    def period_ns(self) -> int:
        return self.T_us * 1000

    @property
    def deadline_ns(self) -> int:
        return self.D_us * 1000


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class AppliedConfig:
    policy: SchedPolicy
    affinity: frozenset[int] | None
    memlock: bool

    def to_dict(self) -> dict:
        return {
            "policy": policy_to_dict(self.policy),
            "affinity": sorted(self.affinity) if self.affinity is not None else None,
            "memlock": self.memlock,
        }


def online_cpus() -> int:
    return os.cpu_count() or 1


def _raise_for(exc: OSError, policy: SchedPolicy) -> None:
    if exc.errno == errno.EPERM:
        raise PermissionDeniedError(
            f"cannot apply {policy.kind}: {exc.strerror}. {PermissionDeniedError.hint}"
        ) from exc
    if exc.errno in (errno.EINVAL, errno.ENOSYS, errno.EOPNOTSUPP):
        raise PolicyUnsupportedError(
            f"{policy.kind} is not supported by this kernel ({exc.strerror})"
        ) from exc
    if exc.errno == errno.EBUSY and isinstance(policy, Deadline):
        raise PolicyUnsupportedError(
            "SCHED_DEADLINE admission control rejected the reservation "
            f"({exc.strerror}); check bandwidth and cpuset root domains"
        ) from exc
    raise ConfigurationError(str(exc)) from exc


def _apply_policy(policy: SchedPolicy) -> None:
    if isinstance(policy, Deadline):
        _linux.sched_setattr(
            policy.runtime_us * 1000, policy.deadline_us * 1000, policy.period_us * 1000
        )
        return
    if isinstance(policy, Other):
        os.sched_setscheduler(0, os.SCHED_OTHER, os.sched_param(0))
        os.setpriority(os.PRIO_PROCESS, threading.get_native_id(), policy.nice)
        return
    native = os.SCHED_FIFO if isinstance(policy, Fifo) else os.SCHED_RR
    os.sched_setscheduler(0, native, os.sched_param(policy.prio))


def read_policy() -> SchedPolicy:
    """Read the calling thread's scheduling policy back from the kernel."""
    native = os.sched_getscheduler(0)
    if native == _linux.SCHED_DEADLINE:
        attr = _linux.sched_getattr()
        return Deadline(
            attr.sched_runtime // 1000, attr.sched_deadline // 1000, attr.sched_period // 1000
        )
    if native == os.SCHED_FIFO:
        return Fifo(os.sched_getparam(0).sched_priority)
    if native == os.SCHED_RR:
        return RoundRobin(os.sched_getparam(0).sched_priority)
    return Other(os.getpriority(os.PRIO_PROCESS, threading.get_native_id()))


def configure_thread(spec: TaskSpec) -> AppliedConfig:
    """Apply policy, affinity and memory locking to the calling thread.

    Every setting is read back; a mismatch raises instead of returning a
    config that differs from the request.  Affinity is applied before the
    policy except for DEADLINE, whose admission test wants the default mask.
    """
    if not hasattr(os, "sched_setscheduler"):
        raise PolicyUnsupportedError(f"no POSIX scheduling interface on {platform.system()}")
    policy = spec.policy
    if spec.core is not None and not 0 <= spec.core < online_cpus():
        raise InvalidCoreError(
            f"core {spec.core} out of range: {online_cpus()} CPU(s) online"
        )

    def set_affinity():
        try:
            os.sched_setaffinity(0, {spec.core})
        except OSError as exc:
            if exc.errno == errno.EINVAL:
                raise InvalidCoreError(f"core {spec.core} is not usable: {exc.strerror}") from exc
            _raise_for(exc, policy)

    if spec.core is not None and not isinstance(policy, Deadline):
        set_affinity()
    try:
        _apply_policy(policy)
    except OSError as exc:
        _raise_for(exc, policy)
    if spec.core is not None and isinstance(policy, Deadline):
        set_affinity()

    locked = False
    if spec.memlock:
        try:
            _linux.mlockall()
        except OSError as exc:
            if exc.errno in (errno.EPERM, errno.ENOMEM):
                raise PermissionDeniedError(
                    f"mlockall failed: {exc.strerror}. {PermissionDeniedError.hint}"
                ) from exc
            raise ConfigurationError(str(exc)) from exc
        locked = True

    applied = AppliedConfig(
        policy=read_policy(),
        affinity=frozenset(os.sched_getaffinity(0)),
        memlock=locked,
    )
    if applied.policy != policy:
        raise ConfigurationError(f"policy readback {applied.policy} != requested {policy}")
    if spec.core is not None and applied.affinity != {spec.core}:
        raise ConfigurationError(
            f"affinity readback {sorted(applied.affinity)} != requested [{spec.core}]"
        )
    return applied


def release_memlock() -> None:
    _linux.munlockall()


# -- clocks -----------------------------------------------------------------


class ClockSource(Protocol):
    def now_ns(self) -> int: ...

    def sleep_until(self, target_ns: int) -> None: ...


class MonotonicClock:
    """CLOCK_MONOTONIC with absolute clock_nanosleep."""

    def __init__(self):
        try:
            time.clock_gettime_ns(time.CLOCK_MONOTONIC)
            self._sleep = _linux.AbsoluteSleeper()
        except (OSError, AttributeError) as exc:
            raise ClockFailureError(f"monotonic clock unavailable: {exc}") from exc
        self._get = time.clock_gettime_ns
        self._id = time.CLOCK_MONOTONIC

    def now_ns(self) -> int:
        return self._get(self._id)

    def sleep_until(self, target_ns: int) -> None:
        try:
            self._sleep(target_ns)
        except OSError as exc:
            raise ClockFailureError(str(exc)) from exc


class SimulatedClock:
    """Deterministic clock: sleeps land exactly on target plus injected delay.

    ``oversleep_ns`` maps the 0-based sleep call index to extra nanoseconds
    added after the target.  Payloads advance time with :meth:`advance`.
    """

    def __init__(self, start_ns: int = 0, oversleep_ns: dict[int, int] | None = None):
        self.t = start_ns
        self.oversleep_ns = dict(oversleep_ns or {})
        self.sleeps = 0

    def now_ns(self) -> int:
        return self.t

    def sleep_until(self, target_ns: int) -> None:
        extra = self.oversleep_ns.get(self.sleeps, 0)
        self.sleeps += 1
        self.t = max(self.t, target_ns) + extra

    def advance(self, ns: int) -> None:
        self.t += ns


# -- samples ----------------------------------------------------------------


@dataclass(frozen=True)
class LatencySample:
    iteration: int
    scheduled_wake_ns: int
    actual_wake_ns: int
    exec_ns: int
    deadline_missed: bool

    @property
    def latency_ns(self) -> int:
        return self.actual_wake_ns - self.scheduled_wake_ns


@dataclass
class SampleSeries:
    """Column store of one run.  Arrays are int64 nanoseconds."""

    scheduled_wake_ns: np.ndarray
    actual_wake_ns: np.ndarray
    exec_ns: np.ndarray
    period_ns: int
    deadline_ns: int
    skipped_periods: int = 0
    metadata: dict = field(default_factory=dict)
    aborted: bool = False

    @classmethod
    def empty(cls, n: int, period_ns: int, deadline_ns: int, **metadata) -> "SampleSeries":
        return cls(
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            period_ns,
            deadline_ns,
            metadata=dict(metadata),
        )

    def __len__(self) -> int:
        return len(self.scheduled_wake_ns)

    @property
    def latency_ns(self) -> np.ndarray:
        return self.actual_wake_ns - self.scheduled_wake_ns

    @property
    def deadline_missed(self) -> np.ndarray:
        return self.actual_wake_ns + self.exec_ns > self.scheduled_wake_ns + self.deadline_ns

    @property
    def miss_count(self) -> int:
        return int(np.count_nonzero(self.deadline_missed))

    def __getitem__(self, k: int) -> LatencySample:
        s, a, e = (int(self.scheduled_wake_ns[k]), int(self.actual_wake_ns[k]), int(self.exec_ns[k]))
        return LatencySample(k, s, a, e, a + e > s + self.deadline_ns)

    def __iter__(self) -> Iterator[LatencySample]:
        for k in range(len(self)):
            yield self[k]

    def truncated(self, n: int) -> "SampleSeries":
        return SampleSeries(
            self.scheduled_wake_ns[:n].copy(),
            self.actual_wake_ns[:n].copy(),
            self.exec_ns[:n].copy(),
            self.period_ns,
            self.deadline_ns,
            self.skipped_periods,
            dict(self.metadata),
            self.aborted,
        )

    def schedule_intact(self) -> bool:
        """scheduled_wake[k] == scheduled_wake[0] + k*T for every k."""
        if len(self) == 0:
            return True
        expected = self.scheduled_wake_ns[0] + np.arange(len(self), dtype=np.int64) * self.period_ns
        return bool(np.array_equal(self.scheduled_wake_ns, expected))


def run_periodic(
    spec: TaskSpec,
    payload: Callable[[], object],
    clock: ClockSource | None = None,
    start_ns: int | None = None,
) -> SampleSeries:
    """Run ``payload`` ``spec.iterations`` times on an absolute periodic schedule.

    The first wake target is one period after the current clock reading
    unless ``start_ns`` is given.  Overruns never move later targets.
    """
    clock = clock if clock is not None else MonotonicClock()
    n = spec.iterations
    period = spec.period_ns
    series = SampleSeries.empty(
        n, period, spec.deadline_ns, policy=policy_to_dict(spec.policy)
    )
    if n == 0:
        return series
    sched, actual, execd = series.scheduled_wake_ns, series.actual_wake_ns, series.exec_ns
    now = clock.now_ns
    sleep_until = clock.sleep_until
    t0 = now() + period if start_ns is None else start_ns
    skipped = 0

    k = 0
    try:
        while k < n:
            target = t0 + k * period
            sleep_until(target)
            wake = now()
            payload()
            end = now()
            sched[k] = target
            actual[k] = wake
            execd[k] = end - wake
            if wake > target + period:
                skipped += 1
            k += 1
    except ClockFailureError:
        raise
    except Exception as exc:
        partial = series.truncated(k)
        partial.skipped_periods = skipped
        partial.aborted = True
        partial.metadata["error"] = repr(exc)
        raise PayloadError(f"payload failed at iteration {k}: {exc!r}", partial) from exc
    series.skipped_periods = skipped
    return series


# -- environment ------------------------------------------------------------


@dataclass
class EnvReport:
    kernel_release: str
    kernel_version: str
    realtime: bool
    preemption_model: str
    governors: dict[str, str]
    isolated_cpus: list[int]
    rt_runtime_us: int | None
    rt_throttling: str
    online_cpus: int
    machine: str

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def kernel_label(self) -> str:
        return "PREEMPT_RT" if self.realtime else "Standard"


def _read(path: Path) -> str | None:
    try:
        return path.read_text(encoding="ascii", errors="replace").strip()
    except OSError:
        return None


def parse_cpu_list(text: str) -> list[int]:
    """Expand a sysfs CPU list such as ``2-3,6``."""
    cpus: list[int] = []
    for part in text.strip().split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def detect_environment(root: str | os.PathLike = "/") -> EnvReport:
    """Observe kernel/scheduler tuning; never writes anything.

    ``root`` relocates /proc and /sys for tests.
    """
    root = Path(root)
    uname = os.uname()
    release = _read(root / "proc/sys/kernel/osrelease") or uname.release
    version = _read(root / "proc/sys/kernel/version") or uname.version

    rt_flag = _read(root / "sys/kernel/realtime")
    realtime = rt_flag == "1" or "PREEMPT_RT" in version
    if realtime:
        model = "PREEMPT_RT"
    elif "PREEMPT_DYNAMIC" in version:
        model = "PREEMPT_DYNAMIC"
    elif "PREEMPT" in version:
        model = "PREEMPT"
    else:
        model = "unknown"

    cpu_dir = root / "sys/devices/system/cpu"
    n_cpus = os.cpu_count() or 1
    governors = {}
    for cpu in range(n_cpus):
        gov = _read(cpu_dir / f"cpu{cpu}/cpufreq/scaling_governor")
        governors[str(cpu)] = gov or "unknown"

    isolated_text = _read(cpu_dir / "isolated") or ""
    try:
        isolated = parse_cpu_list(isolated_text)
    except ValueError:
        isolated = []

    raw = _read(root / "proc/sys/kernel/sched_rt_runtime_us")
    try:
        rt_runtime = int(raw) if raw is not None else None
    except ValueError:
        rt_runtime = None
    if rt_runtime is None:
        throttling = "unknown"
    elif rt_runtime < 0:
        throttling = "disabled"
    else:
        throttling = "enabled"

    return EnvReport(
        kernel_release=release,
        kernel_version=version,
        realtime=realtime,
        preemption_model=model,
        governors=governors,
        isolated_cpus=isolated,
        rt_runtime_us=rt_runtime,
        rt_throttling=throttling,
        online_cpus=n_cpus,
        machine=platform.machine(),
    )
