"""Thin ctypes bindings for the Linux calls the stdlib does not expose."""

from __future__ import annotations

import ctypes
import ctypes.util
import errno
import os
import platform

SCHED_DEADLINE = 6
CLOCK_MONOTONIC = 1
TIMER_ABSTIME = 1
MCL_CURRENT = 1
MCL_FUTURE = 2

# (sched_setattr, sched_getattr)
_SYSCALLS = {
    "x86_64": (314, 315),
    "aarch64": (274, 275),
    "arm64": (274, 275),
    "riscv64": (274, 275),
    "i386": (351, 352),
    "i686": (351, 352),
    "armv7l": (380, 381),
    "armv6l": (380, 381),
}

_libc = None


def libc():
    global _libc
    if _libc is None:
        name = ctypes.util.find_library("c") or "libc.so.6"
        _libc = ctypes.CDLL(name, use_errno=True)
    return _libc


class Timespec(ctypes.Structure):
    _fields_ = [("tv_sec", ctypes.c_long), ("tv_nsec", ctypes.c_long)]


class SchedAttr(ctypes.Structure):
    _fields_ = [
        ("size", ctypes.c_uint32),
        ("sched_policy", ctypes.c_uint32),
        ("sched_flags", ctypes.c_uint64),
        ("sched_nice", ctypes.c_int32),
        ("sched_priority", ctypes.c_uint32),
        ("sched_runtime", ctypes.c_uint64),
        ("sched_deadline", ctypes.c_uint64),
        ("sched_period", ctypes.c_uint64),
    ]


def _oserror(err: int, what: str) -> OSError:
    return OSError(err, f"{what}: {os.strerror(err)}")


def syscall_numbers() -> tuple[int, int] | None:
    return _SYSCALLS.get(platform.machine())


def sched_setattr(runtime_ns: int, deadline_ns: int, period_ns: int, tid: int = 0) -> None:
    nums = syscall_numbers()
    if nums is None:
        raise _oserror(errno.ENOSYS, "sched_setattr")
    attr = SchedAttr(
        size=ctypes.sizeof(SchedAttr),
        sched_policy=SCHED_DEADLINE,
        sched_runtime=runtime_ns,
        sched_deadline=deadline_ns,
        sched_period=period_ns,
    )
    lc = libc()
    if lc.syscall(nums[0], tid, ctypes.byref(attr), 0) != 0:
        raise _oserror(ctypes.get_errno(), "sched_setattr")


def sched_getattr(tid: int = 0) -> SchedAttr:
    nums = syscall_numbers()
    if nums is None:
        raise _oserror(errno.ENOSYS, "sched_getattr")
    attr = SchedAttr()
    lc = libc()
    if lc.syscall(nums[1], tid, ctypes.byref(attr), ctypes.sizeof(SchedAttr), 0) != 0:
        raise _oserror(ctypes.get_errno(), "sched_getattr")
    return attr


def mlockall() -> None:
    if libc().mlockall(MCL_CURRENT | MCL_FUTURE) != 0:
        raise _oserror(ctypes.get_errno(), "mlockall")


def munlockall() -> None:
    if libc().munlockall() != 0:
        raise _oserror(ctypes.get_errno(), "munlockall")


def locked_kb() -> int | None:
    """VmLck of this process in kB, None when /proc is unavailable."""
    try:
        with open("/proc/self/status", encoding="ascii") as fp:
            for line in fp:
                if line.startswith("VmLck:"):
                    return int(line.split()[1])
    except OSError:
        return None
    return None


class AbsoluteSleeper:
    """clock_nanosleep(CLOCK_MONOTONIC, TIMER_ABSTIME) with a reused timespec."""

    def __init__(self):
        self._ts = Timespec()
        self._ref = ctypes.byref(self._ts)
        self._sleep = libc().clock_nanosleep

    def __call__(self, target_ns: int) -> None:
        ts = self._ts
        ts.tv_sec = target_ns // 1_000_000_000
        ts.tv_nsec = target_ns % 1_000_000_000
        while True:
            rc = self._sleep(CLOCK_MONOTONIC, TIMER_ABSTIME, self._ref, None)
            if rc == 0:
                return
            if rc != errno.EINTR:
                raise _oserror(rc, "clock_nanosleep")
