"""Kernel trace parsing and activation-path reconstruction.

Accepted input is the one-event-per-line text dump written by ``perf script``
and by the ftrace ``trace`` file::

    <comm> <pid> [<cpu>] <secs>.<frac>: [<subsys>:]<event>: <args...>
    <comm>-<pid> [<cpu>] <flags> <secs>.<frac>: <event>: <args...>

Fields are found by shape, not by position: the CPU is the first ``[NNN]``
token, the timestamp is the first following token that reads as a decimal
number ending in ``:``, and the event name is the next token ending in ``:``.
Everything after that is split into ``key=value`` attributes.  Lines
starting with ``#`` are comments.  Anything else is counted as malformed.

Recognised events (aliases in parentheses):

- ``irq_handler_entry``
- ``softirq_raise`` (``irq_softirq_raise``)
- ``sched_wakeup`` (``sched_wakeup_new``); ``comm=`` becomes ``target``
- ``sched_switch``; ``prev_comm``/``next_comm`` become ``prev``/``next``
- ``timer_expire`` (``hrtimer_expire_entry``, ``timer_expire_entry``)

All other events are kept as ``other``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

KINDS = ("irq_handler_entry", "softirq_raise", "sched_wakeup", "sched_switch", "timer_expire", "other")

_ALIASES = {
    "irq_handler_entry": "irq_handler_entry",
    "softirq_raise": "softirq_raise",
    "irq_softirq_raise": "softirq_raise",
    "sched_wakeup": "sched_wakeup",
    "sched_wakeup_new": "sched_wakeup",
    "sched_switch": "sched_switch",
    "timer_expire": "timer_expire",
    "timer_expire_entry": "timer_expire",
    "hrtimer_expire_entry": "timer_expire",
}

HOUSEKEEPING_PREFIXES = ("ktimers", "ksoftirqd", "kworker")

FIXTURE_DIR = Path(__file__).with_name("fixtures")


class TraceError(ValueError):
    pass


class InsufficientDataError(TraceError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    timestamp: int  # ns
    cpu: int
    kind: str
    attrs: dict = field(default_factory=dict, hash=False, compare=True)
    name: str = ""
    comm: str = ""
    pid: int | None = None


@dataclass
class ParseResult:
    events: list[TraceEvent]
    skipped_count: int = 0

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)


def _parse_timestamp(tok: str) -> int | None:
    if not tok.endswith(":"):
        return None
    tok = tok[:-1]
    secs, dot, frac = tok.partition(".")
    if not secs.isdigit() or (dot and not frac.isdigit()) or len(frac) > 9:
        return None
    return int(secs) * 1_000_000_000 + int((frac or "0").ljust(9, "0"))


def _parse_cpu(tok: str) -> int | None:
    if len(tok) >= 3 and tok[0] == "[" and tok[-1] == "]" and tok[1:-1].isdigit():
        return int(tok[1:-1])
    return None


def _split_task(tokens: list[str]) -> tuple[str, int | None]:
    """Task tokens are either ``comm pid`` (perf) or ``comm-pid`` (ftrace)."""
    if not tokens:
        return "", None
    if len(tokens) >= 2 and tokens[-1].isdigit():
        return " ".join(tokens[:-1]), int(tokens[-1])
    joined = " ".join(tokens)
    comm, dash, pid = joined.rpartition("-")
    if dash and pid.isdigit():
        return comm, int(pid)
    return joined, None


def _parse_args(kind: str, rest: list[str]) -> dict:
    attrs: dict[str, str] = {}
    free: list[str] = []
    for tok in rest:
        if tok == "==>":
            continue
        key, eq, val = tok.strip("[]").partition("=")
        if eq and key:
            attrs[key] = val
        else:
            free.append(tok.strip("[]"))
    if kind == "sched_wakeup" and "comm" in attrs:
        attrs["target"] = attrs["comm"]
    elif kind == "sched_switch":
        if "prev_comm" in attrs:
            attrs["prev"] = attrs["prev_comm"]
        if "next_comm" in attrs:
            attrs["next"] = attrs["next_comm"]
    elif kind == "softirq_raise":
        vec = attrs.get("action") or attrs.get("vec")
        if vec is not None:
            attrs["vector"] = vec.strip("[]")
    if free:
        attrs["text"] = " ".join(free)
    return attrs


def parse_line(line: str) -> TraceEvent | None:
    """One event, or None when the line does not have the dump shape."""
    tokens = line.split()
    cpu_idx = None
    for i, tok in enumerate(tokens):
        if _parse_cpu(tok) is not None:
            cpu_idx = i
            break
    if cpu_idx is None:
        return None
    ts = None
    ts_idx = None
    for j in range(cpu_idx + 1, min(cpu_idx + 4, len(tokens))):
        ts = _parse_timestamp(tokens[j])
        if ts is not None:
            ts_idx = j
            break
    if ts_idx is None or ts_idx + 1 >= len(tokens):
        return None
    ev_tok = tokens[ts_idx + 1]
    if not ev_tok.endswith(":") or len(ev_tok) < 2:
        return None
    name = ev_tok[:-1].rsplit(":", 1)[-1]
    if not name:
        return None
    kind = _ALIASES.get(name, "other")
    comm, pid = _split_task(tokens[:cpu_idx])
    attrs = _parse_args(kind, tokens[ts_idx + 2:])
    return TraceEvent(
        timestamp=ts, cpu=_parse_cpu(tokens[cpu_idx]), kind=kind, attrs=attrs,
        name=name, comm=comm, pid=pid,
    )


def parse_trace(stream: IO[str] | IO[bytes] | Iterable[str] | str) -> ParseResult:
    """Parse a text dump; malformed lines are counted in ``skipped_count``.

    ``stream`` may be a file object (text or binary), an iterable of lines or
    a whole dump as one string.  Output is stably sorted by timestamp.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    events: list[TraceEvent] = []
    skipped = 0
    for raw in stream:
        if isinstance(raw, (bytes, bytearray)):
            raw = raw.decode("utf-8", errors="replace")
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ev = parse_line(line)
        except (ValueError, OverflowError):
            ev = None
        if ev is None:
            skipped += 1
        else:
            events.append(ev)
    events.sort(key=lambda e: e.timestamp)
    return ParseResult(events, skipped)


def parse_trace_file(path: str | os.PathLike) -> ParseResult:
    with open(path, "rb") as fp:
        return parse_trace(fp)


# -- activation chains ------------------------------------------------------


class ActivationPath(str, enum.Enum):
    DIRECT = "Direct"
    DEFERRED = "Deferred"


def base_thread_name(name: str) -> str:
    """``ktimers/2`` -> ``ktimers``, ``kworker/u8:2`` -> ``kworker``."""
    head, slash, tail = name.partition("/")
    if slash and (tail[:1].isdigit() or is_housekeeping(head)):
        return head
    return name


def is_housekeeping(name: str) -> bool:
    return name.startswith(HOUSEKEEPING_PREFIXES)


@dataclass
class ActivationRecord:
    irq_time: int
    exec_begin_time: int | None
    path: ActivationPath | None
    intermediaries: list[str] = field(default_factory=list)
    context_switches: int = 0
    cpu: int = 0
    softirq_raised: bool = False
    chain: list[tuple[int, str]] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.exec_begin_time is not None

    @property
    def wakeup_latency_us(self) -> float | None:
        if self.exec_begin_time is None:
            return None
        return (self.exec_begin_time - self.irq_time) / 1000.0

    def to_dict(self) -> dict:
        return {
            "cpu": self.cpu,
            "irq_time_ns": self.irq_time,
            "exec_begin_time_ns": self.exec_begin_time,
            "wakeup_latency_us": self.wakeup_latency_us,
            "path": self.path.value if self.path else "incomplete",
            "intermediaries": list(self.intermediaries),
            "context_switches": self.context_switches,
            "softirq_raised": self.softirq_raised,
        }


def _describe(ev: TraceEvent) -> str:
    if ev.kind == "sched_wakeup":
        return f"sched_wakeup (target: {ev.attrs.get('target', '?')})"
    if ev.kind == "sched_switch":
        return f"sched_switch (-> {ev.attrs.get('next', '?')})"
    if ev.kind == "softirq_raise":
        return f"softirq_raise ({ev.attrs.get('vector', '?')})"
    if ev.kind == "timer_expire":
        return f"timer_expire ({ev.comm})"
    return ev.name or ev.kind


def classify_activations(events: Sequence[TraceEvent], task_name: str) -> list[ActivationRecord]:
    """Reconstruct the IRQ -> task activation chain for every IRQ.

    A chain starts at an ``irq_handler_entry`` and ends at the next IRQ on
    the same CPU.  Execution begins at the first event logged in the task's
    own context after it is switched in, or at the switch itself when no
    such event exists.  A chain whose wake-up of ``task_name`` is preceded by
    the wake-up or switch-in of a housekeeping thread (ktimers, ksoftirqd,
    kworker) is Deferred, with those threads as intermediaries; otherwise it
    is Direct.  IRQs without a switch-in of the task yield incomplete records.
    """
    by_cpu: dict[int, list[TraceEvent]] = {}
    for ev in events:
        by_cpu.setdefault(ev.cpu, []).append(ev)

    records: list[ActivationRecord] = []
    for cpu, evs in by_cpu.items():
        irq_idx = [i for i, e in enumerate(evs) if e.kind == "irq_handler_entry"]
        for n, start in enumerate(irq_idx):
            stop = irq_idx[n + 1] if n + 1 < len(irq_idx) else len(evs)
            records.append(_reconstruct(evs[start:stop], task_name, cpu))
    records.sort(key=lambda r: (r.irq_time, r.cpu))
    return records


def _reconstruct(window: list[TraceEvent], task: str, cpu: int) -> ActivationRecord:
    irq = window[0]
    intermediaries: list[str] = []
    softirq = False
    woken = False
    switches = 0
    switch_in = None
    begin = None
    chain: list[tuple[int, str]] = [(irq.timestamp, _describe(irq))]

    for ev in window[1:]:
        if switch_in is not None:
            if ev.comm == task or (ev.kind == "sched_switch" and ev.attrs.get("prev") == task):
                if ev.comm == task:
                    begin = ev
                break
            continue
        chain.append((ev.timestamp, _describe(ev)))
        if ev.kind == "softirq_raise":
            softirq = True
        elif ev.kind == "sched_wakeup":
            target = ev.attrs.get("target", "")
            if target == task:
                woken = True
            elif not woken and is_housekeeping(target):
                _add(intermediaries, target)
        elif ev.kind == "sched_switch":
            switches += 1
            nxt = ev.attrs.get("next", "")
            if nxt == task:
                switch_in = ev
            elif not woken and is_housekeeping(nxt):
                _add(intermediaries, nxt)

    if switch_in is None:
        return ActivationRecord(irq.timestamp, None, None, intermediaries, switches, cpu, softirq, chain)
    if begin is None:
        begin = switch_in
    else:
        chain.append((begin.timestamp, "task execution begins"))
    path = ActivationPath.DEFERRED if intermediaries else ActivationPath.DIRECT
    return ActivationRecord(
        irq.timestamp, begin.timestamp, path, intermediaries, switches, cpu, softirq, chain
    )


def _add(names: list[str], name: str) -> None:
    base = base_thread_name(name)
    if base not in names:
        names.append(base)


def execution_spans(events: Sequence[TraceEvent], task_name: str) -> list[float]:
    """Durations in µs from each switch-in of the task to its switch-out."""
    spans = []
    running: dict[int, int] = {}
    for ev in events:
        if ev.kind != "sched_switch":
            continue
        if ev.attrs.get("prev") == task_name and ev.cpu in running:
            spans.append((ev.timestamp - running.pop(ev.cpu)) / 1000.0)
        if ev.attrs.get("next") == task_name:
            running[ev.cpu] = ev.timestamp
    return spans


@dataclass(frozen=True)
class DilationReport:
    exec_time_a_us: float
    exec_time_b_us: float
    ratio: float

    def __str__(self) -> str:
        return (
            f"median execution {self.exec_time_a_us:g} us -> {self.exec_time_b_us:g} us "
            f"({self.ratio:.1f}x)"
        )


def _median(values: Sequence[float]) -> float:
    s = sorted(values)
    mid = len(s) // 2
    return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2.0


def exec_dilation(spans_a: Sequence[float], spans_b: Sequence[float]) -> DilationReport:
    """Median execution span of ``b`` relative to ``a``."""
    if not spans_a or not spans_b:
        raise InsufficientDataError("both sides need at least one execution span")
    a, b = _median(spans_a), _median(spans_b)
    if a <= 0:
        raise InsufficientDataError("median execution span of the baseline side is zero")
    return DilationReport(a, b, b / a)


def summarize(records: Sequence[ActivationRecord]) -> dict:
    """Per-path counts and wake-up latency medians."""
    out: dict = {"total": len(records), "incomplete": sum(1 for r in records if not r.complete)}
    for path in ActivationPath:
        lat = [r.wakeup_latency_us for r in records if r.path is path]
        out[path.value] = {
            "count": len(lat),
            "median_wakeup_us": statistics.median(lat) if lat else None,
            "max_wakeup_us": max(lat) if lat else None,
        }
    return out


def summary_line(summary: dict) -> str:
    parts = []
    for path in ActivationPath:
        med = summary[path.value]["median_wakeup_us"]
        parts.append(f"{path.value}: {med:g} µs" if med is not None else f"{path.value}: -")
    return "; ".join(parts)


def write_records_csv(path: str | os.PathLike, records: Sequence[ActivationRecord]) -> None:
    cols = ["cpu", "irq_time_ns", "exec_begin_time_ns", "wakeup_latency_us", "path",
            "intermediaries", "context_switches", "softirq_raised"]
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.DictWriter(fp, fieldnames=cols)
        w.writeheader()
        for r in records:
            d = r.to_dict()
            d["intermediaries"] = ";".join(d["intermediaries"])
            w.writerow(d)


def write_records_json(path: str | os.PathLike, records: Sequence[ActivationRecord], summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump({"summary": summary, "records": [r.to_dict() for r in records]}, fp, indent=2)
        fp.write("\n")


def fixture_path(name: str) -> Path:
    """Bundled trace dumps: ``activation_direct``, ``activation_deferred``, ``activation_pair``."""
    p = FIXTURE_DIR / f"{name}.txt"
    if not p.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return p
