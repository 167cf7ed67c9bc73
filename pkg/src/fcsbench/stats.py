"""Latency statistics, derived comparison metrics and report emission.

Stable file interfaces (column names / keys are part of the public contract):

``series.csv``
    ``iteration,scheduled_wake_ns,latency_us,exec_us,missed``
``boxplot.csv``
    ``label,kernel,stress,min_us,q1_us,median_us,q3_us,max_us,whisker_lo_us,whisker_hi_us``
``summary.json``
    ``{"results": [...], "derived": {...}, "env": {...}}`` where each result
    carries a ``stats`` object with the :class:`LatencyStats` field names.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEDULERS = ("OTHER", "FIFO", "RR", "DEADLINE")

TABLE_COLUMNS = (
    "Scheduler",
    "Parameters",
    "Kernel",
    "Stress",
    "Mean (µs)",
    "Median (µs)",
    "Max (µs)",
    "StdDev (µs)",
    "P90 (µs)",
    "P99 (µs)",
)

SERIES_COLUMNS = ("iteration", "scheduled_wake_ns", "latency_us", "exec_us", "missed")
BOXPLOT_COLUMNS = (
    "label", "kernel", "stress", "min_us", "q1_us", "median_us", "q3_us", "max_us",
    "whisker_lo_us", "whisker_hi_us",
)


class EmptySeriesError(ValueError):
    pass


class ReportWriteError(OSError):
    pass


def ns_to_us(samples_ns) -> np.ndarray:
    """Integer microseconds, truncated toward zero."""
    a = np.asarray(samples_ns, dtype=np.int64)
    return np.where(a >= 0, a // 1000, -((-a) // 1000))


def nearest_rank(sorted_values: Sequence, pct: int):
    """The ceil(pct/100 * n)-th smallest value (1-based), no interpolation."""
    n = len(sorted_values)
    rank = max(1, -(-pct * n // 100))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class LatencyStats:
    mean_us: float
    median_us: float
    max_us: float
    stddev_us: float
    p90_us: float
    p99_us: float
    min_us: float
    n: int
    miss_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyStats":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def row(self) -> list[str]:
        return [
            f"{self.mean_us:.2f}",
            f"{self.median_us:.2f}",
            f"{self.max_us:.2f}",
            f"{self.stddev_us:.2f}",
            f"{self.p90_us:.2f}",
            f"{self.p99_us:.2f}",
        ]


def compute_stats(samples_us, deadline_us: float | None = None, exec_us=None) -> LatencyStats:
    """Descriptive statistics of one latency series.

    Integer series take an exact path: mean and population variance are
    computed from integer sums and rounded once.  ``miss_count`` counts
    samples where latency (+ execution time, when given) exceeds
    ``deadline_us``.
    """
    a = np.asarray(samples_us)
    n = a.size
    if n == 0:
        raise EmptySeriesError("cannot compute statistics of an empty series")
    a = a.ravel()
    s = np.sort(a, kind="stable")

    if np.issubdtype(a.dtype, np.integer):
        vals = [int(x) for x in a]
        s1 = sum(vals)
        s2 = sum(x * x for x in vals)
        mean = s1 / n
        var = (n * s2 - s1 * s1) / (n * n)
        as_num = int
    else:
        vals = [float(x) for x in a]
        mean = math.fsum(vals) / n
        var = math.fsum((x - mean) ** 2 for x in vals) / n
        as_num = float

    misses = 0
    if deadline_us is not None:
        budget = a if exec_us is None else a + np.asarray(exec_us).ravel()
        misses = int(np.count_nonzero(budget > deadline_us))

    return LatencyStats(
        mean_us=float(mean),
        median_us=float(as_num(nearest_rank(s, 50))),
        max_us=float(as_num(s[-1])),
        stddev_us=math.sqrt(var),
        p90_us=float(as_num(nearest_rank(s, 90))),
        p99_us=float(as_num(nearest_rank(s, 99))),
        min_us=float(as_num(s[0])),
        n=int(n),
        miss_count=misses,
    )


def improvement_pct(before_us: float, after_us: float) -> float:
    """Relative reduction from ``before`` to ``after`` in percent, one decimal."""
    if not before_us > 0:
        raise ValueError(f"baseline must be positive, got {before_us!r}")
    return round(100.0 * (before_us - after_us) / before_us, 1)


def jitter_fraction(max_latency_us: float, period_us: float) -> float:
    """Worst-case latency as a percentage of the period, one decimal."""
    if not period_us > 0:
        raise ValueError(f"period must be positive, got {period_us!r}")
    return round(100.0 * max_latency_us / period_us, 1)


# -- experiment results -----------------------------------------------------


@dataclass
class ExperimentResult:
    scheduler: str
    parameters: str
    kernel: str
    stress: bool
    stats: LatencyStats | None
    series_path: str | None = None
    config: dict = field(default_factory=dict)
    env: dict | None = None
    warmup_stats: LatencyStats | None = None

    def __post_init__(self):
        self.scheduler = self.scheduler.upper()
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}, expected one of {SCHEDULERS}")

    @property
    def label(self) -> str:
        stress = "stress" if self.stress else "idle"
        return f"{self.scheduler} {self.parameters} {self.kernel} {stress}"

    def to_dict(self) -> dict:
        d = {
            "scheduler": self.scheduler,
            "parameters": self.parameters,
            "kernel": self.kernel,
            "stress": self.stress,
            "stats": self.stats.to_dict() if self.stats else None,
            "series_path": self.series_path,
            "config": self.config,
        }
        if self.warmup_stats is not None:
            d["stats_after_warmup"] = self.warmup_stats.to_dict()
        if self.env is not None:
            d["env"] = self.env
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        stats = d.get("stats")
        warm = d.get("stats_after_warmup")
        return cls(
            scheduler=d["scheduler"],
            parameters=d["parameters"],
            kernel=d["kernel"],
            stress=bool(d["stress"]),
            stats=LatencyStats.from_dict(stats) if stats else None,
            series_path=d.get("series_path"),
            config=d.get("config", {}),
            env=d.get("env"),
            warmup_stats=LatencyStats.from_dict(warm) if warm else None,
        )


_SCHED_ORDER = {s: i for i, s in enumerate(SCHEDULERS)}


def _param_key(parameters: str):
    digits = "".join(ch if ch.isdigit() or ch == "-" else " " for ch in parameters).split()
    nums = []
    for tok in digits:
        try:
            nums.append(int(tok))
        except ValueError:
            pass
    return (parameters.split(" ")[0], [abs(x) for x in nums])


def sort_results(results: Iterable[ExperimentResult]) -> list[ExperimentResult]:
    """Order rows by scheduler, parameters, kernel, then stress."""
    return sorted(
        results,
        key=lambda r: (
            _SCHED_ORDER[r.scheduler],
            _param_key(r.parameters),
            r.kernel != "Standard",
            r.kernel,
            r.stress,
        ),
    )


def format_table(results: Iterable[ExperimentResult]) -> str:
    """Markdown latency table (ten columns); runs without samples show ``-``."""
    lines = [
        "| " + " | ".join(TABLE_COLUMNS) + " |",
        "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|",
    ]
    for r in sort_results(results):
        stats = r.stats.row() if r.stats else ["-"] * 6
        cells = [r.scheduler, r.parameters, r.kernel, "Yes" if r.stress else "No", *stats]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def derived_metrics(results: Sequence[ExperimentResult], period_us: float = 4000) -> dict:
    """Cross-kernel worst-case improvements and jitter-of-period figures."""
    by_key = {}
    for r in results:
        if r.stats is not None:
            by_key[(r.scheduler, r.parameters, r.stress, r.kernel)] = r.stats
    improvements = []
    for (sched, params, stress, kernel), st in sorted(by_key.items()):
        if kernel != "Standard":
            continue
        rt = by_key.get((sched, params, stress, "PREEMPT_RT"))
        if rt is None or st.max_us <= 0:
            continue
        improvements.append(
            {
                "scheduler": sched,
                "parameters": params,
                "stress": stress,
                "max_standard_us": st.max_us,
                "max_preempt_rt_us": rt.max_us,
                "worst_case_improvement_pct": improvement_pct(st.max_us, rt.max_us),
            }
        )
    jitter = [
        {
            "scheduler": sched,
            "parameters": params,
            "stress": stress,
            "kernel": kernel,
            "jitter_pct_of_period": jitter_fraction(st.max_us, period_us),
        }
        for (sched, params, stress, kernel), st in sorted(by_key.items())
    ]
    return {"period_us": period_us, "improvements": improvements, "jitter": jitter}


# -- files ------------------------------------------------------------------


def _wrap_write(path: Path, writer) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(path)
    except OSError as exc:
        raise ReportWriteError(exc.errno, f"cannot write {path}: {exc.strerror or exc}") from exc


def write_series_csv(path: str | os.PathLike, series) -> Path:
    """One row per iteration of a :class:`~fcsbench.executor.SampleSeries`."""
    path = Path(path)
    lat_us = ns_to_us(series.latency_ns)
    exec_us = ns_to_us(series.exec_ns)
    missed = series.deadline_missed

    def write(p):
        with open(p, "w", newline="", encoding="utf-8") as fp:
            w = csv.writer(fp)
            w.writerow(SERIES_COLUMNS)
            for k in range(len(series)):
                w.writerow(
                    [k, int(series.scheduled_wake_ns[k]), int(lat_us[k]), int(exec_us[k]), int(missed[k])]
                )

    _wrap_write(path, write)
    return path


def read_series_csv(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fp:
        rows = list(csv.DictReader(fp))
    return {col: np.array([int(r[col]) for r in rows], dtype=np.int64) for col in SERIES_COLUMNS}


def write_json(path: str | os.PathLike, obj) -> Path:
    path = Path(path)

    def write(p):
        with open(p, "w", encoding="utf-8") as fp:
            json.dump(obj, fp, indent=2, sort_keys=False)
            fp.write("\n")

    _wrap_write(path, write)
    return path


def box_summary(samples_us) -> dict:
    """Quartiles (nearest rank) and 1.5 IQR whiskers clipped to the data."""
    s = np.sort(np.asarray(samples_us).ravel())
    q1, med, q3 = (float(nearest_rank(s, p)) for p in (25, 50, 75))
    iqr = q3 - q1
    inside = s[(s >= q1 - 1.5 * iqr) & (s <= q3 + 1.5 * iqr)]
    return {
        "min_us": float(s[0]),
        "q1_us": q1,
        "median_us": med,
        "q3_us": q3,
        "max_us": float(s[-1]),
        "whisker_lo_us": float(inside[0]),
        "whisker_hi_us": float(inside[-1]),
    }


def series_svg(latency_us, title: str, width: int = 800, height: int = 240) -> str:
    """Minimal SVG polyline of latency versus iteration."""
    y = np.asarray(latency_us, dtype=float)
    pad = 30
    ymax = float(y.max()) if y.size and y.max() > 0 else 1.0
    n = max(len(y) - 1, 1)
    pts = " ".join(
        f"{pad + (width - 2 * pad) * i / n:.1f},{height - pad - (height - 2 * pad) * v / ymax:.1f}"
        for i, v in enumerate(y)
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<text x="{pad}" y="18" font-size="12">{title} (max {ymax:g} us)</text>'
        f'<polyline fill="none" stroke="black" stroke-width="0.5" points="{pts}"/>'
        "</svg>\n"
    )


def render_report(
    results: Sequence[ExperimentResult],
    out_dir: str | os.PathLike,
    env: dict | None = None,
    series: dict | None = None,
    period_us: float = 4000,
) -> dict[str, Path]:
    """Write ``report.md``, ``summary.json``, ``boxplot.csv`` and per-run data.

    ``series`` optionally maps a result label to its latency array in µs;
    when absent, each result's ``series_path`` CSV is read if it exists.
    """
    if not results:
        raise ValueError("render_report needs at least one result")
    out = Path(out_dir)
    paths: dict[str, Path] = {}
    ordered = sort_results(results)

    table = format_table(ordered)
    derived = derived_metrics(ordered, period_us)
    md = ["# Scheduling latency report", "", table]
    if derived["improvements"]:
        md += ["", "## Worst-case improvement (Standard -> PREEMPT_RT)", ""]
        for imp in derived["improvements"]:
            stress = "stress" if imp["stress"] else "idle"
            md.append(
                f"- {imp['scheduler']} {imp['parameters']} ({stress}): "
                f"{imp['max_standard_us']:.0f} -> {imp['max_preempt_rt_us']:.0f} us, "
                f"{imp['worst_case_improvement_pct']:.1f}%"
            )

    def write_md(p):
        p.write_text("\n".join(md) + "\n", encoding="utf-8")

    paths["report"] = out / "report.md"
    _wrap_write(paths["report"], write_md)

    box_rows = []
    for idx, r in enumerate(ordered):
        lat = None
        if series and r.label in series:
            lat = np.asarray(series[r.label])
        elif r.series_path and Path(r.series_path).exists():
            lat = read_series_csv(r.series_path)["latency_us"]
        if lat is None or lat.size == 0:
            continue
        slug = f"{idx:02d}_" + "_".join(r.label.replace(",", "").split()).lower()
        svg = series_svg(lat, r.label)
        svg_path = out / "series" / f"{slug}.svg"
        _wrap_write(svg_path, lambda p, s=svg: p.write_text(s, encoding="utf-8"))
        box_rows.append(
            {"label": f"{r.scheduler} {r.parameters}", "kernel": r.kernel,
             "stress": int(r.stress), **box_summary(lat)}
        )

    def write_box(p):
        with open(p, "w", newline="", encoding="utf-8") as fp:
            w = csv.DictWriter(fp, fieldnames=BOXPLOT_COLUMNS)
            w.writeheader()
            w.writerows(box_rows)

    paths["boxplot"] = out / "boxplot.csv"
    _wrap_write(paths["boxplot"], write_box)

    summary = {"results": [r.to_dict() for r in ordered], "derived": derived, "env": env}
    paths["summary"] = write_json(out / "summary.json", summary)
    return paths


def load_summary(path: str | os.PathLike) -> list[ExperimentResult]:
    with open(path, encoding="utf-8") as fp:
        data = json.load(fp)
    return [ExperimentResult.from_dict(d) for d in data["results"]]
