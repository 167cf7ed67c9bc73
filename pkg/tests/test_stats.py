import csv
import json
import math
import random
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcsbench.executor import SimulatedClock, TaskSpec, run_periodic
from fcsbench.stats import (
    BOXPLOT_COLUMNS,
    SERIES_COLUMNS,
    TABLE_COLUMNS,
    EmptySeriesError,
    ExperimentResult,
    LatencyStats,
    ReportWriteError,
    box_summary,
    compute_stats,
    derived_metrics,
    format_table,
    improvement_pct,
    jitter_fraction,
    load_summary,
    ns_to_us,
    read_series_csv,
    render_report,
    write_series_csv,
)


def naive_stats(xs):
    """Reference: full sort, textbook formulas, exact rational arithmetic."""
    from fractions import Fraction

    s = sorted(xs)
    n = len(s)

    def rank(q):
        return s[max(1, math.ceil(Fraction(q, 100) * n)) - 1]

    mean = Fraction(sum(s), n)
    var = sum((Fraction(x) - mean) ** 2 for x in s) / n
    return {
        "mean_us": float(mean),
        "median_us": float(rank(50)),
        "max_us": float(s[-1]),
        "min_us": float(s[0]),
        "stddev_us": math.sqrt(var),
        "p90_us": float(rank(90)),
        "p99_us": float(rank(99)),
        "n": n,
    }


def matches_oracle(xs):
    got = compute_stats(np.array(xs, dtype=np.int64)).to_dict()
    want = naive_stats(xs)
    return all(got[k] == want[k] for k in want), got, want


class TestConversion:
    def test_truncation_examples(self):
        assert ns_to_us([1999]).tolist() == [1]
        assert ns_to_us([0]).tolist() == [0]
        assert ns_to_us([3999, 4000, 4001]).tolist() == [3, 4, 4]

    def test_negative_truncates_toward_zero(self):
        assert ns_to_us([-1999]).tolist() == [-1]


class TestComputeStats:
    def test_uniform_ranks(self):
        s = compute_stats(np.arange(1, 101))
        assert (s.p90_us, s.p99_us, s.median_us, s.max_us) == (90, 99, 50, 100)

    def test_constant(self):
        s = compute_stats([7, 7, 7])
        assert s.mean_us == 7 and s.stddev_us == 0

    def test_single_sample(self):
        s = compute_stats([42])
        assert s.median_us == s.p99_us == s.max_us == s.min_us == 42
        assert s.n == 1

    def test_empty_raises(self):
        with pytest.raises(EmptySeriesError):
            compute_stats([])

    def test_float_path(self):
        s = compute_stats([1.5, 2.5, 3.5])
        assert s.mean_us == 2.5
        assert s.stddev_us == pytest.approx(statistics.pstdev([1.5, 2.5, 3.5]))

    def test_miss_count_uses_exec_budget(self):
        lat = np.array([0, 100, 3500, 3900])
        exe = np.array([50, 50, 50, 200])
        assert compute_stats(lat, deadline_us=4000).miss_count == 0
        assert compute_stats(lat, deadline_us=4000, exec_us=exe).miss_count == 1

    def test_large_random_series_matches_oracle(self):
        rng = np.random.default_rng(11)
        xs = rng.integers(0, 10_000, size=10_000).tolist()
        ok, got, want = matches_oracle(xs)
        assert ok, (got, want)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=2_000_000), min_size=1, max_size=300))
    def test_oracle_property(self, xs):
        ok, got, want = matches_oracle(xs)
        assert ok, (got, want)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=10**6), min_size=1, max_size=200), st.randoms())
    def test_permutation_invariance(self, xs, rnd):
        shuffled = list(xs)
        rnd.shuffle(shuffled)
        assert compute_stats(xs) == compute_stats(shuffled)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=10**7), min_size=1, max_size=200))
    def test_order_statistic_sandwich(self, xs):
        s = compute_stats(xs)
        assert s.min_us <= s.median_us <= s.p90_us <= s.p99_us <= s.max_us
        assert s.stddev_us >= 0 and s.n > 0
        assert s.min_us <= s.mean_us <= s.max_us


class TestDerived:
    def test_improvement_examples(self):
        assert improvement_pct(9424, 3635) == 61.4
        assert improvement_pct(1848, 224) == 87.9
        assert improvement_pct(500, 500) == 0.0

    @pytest.mark.parametrize("before", [0, -1])
    def test_improvement_rejects_nonpositive(self, before):
        with pytest.raises(ValueError):
            improvement_pct(before, 10)

    def test_jitter_examples(self):
        assert jitter_fraction(224, 4000) == 5.6
        assert jitter_fraction(20, 4000) == 0.5
        assert jitter_fraction(0, 4000) == 0.0

    def test_derived_pairs_kernels(self):
        std = ExperimentResult("FIFO", "Priority 99", "Standard", True, compute_stats([100, 1848]))
        rt = ExperimentResult("FIFO", "Priority 99", "PREEMPT_RT", True, compute_stats([25, 224]))
        d = derived_metrics([rt, std])
        assert d["improvements"][0]["worst_case_improvement_pct"] == 87.9
        jit = {j["kernel"]: j["jitter_pct_of_period"] for j in d["jitter"]}
        assert jit["PREEMPT_RT"] == 5.6


def reference_row():
    stats = LatencyStats(
        mean_us=31.33, median_us=25.0, max_us=224.0, stddev_us=21.61,
        p90_us=50.0, p99_us=130.0, min_us=3.0, n=10_000,
    )
    return ExperimentResult("FIFO", "Priority 99", "PREEMPT_RT", True, stats)


def full_matrix(kernel, rng):
    params = {
        "OTHER": ["Nice 0", "Nice -19"],
        "FIFO": ["Priority 50", "Priority 99"],
        "RR": ["Priority 50", "Priority 99"],
        "DEADLINE": ["R400, D4000", "R800, D4000"],
    }
    out = []
    for sched, ps in params.items():
        for p in ps:
            for stress in (False, True):
                out.append(ExperimentResult(sched, p, kernel, stress, compute_stats(rng.integers(1, 900, 50))))
    return out


class TestReport:
    def test_table_columns_exact(self):
        header = format_table([reference_row()]).splitlines()[0]
        assert [c.strip() for c in header.strip("|").split("|")] == list(TABLE_COLUMNS)

    def test_single_run_one_row(self, tmp_path):
        r = ExperimentResult("FIFO", "Priority 50", "Standard", False, compute_stats([10, 20, 30]))
        render_report([r], tmp_path)
        rows = [ln for ln in (tmp_path / "report.md").read_text().splitlines() if ln.startswith("| FIFO")]
        assert len(rows) == 1
        cells = [c.strip() for c in rows[0].strip("|").split("|")]
        assert len(cells) == 10 and all(c != "-" for c in cells[4:])

    def test_reference_row_formatting(self):
        table = format_table([reference_row()])
        assert "| FIFO | Priority 99 | PREEMPT_RT | Yes | 31.33 | 25.00 | 224.00 | 21.61 | 50.00 | 130.00 |" in table

    def test_two_kernels_give_32_rows(self, tmp_path):
        rng = np.random.default_rng(5)
        results = full_matrix("Standard", rng) + full_matrix("PREEMPT_RT", rng)
        render_report(results, tmp_path)
        body = [ln for ln in (tmp_path / "report.md").read_text().splitlines()
                if ln.startswith("| ") and not ln.startswith("| Scheduler")]
        assert len(body) == 32
        assert body[0].startswith("| OTHER | Nice 0 | Standard | No")
        assert body[-1].startswith("| DEADLINE | R800, D4000 | PREEMPT_RT | Yes")

    def test_summary_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        results = full_matrix("Standard", rng)
        results[0].warmup_stats = compute_stats([1, 2, 3])
        render_report(results, tmp_path, env={"kernel_release": "x"})
        back = {r.label: r for r in load_summary(tmp_path / "summary.json")}
        for r in results:
            assert back[r.label].stats == r.stats
        assert back[results[0].label].warmup_stats == results[0].warmup_stats
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["env"] == {"kernel_release": "x"}
        assert set(summary) == {"results", "derived", "env"}

    def test_series_and_boxplot_files(self, tmp_path):
        r = ExperimentResult("RR", "Priority 50", "Standard", False, compute_stats([1, 2, 3, 50]))
        paths = render_report([r], tmp_path, series={r.label: [1, 2, 3, 50]})
        svgs = list((tmp_path / "series").glob("*.svg"))
        assert len(svgs) == 1 and svgs[0].read_text().startswith("<svg")
        with open(paths["boxplot"], newline="") as fp:
            rows = list(csv.DictReader(fp))
        assert tuple(rows[0]) == BOXPLOT_COLUMNS
        assert float(rows[0]["max_us"]) == 50

    def test_empty_input_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            render_report([], tmp_path)

    def test_write_failure_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ReportWriteError, match="file"):
            render_report([reference_row()], blocker / "sub")

    def test_unknown_scheduler_rejected(self):
        with pytest.raises(ValueError):
            ExperimentResult("EDF", "x", "Standard", False, None)


class TestSeriesCsv:
    def test_columns_and_values(self, tmp_path):
        clock = SimulatedClock(oversleep_ns={1: 2_500_999})
        s = run_periodic(TaskSpec(iterations=3, T_us=4000, D_us=2000), lambda: clock.advance(10_000), clock,
                         start_ns=0)
        path = write_series_csv(tmp_path / "series.csv", s)
        with open(path, newline="") as fp:
            assert next(csv.reader(fp)) == list(SERIES_COLUMNS)
        data = read_series_csv(path)
        assert data["iteration"].tolist() == [0, 1, 2]
        assert data["latency_us"].tolist() == [0, 2500, 0]
        assert data["exec_us"].tolist() == [10, 10, 10]
        assert data["missed"].tolist() == [0, 1, 0]

    def test_header_only_for_empty_series(self, tmp_path):
        s = run_periodic(TaskSpec(iterations=0), lambda: None, SimulatedClock())
        path = write_series_csv(tmp_path / "s.csv", s)
        assert path.read_text().strip() == ",".join(SERIES_COLUMNS)


def test_box_summary_whiskers():
    b = box_summary(list(range(1, 21)) + [1000])
    assert b["max_us"] == 1000 and b["whisker_hi_us"] == 20
    assert b["q1_us"] <= b["median_us"] <= b["q3_us"]


def test_random_module_oracle_smoke():
    r = random.Random(1)
    xs = [r.randrange(0, 5000) for _ in range(999)]
    s = compute_stats(xs)
    assert s.mean_us == pytest.approx(statistics.fmean(xs), rel=1e-15)
    assert s.stddev_us == pytest.approx(statistics.pstdev(xs), rel=1e-12)
