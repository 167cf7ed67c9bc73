import io
import json
import statistics
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcsbench.trace import (
    ActivationPath,
    InsufficientDataError,
    base_thread_name,
    classify_activations,
    exec_dilation,
    execution_spans,
    fixture_path,
    is_housekeeping,
    parse_line,
    parse_trace,
    parse_trace_file,
    summarize,
    summary_line,
    write_records_csv,
    write_records_json,
)

DATA = Path(__file__).parent / "data"

WAKE = "         swapper     0 [002] 1000.000002: sched:sched_wakeup: comm=fcs pid=4242 prio=120 target_cpu=002"
IRQ = "         swapper     0 [002] 1000.000000: irq:irq_handler_entry: irq=11 name=arch_timer"
SWITCH = (
    "         swapper     0 [002] 1000.000004: sched:sched_switch: prev_comm=swapper/2 prev_pid=0 "
    "prev_prio=120 prev_state=R ==> next_comm=fcs next_pid=4242 next_prio=120"
)


def records_of(name):
    return classify_activations(parse_trace_file(fixture_path(name)).events, "fcs")


class TestParse:
    def test_wakeup_line(self):
        ev = parse_line(WAKE)
        assert ev.kind == "sched_wakeup" and ev.attrs["target"] == "fcs"
        assert ev.timestamp == 1000_000_002_000 and ev.cpu == 2
        assert ev.comm == "swapper" and ev.pid == 0

    def test_switch_line(self):
        ev = parse_line(SWITCH)
        assert ev.kind == "sched_switch"
        assert ev.attrs["prev"] == "swapper/2" and ev.attrs["next"] == "fcs"

    def test_softirq_vector(self):
        ev = parse_line("swapper 0 [002] 1.000005: irq:softirq_raise: vec=8 [action=HRTIMER]")
        assert ev.kind == "softirq_raise" and ev.attrs["vector"] == "HRTIMER"

    def test_ftrace_text_format(self):
        ev = parse_line("  <idle>-0  [003] d.h1. 10.013000: irq_handler_entry: irq=11 name=arch_timer")
        assert ev.kind == "irq_handler_entry" and ev.comm == "<idle>" and ev.pid == 0 and ev.cpu == 3

    def test_aliases_and_other(self):
        assert parse_line("k 1 [000] 1.0: timer:hrtimer_expire_entry: hrtimer=0x1").kind == "timer_expire"
        assert parse_line("k 1 [000] 1.0: sched:sched_wakeup_new: comm=x pid=2").kind == "sched_wakeup"
        ev = parse_line("k 1 [000] 1.0: power:cpu_idle: state=1")
        assert ev.kind == "other" and ev.name == "cpu_idle"

    def test_empty(self):
        r = parse_trace("")
        assert r.events == [] and r.skipped_count == 0

    def test_three_good_two_garbage(self):
        text = "\n".join([IRQ, "garbage here", WAKE, "[002] 12: nope", SWITCH])
        r = parse_trace(text)
        assert len(r) == 3 and r.skipped_count == 2

    def test_comments_ignored(self):
        assert parse_trace("# header\n" + IRQ).skipped_count == 0

    def test_binary_stream_and_sorting(self):
        blob = "\n".join([SWITCH, IRQ, WAKE]).encode()
        r = parse_trace(io.BytesIO(blob))
        assert [e.kind for e in r] == ["irq_handler_entry", "sched_wakeup", "sched_switch"]

    def test_unreadable_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            parse_trace_file(tmp_path / "missing.txt")

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=2000))
    def test_totality_on_arbitrary_bytes(self, blob):
        r = parse_trace(io.BytesIO(blob))
        ts = [e.timestamp for e in r]
        assert ts == sorted(ts)
        assert all(t >= 0 for t in ts)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 999_999), st.integers(0, 7)), max_size=60),
           st.lists(st.text(max_size=40), max_size=10))
    def test_order_and_count(self, stamps, junk):
        lines = [f"x 1 [{c:03d}] {s}.{f:06d}: sched:sched_wakeup: comm=fcs pid=1" for s, f, c in stamps]
        r = parse_trace(lines + junk)
        ts = [e.timestamp for e in r]
        assert ts == sorted(ts)
        assert len(r) >= len(lines)
        assert sorted(s * 10**9 + f * 1000 for s, f, _ in stamps) == sorted(
            e.timestamp for e in r if e.kind == "sched_wakeup" and e.comm == "x"
        )


class TestFixtures:
    def test_direct(self):
        (rec,) = records_of("activation_direct")
        assert rec.path is ActivationPath.DIRECT
        assert rec.wakeup_latency_us == 7.0
        assert rec.intermediaries == []
        assert rec.context_switches == 1

    def test_deferred(self):
        (rec,) = records_of("activation_deferred")
        assert rec.path is ActivationPath.DEFERRED
        assert rec.wakeup_latency_us == 117.0
        assert rec.intermediaries == ["ktimers"]
        assert rec.context_switches >= 2
        assert rec.softirq_raised

    def test_chain_offsets_reproduced(self):
        (rec,) = records_of("activation_deferred")
        offsets = [(t - rec.irq_time) // 1000 for t, _ in rec.chain]
        assert offsets == [0, 5, 17, 54, 92, 93, 117]

    def test_combined_summary(self):
        recs = records_of("activation_pair")
        assert summary_line(summarize(recs)) == "Direct: 7 µs; Deferred: 117 µs"

    def test_unknown_fixture(self):
        with pytest.raises(FileNotFoundError):
            fixture_path("nope")


MIXED_EXPECTED = [
    (1, "Direct", 9.0, [], 1),
    (3, "Direct", 6.0, [], 1),
    (1, "Deferred", 45.0, ["ksoftirqd"], 2),
    (3, "Deferred", 61.0, ["kworker"], 2),
    (1, None, None, [], 0),
    (3, "Deferred", 92.0, ["ktimers"], 2),
    (1, "Direct", 21.0, [], 2),
    (3, "Direct", 5.0, [], 1),
    (1, "Deferred", 81.0, ["ktimers", "ksoftirqd"], 2),
    (3, "Direct", 15.0, [], 1),
]


@pytest.fixture(scope="module")
def mixed():
    parsed = parse_trace_file(DATA / "mixed_chains.txt")
    assert parsed.skipped_count == 2
    return classify_activations(parsed.events, "fcs")


class TestClassification:
    def test_hand_labels(self, mixed):
        got = [
            (r.cpu, r.path.value if r.path else None, r.wakeup_latency_us, r.intermediaries, r.context_switches)
            for r in mixed
        ]
        assert got == MIXED_EXPECTED

    def test_soundness(self, mixed):
        for r in mixed:
            if r.complete:
                assert (r.path is ActivationPath.DEFERRED) == bool(r.intermediaries)
                assert r.exec_begin_time >= r.irq_time

    def test_latency_additivity(self, mixed):
        for r in records_of("activation_pair") + mixed:
            if not r.complete:
                continue
            stamps = [t for t, _ in r.chain]
            deltas = sum((b - a) / 1000 for a, b in zip(stamps, stamps[1:]))
            assert abs(deltas - r.wakeup_latency_us) <= 1.0

    def test_irq_without_activation_is_incomplete(self):
        recs = classify_activations(parse_trace(IRQ + "\n" + WAKE).events, "fcs")
        assert len(recs) == 1 and not recs[0].complete and recs[0].path is None
        assert recs[0].to_dict()["path"] == "incomplete"

    def test_chain_cut_at_next_irq(self):
        second = IRQ.replace("1000.000000", "1000.000003")
        recs = classify_activations(parse_trace("\n".join([IRQ, second, SWITCH])).events, "fcs")
        assert [r.complete for r in recs] == [False, True]

    def test_other_task_name(self):
        recs = classify_activations(parse_trace_file(fixture_path("activation_pair")).events, "ktimers")
        assert any(r.complete for r in recs)

    def test_outputs(self, mixed, tmp_path):
        write_records_csv(tmp_path / "a.csv", mixed)
        write_records_json(tmp_path / "a.json", mixed, summarize(mixed))
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert len(lines) == 11
        data = json.loads((tmp_path / "a.json").read_text())
        assert data["summary"]["incomplete"] == 1
        assert data["summary"]["Deferred"]["count"] == 4


def test_thread_names():
    assert base_thread_name("ktimers/2") == "ktimers"
    assert base_thread_name("kworker/u8:2") == "kworker"
    assert base_thread_name("ksoftirqd/0") == "ksoftirqd"
    assert base_thread_name("fcs") == "fcs"
    assert is_housekeeping("ktimers/0") and not is_housekeeping("rcu_preempt")


class TestDilation:
    def test_thirteen_fold_dilation(self):
        rep = exec_dilation([3.8, 3.7, 3.9], [51.0, 50.0, 52.0])
        assert rep.ratio == pytest.approx(51 / 3.8)
        assert round(rep.ratio, 1) == 13.4

    def test_identical(self):
        assert exec_dilation([5.0, 6.0], [6.0, 5.0]).ratio == 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.1, 1e4), min_size=1, max_size=50), st.lists(st.floats(0.1, 1e4), min_size=1, max_size=50))
    def test_median_quotient_oracle(self, a, b):
        rep = exec_dilation(a, b)
        assert rep.ratio == pytest.approx(statistics.median(b) / statistics.median(a), rel=1e-12)
        assert rep.ratio > 0

    @pytest.mark.parametrize("a,b", [([], [1.0]), ([1.0], [])])
    def test_empty_side(self, a, b):
        with pytest.raises(InsufficientDataError):
            exec_dilation(a, b)

    def test_spans_from_trace(self):
        spans = execution_spans(parse_trace_file(DATA / "mixed_chains.txt").events, "fcs")
        assert spans == [pytest.approx(295.0)]
