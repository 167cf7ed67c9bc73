import multiprocessing as mp
import os
import time

import pytest

from fcsbench.stress import (
    AffinityViolationError,
    StressProfile,
    external_command,
    full_profile,
    parse_external_command,
    start_stress,
    stop_stress,
)

NCPU = os.cpu_count() or 1


class TestProfile:
    def test_full_profile_shape(self):
        p = full_profile(measurement_core=2)
        assert (p.cpu_workers, p.vm_workers, p.vm_fraction) == (4, 2, 0.75)
        assert p.worker_count == 4 + 2 + 4 + 2

    @pytest.mark.parametrize(
        "kwargs",
        [{"cpu_workers": -1}, {"vm_fraction": 0.0}, {"vm_fraction": 0.95}, {"duration_s": 0}],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            StressProfile(**kwargs)

    def test_measurement_core_in_allowed_set(self):
        p = StressProfile(cpu_workers=1, allowed_cores={0}, measurement_core=0)
        with pytest.raises(AffinityViolationError):
            p.resolved_cores()

    def test_offline_core(self):
        with pytest.raises(AffinityViolationError, match="not online"):
            StressProfile(cpu_workers=1, allowed_cores={NCPU + 7}).resolved_cores()

    def test_nothing_left_for_workers(self):
        p = StressProfile(cpu_workers=1, allowed_cores=set(), measurement_core=0)
        with pytest.raises(AffinityViolationError, match="no core left"):
            p.resolved_cores()

    def test_default_excludes_measurement_core(self):
        core = NCPU - 1
        cores = StressProfile(measurement_core=core).resolved_cores()
        assert core not in cores


class TestExternalCommand:
    def test_full_profile_string(self):
        cmd = external_command(full_profile())
        assert cmd.startswith("stress-ng ")
        assert "--cpu 4" in cmd and "--cpu-method matrixprod" in cmd
        assert "--vm 2 --vm-bytes 75%" in cmd
        assert "--switch 2" in cmd and "--fork 2" in cmd

    def test_empty_profile_has_no_stressors(self):
        assert external_command(StressProfile()) == "stress-ng"

    def test_taskset_and_timeout(self):
        cmd = external_command(StressProfile(cpu_workers=1, allowed_cores={0, 1, 3}, duration_s=10))
        assert "--taskset 0,1,3" in cmd and "--timeout 10s" in cmd

    @pytest.mark.parametrize(
        "profile",
        [
            full_profile(),
            StressProfile(cpu_workers=3, vm_workers=1, vm_fraction=0.125, allowed_cores={1, 2}, duration_s=2.5),
            StressProfile(fork_workers=1),
        ],
    )
    def test_round_trip(self, profile):
        back = parse_external_command(external_command(profile), profile.measurement_core)
        assert back == profile

    def test_rejects_other_programs(self):
        with pytest.raises(ValueError):
            parse_external_command("stress --cpu 4")


class TestLifecycle:
    def test_zero_worker_profile(self):
        h = start_stress(StressProfile())
        assert h.pids() == [] and h.counts() == []
        s = stop_stress(h)
        assert s.workers == [] and not s.already_stopped

    def test_stop_twice(self):
        h = start_stress(StressProfile(cpu_workers=1))
        first = stop_stress(h)
        second = stop_stress(h)
        assert not first.already_stopped and second.already_stopped
        assert second.workers == first.workers

    @pytest.mark.live
    def test_every_class_advances_and_tears_down(self):
        profile = StressProfile(
            cpu_workers=1, vm_workers=1, vm_fraction=0.02, switch_pairs=1, fork_workers=1,
        )
        with start_stress(profile) as h:
            assert len(h.pids()) == profile.worker_count
            before = h.counts()
            time.sleep(1.0)
            after = h.counts()
            kinds = [w.kind for w in h.workers]
            stuck = [k for k, a, b in zip(kinds, before, after) if b <= a]
            assert not stuck, f"counters did not advance for {stuck}"
            for mask in h.affinities().values():
                assert mask <= h.cores
        assert h.summary is not None and not h.summary.stragglers
        assert mp.active_children() == []

    @pytest.mark.live
    def test_duration_bounded_run(self):
        h = start_stress(StressProfile(cpu_workers=1, duration_s=0.5))
        t0 = time.monotonic()
        h.wait()
        s = h.stop()
        assert time.monotonic() - t0 < 3.0
        assert s.loop_counts[0] > 0

    @pytest.mark.live
    @pytest.mark.skipif(NCPU < 2, reason="needs a core to keep free of stressors")
    def test_measurement_core_kept_clean(self):
        with start_stress(StressProfile(cpu_workers=2, switch_pairs=1, measurement_core=0)) as h:
            assert all(0 not in m for m in h.affinities().values())

    def test_parent_affinity_restored(self):
        before = os.sched_getaffinity(0)
        with start_stress(StressProfile(cpu_workers=1)):
            pass
        assert os.sched_getaffinity(0) == before
