"""Formula-level tests for coedge.model.

Expected values were derived by hand (calculator arithmetic) before the module
was written and are frozen here; the formula checks are exact to 1e-9.
"""

import math

import numpy as np
import pytest

from coedge.model import (
    DeadExecutorError,
    LinkSpec,
    NodeSpec,
    Outcome,
    Task,
    Topology,
    UnavailableLinkError,
    exec_delay,
    exec_reliability,
    ghz_to_hz,
    kb_to_bits,
    link_reliability,
    mbps_to_bps,
    reliability,
    success_rate,
    task_outcome,
    total_delay,
    trans_delay,
)

TOL = 1e-9


def node(nid=0, cpu=3e9, alive=True, sw=0.0, hw=0.0, lam=0.5):
    return NodeSpec(node_id=nid, cpu_hz=cpu, memory_bits=1e12,
                    arrival_prob=lam, sw_fail_rate=sw, hw_fail_rate=hw,
                    alive=alive)


def link(a=0, b=1, rate=3.2e7, beta=0.0, available=True):
    return LinkSpec(a=a, b=b, rate_bps=rate, link_fail_rate=beta,
                    available=available)


def task(size_bits=1.6e7, intensity=1000.0, deadline=4.0, floor=0.9):
    return Task(task_id=0, origin=0, created_slot=0, size_bits=size_bits,
                intensity=intensity, deadline_s=deadline,
                reliability_floor=floor)


class TestUnits:
    def test_kb_is_8000_bits(self):
        assert kb_to_bits(2000) == 16000000.0

    def test_mbps_is_8e6_bps(self):
        assert mbps_to_bps(40) == 320000000.0

    def test_ghz(self):
        assert ghz_to_hz(3) == 3e9


class TestExecDelay:
    def test_paper_ratio(self):
        # 4e9 cycles on a 2 GHz CPU
        assert abs(exec_delay(4e9, node(cpu=2e9)) - 2.0) < TOL

    def test_zero_cycles(self):
        assert exec_delay(0.0, node()) == 0.0

    def test_typical_workload_exceeds_deadline(self):
        # 2000 KB at 1000 cycles/bit on 3 GHz: 16/3 s, above a 4 s deadline
        cycles = kb_to_bits(2000) * 1000.0
        assert abs(exec_delay(cycles, node(cpu=3e9)) - 5.333333333333333) < TOL

    def test_dead_executor_rejected(self):
        with pytest.raises(DeadExecutorError):
            exec_delay(1e9, node(alive=False))


class TestTransDelay:
    def test_paper_ratio(self):
        assert abs(trans_delay(4e6, link(rate=3.2e7)) - 0.125) < TOL

    def test_zero_bits(self):
        assert trans_delay(0.0, link()) == 0.0

    def test_equal_size_and_rate(self):
        assert abs(trans_delay(5e7, link(rate=5e7)) - 1.0) < TOL

    def test_unavailable_link_rejected(self):
        with pytest.raises(UnavailableLinkError):
            trans_delay(1e6, link(available=False))


class TestReliability:
    def test_combined_exponent(self):
        # alpha = gamma = 0.05, T_exec = 1 s, beta = 0.1, T_trans = 0.5 s
        n = node(sw=0.05, hw=0.05)
        l = link(beta=0.1)
        r = reliability(1.0, 0.5, n, l)
        assert abs(r - 0.8607079764250578) < TOL

    def test_zero_rates_give_one(self):
        assert reliability(10.0, 10.0, node(), link()) == 1.0

    def test_local_no_link_term(self):
        n = node(sw=0.1, hw=0.1)
        r = reliability(1.0, 0.0, n, None)
        assert abs(r - 0.8187307530779818) < TOL

    def test_nonzero_trans_without_link_rejected(self):
        with pytest.raises(UnavailableLinkError):
            reliability(1.0, 0.5, node(), None)

    def test_monotone_in_durations(self):
        # longer exposure never increases survival
        rng = np.random.default_rng(7)
        n = node(sw=0.02, hw=0.01)
        l = link(beta=0.05)
        for _ in range(200):
            t1, t2 = sorted(rng.uniform(0.0, 20.0, size=2))
            d = rng.uniform(0.0, 5.0)
            assert reliability(t2, d, n, l) <= reliability(t1, d, n, l) + TOL
            assert reliability(t1, t2, n, l) <= reliability(t1, t1, n, l) + TOL

    def test_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            n = node(sw=rng.uniform(0, 0.3), hw=rng.uniform(0, 0.3))
            l = link(beta=rng.uniform(0, 0.3))
            r = reliability(rng.uniform(0, 30), rng.uniform(0, 30), n, l)
            assert 0.0 <= r <= 1.0


class TestTotalDelay:
    def test_wait_slots_scale_with_slot_length(self):
        # 3 cpu-wait + 2 tx-wait slots at 0.5 s + 1.5 s exec + 0.25 s trans
        d = total_delay(1.5, 0.25, wait_tx_slots=2, wait_cpu_slots=3, slot_s=0.5)
        assert abs(d - 4.25) < TOL

    def test_no_waits(self):
        assert total_delay(1.0, 0.5, 0, 0, 0.5) == 1.5


class TestTaskOutcome:
    def test_success(self):
        assert task_outcome(3.9, 0.95, task()) is Outcome.SUCCESS

    def test_deadline_boundary_inclusive(self):
        assert task_outcome(4.0, 0.95, task(deadline=4.0)) is Outcome.SUCCESS

    def test_floor_boundary_inclusive(self):
        assert task_outcome(1.0, 0.9, task(floor=0.9)) is Outcome.SUCCESS

    def test_deadline_violation(self):
        assert task_outcome(4.0 + 1e-12, 1.0, task(deadline=4.0)) \
            is Outcome.DEADLINE_VIOLATION

    def test_reliability_violation(self):
        assert task_outcome(1.0, 0.899, task(floor=0.9)) \
            is Outcome.RELIABILITY_VIOLATION

    def test_deadline_checked_first(self):
        assert task_outcome(99.0, 0.0, task()) is Outcome.DEADLINE_VIOLATION

    def test_realized_indicator_semantics(self):
        # simulation passes rel in {0, 1}
        assert task_outcome(1.0, 0.0, task()) is Outcome.RELIABILITY_VIOLATION
        assert task_outcome(1.0, 1.0, task()) is Outcome.SUCCESS

    def test_bad_rel_rejected(self):
        with pytest.raises(ValueError):
            task_outcome(1.0, 1.5, task())


class TestSuccessRate:
    def test_mixed(self):
        outs = [Outcome.SUCCESS, Outcome.SUCCESS, Outcome.DEADLINE_VIOLATION,
                Outcome.RELIABILITY_VIOLATION, Outcome.IN_FLIGHT]
        assert abs(success_rate(outs) - 0.5) < TOL

    def test_empty_is_one(self):
        assert success_rate([]) == 1.0

    def test_all_in_flight_is_one(self):
        assert success_rate([Outcome.IN_FLIGHT] * 3) == 1.0


class TestTypes:
    def test_cycles_is_exact_product(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s = float(rng.uniform(1e6, 4e7))
            d = float(rng.uniform(100, 3000))
            t = task(size_bits=s, intensity=d)
            assert t.cycles == s * d  # exact, no rounding

    def test_wait_total(self):
        t = task()
        t.wait_tx_slots = 2
        t.wait_cpu_slots = 5
        assert t.wait_slots == 7

    def test_task_validation(self):
        with pytest.raises(ValueError):
            task(deadline=0.0)
        with pytest.raises(ValueError):
            task(floor=0.0)
        with pytest.raises(ValueError):
            task(size_bits=-1.0)

    def test_node_validation(self):
        with pytest.raises(ValueError):
            node(cpu=0.0)
        with pytest.raises(ValueError):
            node(lam=1.5)

    def test_link_validation(self):
        with pytest.raises(ValueError):
            LinkSpec(a=1, b=1, rate_bps=1e6, link_fail_rate=0.0)
        with pytest.raises(ValueError):
            link(rate=0.0)

    def test_topology_lookup_symmetric(self):
        nodes = {i: node(nid=i) for i in range(3)}
        l01 = link(a=0, b=1)
        l12 = link(a=1, b=2)
        topo = Topology(nodes=nodes, links={l01.key(): l01, l12.key(): l12})
        assert topo.link(1, 0) is l01
        assert topo.link(0, 1) is l01
        assert topo.link(0, 2) is None
        assert topo.neighbors(1) == [0, 2]

    def test_topology_rejects_unknown_node(self):
        nodes = {0: node(nid=0), 1: node(nid=1)}
        bad = link(a=1, b=2)
        with pytest.raises(ValueError):
            Topology(nodes=nodes, links={bad.key(): bad})

    def test_math_is_float64(self):
        # the whole stack stays in double precision
        d = exec_delay(np.float64(4e9), node(cpu=2e9))
        assert isinstance(d, float) or d.dtype == np.float64
