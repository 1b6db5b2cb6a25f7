"""Exact solver: hand-traced optima, lexicographic tie-breaks, equivalence
of the internal FIFO simulator with the interactive environment, policy
dominance, monotonicity under constraint relaxation and the bin-packing
rewrite against an independent brute-force packer."""

import numpy as np
import pytest

from coedge.env import EdgeEnv
from coedge.heuristics import make_heuristic
from coedge.model import LinkSpec, NodeSpec, Outcome, Topology
from coedge.oracle import (
    BinPackingInstance,
    InstanceTooLargeError,
    OracleTask,
    StaticInstance,
    random_instance,
    reduce_binpacking,
    simulate_assignment,
    solve_exact,
)


def single_node_instance(n_tasks, deadline_s, horizon=16):
    nodes = {0: NodeSpec(0, 2e9, 1e18, 0.0, 0.001, 0.001)}
    tasks = [OracleTask(origin=0, size_bits=1e6, intensity=1000.0,
                        deadline_s=deadline_s, reliability_floor=0.5)
             for _ in range(n_tasks)]
    return StaticInstance(topology=Topology(nodes=nodes, links={}),
                          tasks=tasks, slot_s=0.5, horizon=horizon)


def pair_instance(**task_kw):
    nodes = {0: NodeSpec(0, 2e9, 1e18, 0.0, 0.001, 0.001),
             1: NodeSpec(1, 2e9, 1e18, 0.0, 0.001, 0.001)}
    link = LinkSpec(0, 1, 1.6e8, 0.005)
    kw = dict(origin=0, size_bits=1e6, intensity=1000.0, deadline_s=4.0,
              reliability_floor=0.5)
    kw.update(task_kw)
    return StaticInstance(topology=Topology(nodes=nodes,
                                            links={link.key(): link}),
                          tasks=[OracleTask(**kw)], slot_s=0.5, horizon=16)


def packable(sizes, bins, capacity):
    """Independent brute-force bin packing decision (no solver reuse)."""
    loads = [0.0] * bins
    items = sorted(sizes, reverse=True)

    def place(k):
        if k == len(items):
            return True
        tried = set()
        for b in range(bins):
            if loads[b] in tried or loads[b] + items[k] > capacity + 1e-9:
                continue
            tried.add(loads[b])
            loads[b] += items[k]
            if place(k + 1):
                return True
            loads[b] -= items[k]
        return False

    return place(0)


class TestSolveExact:
    def test_single_task_slack_constraints(self):
        res = solve_exact(single_node_instance(1, deadline_s=4.0))
        assert res.feasible and res.rate == 1.0
        assert res.assignment == (0,)
        assert res.records[0].outcome is Outcome.SUCCESS

    def test_two_tasks_one_slot_server(self):
        # exec 0.5 s each; second task waits one slot: 1.0 s > 0.75 s deadline
        res = solve_exact(single_node_instance(2, deadline_s=0.75))
        assert res.feasible and res.rate == 0.5
        assert res.assignment == (0, 0)
        outs = {r.outcome for r in res.records}
        assert outs == {Outcome.SUCCESS, Outcome.DEADLINE_VIOLATION}

    def test_lexicographic_tie_break(self):
        # local and forward both succeed; local (id 0) sorts first
        res = solve_exact(pair_instance())
        assert res.rate == 1.0 and res.assignment == (0,)

    def test_forwarding_strictly_better_is_found(self):
        # 8e9-cycle task: 4.0 s local exec misses the 3.5 s deadline; the
        # 8 GHz neighbor finishes in 1.0 s plus a 6.25 ms hop
        nodes = {0: NodeSpec(0, 2e9, 1e18, 0.0, 0.001, 0.001),
                 1: NodeSpec(1, 8e9, 1e18, 0.0, 0.001, 0.001)}
        link = LinkSpec(0, 1, 1.6e8, 0.005)
        task = OracleTask(origin=0, size_bits=1e6, intensity=8000.0,
                          deadline_s=3.5, reliability_floor=0.5)
        inst = StaticInstance(topology=Topology(nodes=nodes,
                                                links={link.key(): link}),
                              tasks=[task], slot_s=0.5, horizon=20)
        res = solve_exact(inst)
        # forward: 1e6/1.6e8 trans + 8e9/8e9 exec = 1.00625 s, plus no waits
        assert res.assignment == (1,) and res.rate == 1.0

    def test_enumeration_guard(self):
        nodes = {i: NodeSpec(i, 2e9, 1e18, 0.0, 0.001, 0.001)
                 for i in range(4)}
        links = {}
        for a in range(4):
            for b in range(a + 1, 4):
                l = LinkSpec(a, b, 1.6e8, 0.005)
                links[l.key()] = l
        tasks = [OracleTask(origin=0, size_bits=1e6, intensity=1000.0,
                            deadline_s=4.0, reliability_floor=0.5)
                 for _ in range(13)]           # 4^13 > 10^7 assignments
        inst = StaticInstance(topology=Topology(nodes=nodes, links=links),
                              tasks=tasks)
        with pytest.raises(InstanceTooLargeError):
            solve_exact(inst)

    @pytest.mark.parametrize("seed", range(8))
    def test_monotone_in_deadline_and_floor(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, n_nodes=3, n_tasks=4, horizon=12)
        base = solve_exact(inst).success_count
        relaxed_tasks = [
            OracleTask(origin=t.origin, size_bits=t.size_bits,
                       intensity=t.intensity, deadline_s=t.deadline_s * 3.0,
                       reliability_floor=0.0)
            for t in inst.tasks
        ]
        relaxed = StaticInstance(topology=inst.topology, tasks=relaxed_tasks,
                                 slot_s=inst.slot_s, horizon=inst.horizon)
        assert solve_exact(relaxed).success_count >= base


def drive_assignment(env: EdgeEnv, assignment):
    """Play a fixed assignment in the environment: first decision follows
    the assignment, forwarded tasks execute where they landed."""
    lay = env.layout
    while not env.done:
        masks = env.masks
        acts = []
        for i in range(env.cfg.max_nodes):
            t = env.pending_task(i)
            if t is None:
                acts.append(lay.idle_action if masks[i, lay.idle_action]
                            else lay.local_action)
            elif t.hops >= 1:
                acts.append(lay.local_action)
            else:
                tgt = assignment[t.task_id]
                acts.append(lay.local_action if tgt == i else tgt)
        env.step(acts)
    return {r.task_id: r for r in env.episode_outcomes}


class TestSimulatorMatchesEnv:
    @pytest.mark.parametrize("seed", range(20))
    def test_same_outcomes_delays_reliabilities(self, seed):
        rng = np.random.default_rng(1000 + seed)
        inst = random_instance(rng, n_nodes=int(rng.integers(2, 5)),
                               n_tasks=int(rng.integers(2, 7)), horizon=12)
        assignment = tuple(int(rng.choice(inst.targets(t)))
                           for t in inst.tasks)
        sim = simulate_assignment(inst, assignment)
        env_recs = drive_assignment(inst.as_env(), assignment)
        assert len(env_recs) == len(sim)
        for idx, rec in enumerate(sim):
            er = env_recs[idx]
            assert er.outcome is rec.outcome
            if rec.outcome is not Outcome.IN_FLIGHT:
                assert abs(er.delay_s - rec.delay_s) < 1e-12
                assert abs(er.reliability - rec.reliability) < 1e-12
                assert er.exec_node == rec.exec_node


class TestDominance:
    @pytest.mark.parametrize("seed", range(12))
    def test_heuristics_never_beat_oracle(self, seed):
        rng = np.random.default_rng(500 + seed)
        inst = random_instance(rng, n_nodes=3, n_tasks=4, horizon=12)
        opt = solve_exact(inst)
        n = len(inst.tasks)
        for name in ("random", "local", "greedy", "ratc", "agsp"):
            env = inst.as_env(seed=seed)
            pol = make_heuristic(name, env.cfg)
            while not env.done:
                env.step(pol.act(env))
            wins = sum(r.outcome is Outcome.SUCCESS
                       for r in env.episode_outcomes)
            assert wins / n <= opt.rate + 1e-12


class TestBinPacking:
    def test_exact_fit_feasible(self):
        res = solve_exact(reduce_binpacking(
            BinPackingInstance(sizes=(2.0, 3.0), bins=1, capacity=5.0)))
        assert res.feasible

    def test_three_threes_in_two_fives_infeasible(self):
        res = solve_exact(reduce_binpacking(
            BinPackingInstance(sizes=(3.0, 3.0, 3.0), bins=2, capacity=5.0)))
        assert not res.feasible
        assert res.assignment is None and res.rate == 0.0

    def test_pairing_feasible(self):
        res = solve_exact(reduce_binpacking(
            BinPackingInstance(sizes=(4.0, 4.0, 4.0, 4.0), bins=2,
                               capacity=8.0)))
        assert res.feasible

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        sizes = tuple(float(rng.integers(1, 7))
                      for _ in range(int(rng.integers(2, 9))))
        bins = int(rng.integers(1, 4))
        cap = float(rng.integers(4, 11))
        bp = BinPackingInstance(sizes=sizes, bins=bins, capacity=cap)
        assert solve_exact(reduce_binpacking(bp)).feasible == \
            packable(sizes, bins, cap)

    def test_validation(self):
        with pytest.raises(ValueError):
            BinPackingInstance(sizes=(), bins=1, capacity=5.0)
        with pytest.raises(ValueError):
            BinPackingInstance(sizes=(1.0, -2.0), bins=1, capacity=5.0)
        with pytest.raises(ValueError):
            BinPackingInstance(sizes=(1.0,), bins=0, capacity=5.0)


class TestInstanceIO:
    def test_json_round_trip(self):
        inst = random_instance(np.random.default_rng(3), n_nodes=4, n_tasks=5)
        back = StaticInstance.from_json(inst.to_json())
        assert back == inst

    def test_reduction_round_trips_with_cycles(self):
        inst = reduce_binpacking(
            BinPackingInstance(sizes=(3.0, 3.0, 3.0), bins=2, capacity=5.0))
        back = StaticInstance.from_json(inst.to_json())
        assert back == inst
        assert back.enforce_cycle_budget
        assert [t.cycles for t in back.tasks] == [3.0, 3.0, 3.0]

    def test_validation(self):
        nodes = {0: NodeSpec(0, 2e9, 1e18, 0.0, 0.001, 0.001)}
        with pytest.raises(ValueError):  # origin outside topology
            StaticInstance(topology=Topology(nodes=nodes, links={}),
                           tasks=[OracleTask(1, 1e6, 1000.0, 4.0, 0.5)])
        with pytest.raises(ValueError):  # no tasks
            StaticInstance(topology=Topology(nodes=nodes, links={}), tasks=[])
        with pytest.raises(ValueError):  # dead node
            dead = {0: NodeSpec(0, 2e9, 1e18, 0.0, 0.001, 0.001, alive=False)}
            StaticInstance(topology=Topology(nodes=dead, links={}),
                           tasks=[OracleTask(0, 1e6, 1000.0, 4.0, 0.5)])
        with pytest.raises(ValueError):
            OracleTask(origin=0, size_bits=0.0, intensity=0.0,
                       deadline_s=4.0, reliability_floor=0.5)  # zero cycles
