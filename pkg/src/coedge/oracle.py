"""Exact solver for small static offloading instances.

solve_exact enumerates every single-hop assignment of tasks to their origin
or a directly linked node, simulates the induced FIFO schedule with the same
slot arithmetic as the interactive environment, and returns the assignment
maximizing the success count. A companion transformation rewrites
bin-packing instances into this form so packability coincides with
assignment feasibility under the per-node cycle budget.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .env import EdgeEnv, EnvConfig, ScriptedTask
from .model import LinkSpec, NodeSpec, Outcome, Topology, task_outcome

ENUMERATION_GUARD = 10_000_000


class InstanceTooLargeError(Exception):
    """Assignment space exceeds the enumeration guard."""


@dataclass
class OracleTask:
    """Task as seen by the solver; cycles default to size * intensity but
    may be pinned directly (the bin-packing rewrite uses zero-size items)."""

    origin: int
    size_bits: float
    intensity: float
    deadline_s: float
    reliability_floor: float
    cycles_override: float | None = None

    def __post_init__(self) -> None:
        if self.origin < 0:
            raise ValueError("origin must be a node id")
        if self.size_bits < 0.0:
            raise ValueError("size_bits must be >= 0")
        if self.deadline_s <= 0.0:
            raise ValueError("deadline_s must be positive")
        if not 0.0 <= self.reliability_floor <= 1.0:
            raise ValueError("reliability_floor must lie in [0, 1]")
        if self.cycles <= 0.0:
            raise ValueError("task needs a positive cycle count")

    @property
    def cycles(self) -> float:
        if self.cycles_override is not None:
            return self.cycles_override
        return self.size_bits * self.intensity


@dataclass
class StaticInstance:
    """A churn-free snapshot: all tasks present at slot 0, fixed topology."""

    topology: Topology
    tasks: list[OracleTask]
    slot_s: float = 0.5
    horizon: int = 16
    enforce_cycle_budget: bool = False

    def __post_init__(self) -> None:
        if self.slot_s <= 0.0 or self.horizon < 1:
            raise ValueError("need positive slot length and horizon >= 1")
        if not self.tasks:
            raise ValueError("instance needs at least one task")
        ids = sorted(self.topology.nodes)
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be consecutive from 0")
        for spec in self.topology.nodes.values():
            if not spec.alive:
                raise ValueError("static instances use alive nodes only")
        for t in self.tasks:
            if t.origin not in self.topology.nodes:
                raise ValueError(f"task origin {t.origin} not in topology")

    @property
    def n_nodes(self) -> int:
        return len(self.topology.nodes)

    def targets(self, task: OracleTask) -> list[int]:
        """Assignment domain: the origin itself plus direct neighbors."""
        return [task.origin] + sorted(self.topology.neighbors(task.origin))

    def assignment_space(self) -> int:
        size = 1
        for t in self.tasks:
            size *= len(self.targets(t))
        return size

    def cycle_budget(self, node: int) -> float:
        """Cycles node can deliver within the horizon."""
        return self.topology.nodes[node].cpu_hz * self.horizon * self.slot_s

    # ------------------------------------------------------------------ JSON

    def to_json(self, indent: int | None = 2) -> str:
        doc = {
            "slot_s": self.slot_s,
            "horizon": self.horizon,
            "enforce_cycle_budget": self.enforce_cycle_budget,
            "nodes": [
                {"id": n.node_id, "cpu_hz": n.cpu_hz,
                 "memory_bits": n.memory_bits, "sw_fail_rate": n.sw_fail_rate,
                 "hw_fail_rate": n.hw_fail_rate}
                for n in sorted(self.topology.nodes.values(),
                                key=lambda n: n.node_id)
            ],
            "links": [
                {"a": l.a, "b": l.b, "rate_bps": l.rate_bps,
                 "link_fail_rate": l.link_fail_rate}
                for l in sorted(self.topology.links.values(),
                                key=lambda l: l.key())
            ],
            "tasks": [
                {"origin": t.origin, "size_bits": t.size_bits,
                 "intensity": t.intensity, "deadline_s": t.deadline_s,
                 "reliability_floor": t.reliability_floor,
                 **({"cycles": t.cycles_override}
                    if t.cycles_override is not None else {})}
                for t in self.tasks
            ],
        }
        return json.dumps(doc, indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "StaticInstance":
        doc = json.loads(text)
        nodes = {
            d["id"]: NodeSpec(node_id=d["id"], cpu_hz=d["cpu_hz"],
                              memory_bits=d["memory_bits"], arrival_prob=0.0,
                              sw_fail_rate=d["sw_fail_rate"],
                              hw_fail_rate=d["hw_fail_rate"])
            for d in doc["nodes"]
        }
        links = {}
        for d in doc["links"]:
            link = LinkSpec(a=d["a"], b=d["b"], rate_bps=d["rate_bps"],
                            link_fail_rate=d["link_fail_rate"])
            links[link.key()] = link
        tasks = [
            OracleTask(origin=d["origin"], size_bits=d["size_bits"],
                       intensity=d["intensity"], deadline_s=d["deadline_s"],
                       reliability_floor=d["reliability_floor"],
                       cycles_override=d.get("cycles"))
            for d in doc["tasks"]
        ]
        return cls(topology=Topology(nodes=nodes, links=links), tasks=tasks,
                   slot_s=doc["slot_s"], horizon=doc["horizon"],
                   enforce_cycle_budget=doc.get("enforce_cycle_budget", False))

    # ----------------------------------------------------------- env bridge

    def as_env(self, seed: int = 0) -> EdgeEnv:
        """Interactive twin of this instance: same topology and tasks, no
        churn, no failure sampling, single-hop forwarding."""
        scripted = [
            ScriptedTask(slot=0, origin=t.origin, size_bits=t.size_bits,
                         intensity=t.intensity, deadline_s=t.deadline_s,
                         reliability_floor=t.reliability_floor)
            for t in self.tasks
        ]
        cfg = EnvConfig(node_count=self.n_nodes, max_nodes=self.n_nodes,
                        horizon=self.horizon, slot_s=self.slot_s,
                        max_hops=1, sample_failures=False,
                        node_death_prob=0.0, node_appear_prob=0.0,
                        scripted_tasks=scripted)
        return EdgeEnv(cfg, seed=seed, topology=self.topology)


@dataclass
class SimRecord:
    outcome: Outcome
    delay_s: float
    reliability: float
    exec_node: int  # -1 while in flight


@dataclass
class OracleResult:
    feasible: bool
    success_count: int
    rate: float
    assignment: tuple[int, ...] | None
    records: list[SimRecord] = field(default_factory=list)
    n_evaluated: int = 0


class _Flight:
    __slots__ = ("idx", "remaining_bits", "remaining_cycles", "trans_s",
                 "rel", "wait_cpu", "wait_tx", "forwarded")

    def __init__(self, idx: int, task: OracleTask):
        self.idx = idx
        self.remaining_bits = task.size_bits
        self.remaining_cycles = task.cycles
        self.trans_s = 0.0
        self.rel = 1.0
        self.wait_cpu = 0
        self.wait_tx = 0
        self.forwarded = False


def simulate_assignment(inst: StaticInstance,
                        assignment: tuple[int, ...]) -> list[SimRecord]:
    """FIFO schedule induced by the assignment, one record per task.

    Slot phases replicate the environment exactly: one head-of-inbox
    decision per node per slot, cpu budget F*slot with multi-completion,
    directed link budget R*slot, +1 slot waits for anything still queued.
    """
    topo = inst.topology
    n = inst.n_nodes
    records: dict[int, SimRecord] = {}
    inbox: dict[int, deque] = {i: deque() for i in range(n)}
    exec_q: dict[int, deque] = {i: deque() for i in range(n)}
    buffers: dict[tuple[int, int], deque] = {}
    for idx, task in enumerate(inst.tasks):
        inbox[task.origin].append(_Flight(idx, task))

    def resolve(fl: _Flight, node: int) -> None:
        task = inst.tasks[fl.idx]
        spec = topo.nodes[node]
        exec_s = task.cycles / spec.cpu_hz
        fl.rel *= math.exp(-(spec.sw_fail_rate + spec.hw_fail_rate) * exec_s)
        delay = (fl.wait_cpu + fl.wait_tx) * inst.slot_s + exec_s + fl.trans_s
        records[fl.idx] = SimRecord(task_outcome(delay, fl.rel, task),
                                    delay, fl.rel, node)

    for _ in range(inst.horizon):
        # decisions: head of each inbox goes local or toward its target
        for i in range(n):
            if not inbox[i]:
                continue
            fl = inbox[i].popleft()
            target = i if fl.forwarded else assignment[fl.idx]
            if target == i:
                exec_q[i].append(fl)
            else:
                buffers.setdefault((i, target), deque()).append(fl)
        for i in range(n):
            for fl in inbox[i]:
                fl.wait_cpu += 1

        # execution: spend the slot's cycle budget head-first
        for i in range(n):
            budget = topo.nodes[i].cpu_hz * inst.slot_s
            q = exec_q[i]
            while q and budget > 1e-9:
                head = q[0]
                take = min(budget, head.remaining_cycles)
                head.remaining_cycles -= take
                budget -= take
                if head.remaining_cycles <= 1e-6:
                    q.popleft()
                    resolve(head, i)
            for pos, fl in enumerate(q):
                if pos >= 1:
                    fl.wait_cpu += 1

        # transmission: spend each directed link's bit budget
        for (i, j) in sorted(buffers):
            q = buffers[(i, j)]
            if not q:
                continue
            link = topo.link(i, j)
            budget = link.rate_bps * inst.slot_s
            while q and budget > 1e-9:
                head = q[0]
                take = min(budget, head.remaining_bits)
                head.remaining_bits -= take
                budget -= take
                if head.remaining_bits <= 1e-6:
                    q.popleft()
                    task = inst.tasks[head.idx]
                    hop_s = task.size_bits / link.rate_bps
                    head.trans_s += hop_s
                    head.rel *= math.exp(-link.link_fail_rate * hop_s)
                    head.remaining_bits = task.size_bits
                    head.forwarded = True
                    inbox[j].append(head)
            for pos, fl in enumerate(q):
                if pos >= 1:
                    fl.wait_tx += 1

    for idx in range(len(inst.tasks)):
        if idx not in records:
            records[idx] = SimRecord(Outcome.IN_FLIGHT, float("nan"), 1.0, -1)
    return [records[idx] for idx in range(len(inst.tasks))]


def _hard_feasible(inst: StaticInstance, assignment: tuple[int, ...]) -> bool:
    """Resource admission: per-node memory always, cycle budget on demand."""
    mem = {j: 0.0 for j in range(inst.n_nodes)}
    cyc = {j: 0.0 for j in range(inst.n_nodes)}
    for task, j in zip(inst.tasks, assignment):
        mem[j] += task.size_bits
        cyc[j] += task.cycles
    for j in range(inst.n_nodes):
        if mem[j] > inst.topology.nodes[j].memory_bits:
            return False
        if inst.enforce_cycle_budget and cyc[j] > inst.cycle_budget(j) + 1e-9:
            return False
    return True


def iter_assignments(inst: StaticInstance) -> Iterator[tuple[int, ...]]:
    """Lexicographic enumeration over per-task sorted target lists."""
    return itertools.product(*(inst.targets(t) for t in inst.tasks))


def solve_exact(inst: StaticInstance,
                guard: int = ENUMERATION_GUARD) -> OracleResult:
    """Global optimum of the success count over all feasible assignments.

    Returns the lexicographically smallest optimal assignment (the first
    optimum found in lexicographic order is kept; later ties never replace
    it). Infeasible instances report feasible=False with a zero rate.
    """
    space = inst.assignment_space()
    if space > guard:
        raise InstanceTooLargeError(
            f"{space} assignments exceed the guard of {guard}")
    n_tasks = len(inst.tasks)
    best: OracleResult | None = None
    evaluated = 0
    for assignment in iter_assignments(inst):
        if not _hard_feasible(inst, assignment):
            continue
        records = simulate_assignment(inst, assignment)
        evaluated += 1
        count = sum(r.outcome is Outcome.SUCCESS for r in records)
        if best is None or count > best.success_count:
            best = OracleResult(feasible=True, success_count=count,
                                rate=count / n_tasks, assignment=assignment,
                                records=records)
            if count == n_tasks:
                break  # cannot improve; first-found stays lexicographic min
    if best is None:
        return OracleResult(feasible=False, success_count=0, rate=0.0,
                            assignment=None, n_evaluated=0)
    best.n_evaluated = evaluated
    return best


# ------------------------------------------------------------- bin packing


@dataclass(frozen=True)
class BinPackingInstance:
    sizes: tuple[float, ...]
    bins: int
    capacity: float

    def __post_init__(self) -> None:
        if not self.sizes or any(s <= 0.0 for s in self.sizes):
            raise ValueError("item sizes must be positive")
        if self.bins < 1 or self.capacity <= 0.0:
            raise ValueError("need at least one bin of positive capacity")


def reduce_binpacking(bp: BinPackingInstance) -> StaticInstance:
    """Single-slot instance whose assignment feasibility under the cycle
    budget equals packability: one node per bin with capacity-many cycles
    per slot, one zero-size task per item carrying the item's size as its
    cycle demand, all other constraints slack."""
    nodes = {
        j: NodeSpec(node_id=j, cpu_hz=bp.capacity, memory_bits=1e18,
                    arrival_prob=0.0, sw_fail_rate=0.0, hw_fail_rate=0.0)
        for j in range(bp.bins)
    }
    links = {}
    for a in range(bp.bins):
        for b in range(a + 1, bp.bins):
            link = LinkSpec(a=a, b=b, rate_bps=1e12, link_fail_rate=0.0)
            links[link.key()] = link
    tasks = [
        OracleTask(origin=0, size_bits=0.0, intensity=0.0, deadline_s=1e9,
                   reliability_floor=0.0, cycles_override=float(a))
        for a in bp.sizes
    ]
    return StaticInstance(topology=Topology(nodes=nodes, links=links),
                          tasks=tasks, slot_s=1.0, horizon=1,
                          enforce_cycle_budget=True)


# ------------------------------------------------------- instance sampling


def random_instance(rng: np.random.Generator, n_nodes: int = 3,
                    n_tasks: int = 4, horizon: int = 16,
                    slot_s: float = 0.5) -> StaticInstance:
    """Small random connected instance for solver cross-checks."""
    nodes = {
        i: NodeSpec(node_id=i, cpu_hz=float(rng.uniform(2e9, 8e9)),
                    memory_bits=1e18, arrival_prob=0.0,
                    sw_fail_rate=float(rng.uniform(0.001, 0.02)),
                    hw_fail_rate=float(rng.uniform(0.001, 0.02)))
        for i in range(n_nodes)
    }
    links = {}
    order = rng.permutation(n_nodes)
    pairs = {tuple(sorted((int(order[k]), int(order[k + 1]))))
             for k in range(n_nodes - 1)}          # spanning path: connected
    for a in range(n_nodes):
        for b in range(a + 1, n_nodes):
            if (a, b) in pairs or rng.random() < 0.4:
                link = LinkSpec(a=a, b=b,
                                rate_bps=float(rng.uniform(2e7, 2e8)),
                                link_fail_rate=float(rng.uniform(0.005, 0.05)))
                links[link.key()] = link
    tasks = [
        OracleTask(origin=int(rng.integers(n_nodes)),
                   size_bits=float(rng.uniform(1e6, 6e6)),
                   intensity=float(rng.uniform(400.0, 1200.0)),
                   deadline_s=float(rng.uniform(2.0, 6.0)),
                   reliability_floor=float(rng.uniform(0.7, 0.95)))
        for _ in range(n_tasks)
    ]
    return StaticInstance(topology=Topology(nodes=nodes, links=links),
                          tasks=tasks, slot_s=slot_s, horizon=horizon)
