"""Time-slotted multi-agent task offloading environment.

Each slot, every node that holds a pending task chooses to execute it locally
or forward it one hop; idling is only for task-less nodes. Tasks then flow
through per-node execution queues and per-link transmission buffers, waiting
counters tick for anything still queued, nodes die and appear, and resolved
tasks are labeled with model.task_outcome. The team reward of a slot is
(#successes - #violations) among the tasks resolved in it.

Observations are partial by design: a node sees its own specs and queue
depths, its pending task, and for each potential neighbor only the link rate,
link failure rate and a liveness flag. Neighbor CPU speeds and queue depths
are not observable (the guidance prompt path gets a richer view through
guidance_view).

Action indexing for a width-N slot table: action j < N forwards to node slot
j, action N executes locally, action N+1 idles.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .model import (
    LinkSpec,
    NodeSpec,
    Outcome,
    Task,
    Topology,
    task_outcome,
)

__all__ = [
    "EnvConfig",
    "RngStreams",
    "ObsLayout",
    "ScriptedTask",
    "TransitionRecord",
    "OutcomeRecord",
    "NeighborView",
    "InvalidActionError",
    "EdgeEnv",
    "random_topology",
    "ring_topology",
]


class InvalidActionError(ValueError):
    """A joint action contained an entry the current mask forbids."""


@dataclass
class ScriptedTask:
    """Deterministic arrival for oracle cross-checks and regression tests."""

    slot: int
    origin: int
    size_bits: float
    intensity: float
    deadline_s: float | None = None      # None: use config deadline
    reliability_floor: float | None = None


@dataclass
class EnvConfig:
    """Environment parameters. File configs use KB / MB/s / GHz; everything
    is converted to bits / bit/s / Hz here in __post_init__ derived fields."""

    node_count: int = 10
    max_nodes: int = 0                   # 0: node_count + 4 slot headroom
    horizon: int = 100                   # slots per episode
    slot_s: float = 0.5                  # seconds per slot
    topology: str = "random"             # "random" | "ring"
    avg_degree: float = 3.0

    size_kb_range: tuple[float, float] = (2000.0, 4000.0)
    intensity_range: tuple[float, float] = (600.0, 1800.0)  # cycles/bit
    deadline_s: float = 4.0
    reliability_floor: float = 0.9
    cpu_ghz_range: tuple[float, float] = (4.0, 16.0)
    link_mbps_range: tuple[float, float] = (10.0, 40.0)
    memory_gb: float = 16.0
    arrival_prob_range: tuple[float, float] = (0.06, 0.16)
    sw_fail_range: tuple[float, float] = (0.001, 0.015)     # alpha, 1/s
    hw_fail_range: tuple[float, float] = (0.001, 0.015)     # gamma, 1/s
    link_fail_range: tuple[float, float] = (0.005, 0.04)    # beta, 1/s

    node_death_prob: float = 0.01        # per alive node per slot
    node_appear_prob: float = 0.1        # one spawn attempt per slot
    max_hops: int = 5
    sample_failures: bool = True         # Bernoulli(1 - exp(-rate * t)) draws

    # normalization caps for observation features
    queue_norm: float = 16.0
    fail_rate_norm: float = 0.25

    scripted_tasks: list[ScriptedTask] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.max_nodes <= 0:
            self.max_nodes = self.node_count + 4
        if self.max_nodes < self.node_count:
            raise ValueError("max_nodes smaller than node_count")
        if self.node_count < 1 or self.horizon < 1 or self.slot_s <= 0:
            raise ValueError("node_count, horizon and slot_s must be positive")
        if self.topology not in ("random", "ring"):
            raise ValueError(f"unknown topology kind {self.topology!r}")
        if not 0.0 < self.reliability_floor <= 1.0:
            raise ValueError("reliability_floor outside (0, 1]")
        for name in ("size_kb_range", "intensity_range", "cpu_ghz_range",
                     "link_mbps_range", "arrival_prob_range", "sw_fail_range",
                     "hw_fail_range", "link_fail_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")

    # unit-converted bounds
    @property
    def size_bits_range(self) -> tuple[float, float]:
        return (self.size_kb_range[0] * 8000.0, self.size_kb_range[1] * 8000.0)

    @property
    def cpu_hz_range(self) -> tuple[float, float]:
        return (self.cpu_ghz_range[0] * 1e9, self.cpu_ghz_range[1] * 1e9)

    @property
    def link_bps_range(self) -> tuple[float, float]:
        return (self.link_mbps_range[0] * 8e6, self.link_mbps_range[1] * 8e6)

    @property
    def memory_bits(self) -> float:
        return self.memory_gb * 8e9

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        tasks = [ScriptedTask(**t) for t in d.pop("scripted_tasks", [])]
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, val in list(d.items()):
            if isinstance(val, list) and key.endswith("_range"):
                d[key] = tuple(val)
        return cls(scripted_tasks=tasks, **d)

    @classmethod
    def from_json(cls, text: str) -> "EnvConfig":
        return cls.from_dict(json.loads(text))


class RngStreams:
    """One named generator per stochastic source, spawned from a single seed
    so traces stay comparable across policies (the policy stream is separate
    from everything the environment consumes)."""

    NAMES = ("arrivals", "failures", "topology", "policy", "init")

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def __repr__(self) -> str:
        return f"RngStreams(seed={self.seed})"


@dataclass(frozen=True)
class ObsLayout:
    """Index bookkeeping for the flat per-agent observation vector."""

    max_nodes: int

    NODE_FEATS = 6   # lam, alpha, gamma, cpu, exec backlog, buffer backlog
    TASK_FEATS = 5   # size, cycles, deadline, hops, waited
    LINK_FEATS = 4   # rate, link failure rate, alive flag, exec backlog

    @property
    def obs_dim(self) -> int:
        return self.NODE_FEATS + self.TASK_FEATS + self.LINK_FEATS * self.max_nodes

    @property
    def n_actions(self) -> int:
        return self.max_nodes + 2

    @property
    def local_action(self) -> int:
        return self.max_nodes

    @property
    def idle_action(self) -> int:
        return self.max_nodes + 1

    @property
    def task_slice(self) -> slice:
        return slice(self.NODE_FEATS, self.NODE_FEATS + self.TASK_FEATS)

    def neighbor_slice(self, j: int) -> slice:
        start = self.NODE_FEATS + self.TASK_FEATS + self.LINK_FEATS * j
        return slice(start, start + self.LINK_FEATS)


@dataclass
class OutcomeRecord:
    """One resolved (or horizon-stranded) task."""

    task_id: int
    outcome: Outcome
    delay_s: float
    reliability: float
    resolved_slot: int
    exec_node: int  # -1 if never executed


@dataclass
class TransitionRecord:
    """Everything about one env step, for replay and training buffers."""

    slot: int
    obs: np.ndarray          # (max_nodes, obs_dim) before the step
    masks: np.ndarray        # (max_nodes, n_actions) before the step
    actions: np.ndarray      # (max_nodes,)
    reward: float
    outcomes: list[OutcomeRecord]
    next_obs: np.ndarray
    next_masks: np.ndarray
    done: bool


@dataclass
class NeighborView:
    """Privileged per-neighbor snapshot for guidance prompts only."""

    node_id: int
    rate_bps: float
    link_fail_rate: float
    exec_backlog: int        # queued work visible to the prompt, not the obs
    alive: bool


class _Flight:
    """Env-side bookkeeping around a Task while it moves through queues."""

    __slots__ = ("task", "remaining_bits", "remaining_cycles", "trans_s",
                 "rel", "exec_node", "started")

    def __init__(self, task: Task):
        self.task = task
        self.remaining_bits = task.size_bits
        self.remaining_cycles = task.cycles
        self.trans_s = 0.0       # sum of S/R over completed hops
        self.rel = 1.0           # expected survival accumulated so far
        self.exec_node = -1
        self.started = False


def random_topology(cfg: EnvConfig, rng: np.random.Generator) -> Topology:
    """Connected random graph over cfg.node_count nodes (rejection sampled)."""
    n = cfg.node_count
    if n == 1:
        return Topology(nodes={0: _sample_node(cfg, 0, rng)}, links={})
    p = min(1.0, cfg.avg_degree / max(1, n - 1))
    for _ in range(1000):
        adj = rng.random((n, n)) < p
        adj = np.triu(adj, 1)
        adj = adj | adj.T
        if _connected(adj):
            break
    else:
        raise RuntimeError("could not sample a connected topology")
    nodes = {i: _sample_node(cfg, i, rng) for i in range(n)}
    links = {}
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j]:
                link = _sample_link(cfg, i, j, rng)
                links[link.key()] = link
    return Topology(nodes=nodes, links=links)


def ring_topology(cfg: EnvConfig, rng: np.random.Generator) -> Topology:
    """Cycle over cfg.node_count nodes: 2-regular and connected for n >= 3."""
    n = cfg.node_count
    if n < 3:
        raise ValueError("ring topology needs at least 3 nodes")
    nodes = {i: _sample_node(cfg, i, rng) for i in range(n)}
    links = {}
    for i in range(n):
        link = _sample_link(cfg, i, (i + 1) % n, rng)
        links[link.key()] = link
    return Topology(nodes=nodes, links=links)


def _sample_node(cfg: EnvConfig, nid: int, rng: np.random.Generator) -> NodeSpec:
    return NodeSpec(
        node_id=nid,
        cpu_hz=rng.uniform(*cfg.cpu_hz_range),
        memory_bits=cfg.memory_bits,
        arrival_prob=rng.uniform(*cfg.arrival_prob_range),
        sw_fail_rate=rng.uniform(*cfg.sw_fail_range),
        hw_fail_rate=rng.uniform(*cfg.hw_fail_range),
    )


def _sample_link(cfg: EnvConfig, a: int, b: int, rng: np.random.Generator) -> LinkSpec:
    return LinkSpec(a=a, b=b, rate_bps=rng.uniform(*cfg.link_bps_range),
                    link_fail_rate=rng.uniform(*cfg.link_fail_range))


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.nonzero(adj[i])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


class EdgeEnv:
    """The Dec-POMDP. One agent per node slot; dead or empty slots still get
    an (idle-only) action so shapes never change under churn."""

    def __init__(self, cfg: EnvConfig, seed: int = 0,
                 topology: Topology | None = None):
        self.cfg = cfg
        self.layout = ObsLayout(cfg.max_nodes)
        self.streams = RngStreams(seed)
        # one base scenario per (config, seed); episodes share it so policies
        # can learn its routing structure, churn perturbs it within episodes
        if topology is None:
            builder = ring_topology if cfg.topology == "ring" else random_topology
            topology = builder(cfg, self.streams.topology)
        self._base_topology = topology
        self._task_counter = 0
        self.reset()

    # ------------------------------------------------------------------ reset

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        """Build topology and slot-0 arrivals; returns (obs, masks)."""
        cfg = self.cfg
        n = cfg.max_nodes
        self.slot = 0
        self.done = False

        self.alive = np.zeros(n, dtype=bool)
        self.cpu_hz = np.zeros(n)
        self.lam = np.zeros(n)
        self.alpha = np.zeros(n)
        self.gamma = np.zeros(n)
        self.link_exists = np.zeros((n, n), dtype=bool)
        self.link_rate = np.zeros((n, n))
        self.link_beta = np.zeros((n, n))

        topo = self._base_topology
        for i, spec in topo.nodes.items():
            self.alive[i] = spec.alive
            self.cpu_hz[i] = spec.cpu_hz
            self.lam[i] = spec.arrival_prob
            self.alpha[i] = spec.sw_fail_rate
            self.gamma[i] = spec.hw_fail_rate
        for (a, b), link in topo.links.items():
            self.link_exists[a, b] = self.link_exists[b, a] = True
            self.link_rate[a, b] = self.link_rate[b, a] = link.rate_bps
            self.link_beta[a, b] = self.link_beta[b, a] = link.link_fail_rate

        self.inbox: list[deque[_Flight]] = [deque() for _ in range(n)]
        self.exec_q: list[deque[_Flight]] = [deque() for _ in range(n)]
        self.buffers: dict[tuple[int, int], deque[_Flight]] = {}

        # episode accounting (criterion: sum of rewards == success - violation)
        self.counters = {
            "arrived": 0, "resolved": 0, "success": 0,
            "deadline_violation": 0, "reliability_violation": 0, "in_flight": 0,
        }
        self.episode_outcomes: list[OutcomeRecord] = []
        self.return_sum = 0.0

        if cfg.scripted_tasks:
            self._spawn_scripted(slot=0)
        else:
            self._spawn_arrivals(slot=0)
        self._obs, self._masks = self._build_obs()
        return self._obs.copy(), self._masks.copy()

    # ------------------------------------------------------------------- step

    def step(self, actions: Iterable[int]) -> TransitionRecord:
        """Advance one slot under the joint action. Raises InvalidActionError
        if any agent picked a masked action."""
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        cfg = self.cfg
        lay = self.layout
        actions = np.asarray(list(actions) if not isinstance(actions, np.ndarray)
                             else actions, dtype=np.int64)
        if actions.shape != (cfg.max_nodes,):
            raise InvalidActionError(f"joint action must have shape ({cfg.max_nodes},)")
        for i in range(cfg.max_nodes):
            a = int(actions[i])
            if a < 0 or a >= lay.n_actions or self._masks[i, a] == 0.0:
                raise InvalidActionError(f"agent {i}: action {a} is masked")

        prev_obs, prev_masks = self._obs, self._masks
        resolved: list[OutcomeRecord] = []

        # 1. apply decisions for nodes holding a task
        for i in range(cfg.max_nodes):
            if not self.alive[i] or not self.inbox[i]:
                continue
            a = int(actions[i])
            if a == lay.idle_action:  # masked when a task is pending
                continue
            flight = self.inbox[i].popleft()
            if a == lay.local_action:
                self.exec_q[i].append(flight)
            else:
                self.buffers.setdefault((i, a), deque()).append(flight)

        # 2. undecided inbox tasks wait another slot (counts as cpu-side wait)
        for i in range(cfg.max_nodes):
            for flight in self.inbox[i]:
                flight.task.wait_cpu_slots += 1

        # 3. execution queues: spend cpu budget, resolve completions
        for i in range(cfg.max_nodes):
            if not self.alive[i]:
                continue
            budget = self.cpu_hz[i] * cfg.slot_s
            q = self.exec_q[i]
            while q and budget > 1e-9:
                head = q[0]
                head.started = True
                take = min(budget, head.remaining_cycles)
                head.remaining_cycles -= take
                budget -= take
                if head.remaining_cycles <= 1e-6:
                    q.popleft()
                    resolved.append(self._resolve_exec(head, i))
            for idx, flight in enumerate(q):
                if idx >= 1:
                    flight.task.wait_cpu_slots += 1

        # 4. transmission buffers: spend link budget, deliver or fail
        for (i, j) in sorted(self.buffers):
            q = self.buffers[(i, j)]
            if not q:
                continue
            # both endpoints alive here; deaths purge their buffers
            budget = self.link_rate[i, j] * cfg.slot_s
            while q and budget > 1e-9:
                head = q[0]
                head.started = True
                take = min(budget, head.remaining_bits)
                head.remaining_bits -= take
                budget -= take
                if head.remaining_bits <= 1e-6:
                    q.popleft()
                    rec = self._deliver(head, i, j)
                    if rec is not None:
                        resolved.append(rec)
            for idx, flight in enumerate(q):
                if idx >= 1:
                    flight.task.wait_tx_slots += 1

        # 5. churn: deaths purge queues (lost tasks are reliability violations)
        if cfg.node_death_prob > 0.0:
            dies = self.streams.topology.random(cfg.max_nodes) < cfg.node_death_prob
            for i in range(cfg.max_nodes):
                if self.alive[i] and dies[i]:
                    resolved.extend(self._kill_node(i))
        if cfg.node_appear_prob > 0.0:
            if self.streams.topology.random() < cfg.node_appear_prob:
                self._spawn_node()

        # 6. reward and bookkeeping for this slot
        reward = 0.0
        for rec in resolved:
            self.counters["resolved"] += 1
            if rec.outcome is Outcome.SUCCESS:
                self.counters["success"] += 1
                reward += 1.0
            else:
                self.counters[rec.outcome.value] += 1
                reward -= 1.0
        self.episode_outcomes.extend(resolved)
        self.return_sum += reward

        # 7. next slot arrivals, horizon check, next observation
        self.slot += 1
        self.done = self.slot >= cfg.horizon
        if not self.done:
            if cfg.scripted_tasks:
                self._spawn_scripted(self.slot)
            else:
                self._spawn_arrivals(self.slot)
        else:
            stranded = self._strand_in_flight()
            self.episode_outcomes.extend(stranded)
        self._obs, self._masks = self._build_obs()

        return TransitionRecord(
            slot=self.slot - 1, obs=prev_obs, masks=prev_masks, actions=actions,
            reward=reward, outcomes=resolved, next_obs=self._obs.copy(),
            next_masks=self._masks.copy(), done=self.done,
        )

    # ------------------------------------------------------------ current view

    @property
    def obs(self) -> np.ndarray:
        return self._obs.copy()

    @property
    def masks(self) -> np.ndarray:
        return self._masks.copy()

    def valid_actions(self, agent: int) -> list[int]:
        return [int(a) for a in np.nonzero(self._masks[agent])[0]]

    def pending_task(self, agent: int) -> Task | None:
        return self.inbox[agent][0].task if self.inbox[agent] else None

    def guidance_view(self, agent: int) -> list[NeighborView]:
        """Per-neighbor snapshot for prompt construction. Includes exec
        backlog, which the Dec-POMDP observation deliberately hides."""
        views = []
        for j in range(self.cfg.max_nodes):
            if not self._link_available(agent, j):
                continue
            views.append(NeighborView(
                node_id=j,
                rate_bps=float(self.link_rate[agent, j]),
                link_fail_rate=float(self.link_beta[agent, j]),
                exec_backlog=len(self.exec_q[j]) + len(self.inbox[j]),
                alive=bool(self.alive[j]),
            ))
        return views

    def episode_summary(self) -> dict:
        c = dict(self.counters)
        resolved = c["resolved"]
        c["success_rate"] = c["success"] / resolved if resolved else 1.0
        c["return"] = self.return_sum
        c["slots"] = self.slot
        return c

    # --------------------------------------------------------------- internals

    def _link_available(self, i: int, j: int) -> bool:
        return bool(self.link_exists[i, j] and self.alive[i] and self.alive[j])

    def _resolve_exec(self, flight: _Flight, node_i: int) -> OutcomeRecord:
        task = flight.task
        flight.exec_node = node_i
        exec_s = task.cycles / self.cpu_hz[node_i]
        p_exec = math.exp(-(self.alpha[node_i] + self.gamma[node_i]) * exec_s)
        flight.rel *= p_exec
        delay = (task.wait_slots * self.cfg.slot_s) + exec_s + flight.trans_s
        if self.cfg.sample_failures and \
                self.streams.failures.random() >= p_exec:
            outcome = Outcome.RELIABILITY_VIOLATION
        else:
            outcome = task_outcome(delay, flight.rel, task)
        return OutcomeRecord(task.task_id, outcome, delay, flight.rel,
                             self.slot, node_i)

    def _deliver(self, flight: _Flight, i: int, j: int) -> OutcomeRecord | None:
        """Finish one hop; returns a record only if the hop failed."""
        task = flight.task
        hop_s = task.size_bits / self.link_rate[i, j]
        p_hop = math.exp(-self.link_beta[i, j] * hop_s)
        flight.trans_s += hop_s
        flight.rel *= p_hop
        if self.cfg.sample_failures and self.streams.failures.random() >= p_hop:
            return OutcomeRecord(task.task_id, Outcome.RELIABILITY_VIOLATION,
                                 (task.wait_slots * self.cfg.slot_s) + flight.trans_s,
                                 flight.rel, self.slot, -1)
        task.hops += 1
        flight.remaining_bits = task.size_bits  # reset for any further hop
        flight.started = False
        self.inbox[j].append(flight)
        return None

    def _kill_node(self, i: int) -> list[OutcomeRecord]:
        """Death loses every queued/in-transit task touching node i."""
        lost: list[_Flight] = []
        lost.extend(self.inbox[i])
        lost.extend(self.exec_q[i])
        self.inbox[i].clear()
        self.exec_q[i].clear()
        for key in list(self.buffers):
            if i in key:
                lost.extend(self.buffers[key])
                del self.buffers[key]
        self.alive[i] = False
        self.link_exists[i, :] = False
        self.link_exists[:, i] = False
        out = []
        for flight in lost:
            delay = (flight.task.wait_slots * self.cfg.slot_s) + flight.trans_s
            out.append(OutcomeRecord(flight.task.task_id,
                                     Outcome.RELIABILITY_VIOLATION,
                                     delay, 0.0, self.slot, -1))
        return out

    def _spawn_node(self) -> None:
        free = np.nonzero(~self.alive)[0]
        if free.size == 0:
            return
        i = int(free[0])
        rng = self.streams.topology
        spec = _sample_node(self.cfg, i, rng)
        self.alive[i] = True
        self.cpu_hz[i] = spec.cpu_hz
        self.lam[i] = spec.arrival_prob
        self.alpha[i] = spec.sw_fail_rate
        self.gamma[i] = spec.hw_fail_rate
        peers = np.nonzero(self.alive)[0]
        peers = peers[peers != i]
        if peers.size == 0:
            return
        deg = self.link_exists[np.ix_(peers, peers)].sum() / max(1, peers.size)
        want = min(peers.size, max(1, math.ceil(deg)))
        chosen = rng.choice(peers, size=want, replace=False)
        for j in sorted(int(j) for j in chosen):
            link = _sample_link(self.cfg, i, j, rng)
            self.link_exists[i, j] = self.link_exists[j, i] = True
            self.link_rate[i, j] = self.link_rate[j, i] = link.rate_bps
            self.link_beta[i, j] = self.link_beta[j, i] = link.link_fail_rate

    def _new_task(self, origin: int, slot: int, size_bits: float,
                  intensity: float, deadline: float, floor: float) -> _Flight:
        task = Task(task_id=self._task_counter, origin=origin, created_slot=slot,
                    size_bits=size_bits, intensity=intensity, deadline_s=deadline,
                    reliability_floor=floor)
        self._task_counter += 1
        self.counters["arrived"] += 1
        return _Flight(task)

    def _spawn_arrivals(self, slot: int) -> None:
        cfg = self.cfg
        rng = self.streams.arrivals
        draws = rng.random(cfg.max_nodes)
        for i in range(cfg.max_nodes):
            if not self.alive[i] or draws[i] >= self.lam[i]:
                continue
            size = rng.uniform(*cfg.size_bits_range)
            intensity = rng.uniform(*cfg.intensity_range)
            self.inbox[i].append(self._new_task(
                i, slot, size, intensity, cfg.deadline_s, cfg.reliability_floor))

    def _spawn_scripted(self, slot: int) -> None:
        for st in self.cfg.scripted_tasks:
            if st.slot != slot:
                continue
            if not self.alive[st.origin]:
                continue
            self.inbox[st.origin].append(self._new_task(
                st.origin, slot, st.size_bits, st.intensity,
                st.deadline_s or self.cfg.deadline_s,
                st.reliability_floor or self.cfg.reliability_floor))

    def _strand_in_flight(self) -> list[OutcomeRecord]:
        out = []
        flights: list[_Flight] = []
        for i in range(self.cfg.max_nodes):
            flights.extend(self.inbox[i])
            flights.extend(self.exec_q[i])
        for q in self.buffers.values():
            flights.extend(q)
        for flight in flights:
            self.counters["in_flight"] += 1
            out.append(OutcomeRecord(flight.task.task_id, Outcome.IN_FLIGHT,
                                     0.0, flight.rel, self.slot, -1))
        return out

    # ------------------------------------------------------------ observations

    def _build_obs(self) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        lay = self.layout
        n = cfg.max_nodes
        obs = np.zeros((n, lay.obs_dim))
        masks = np.zeros((n, lay.n_actions))

        exec_backlog = np.array(
            [len(self.exec_q[i]) + len(self.inbox[i]) for i in range(n)], dtype=float)
        buf_backlog = np.zeros(n)
        for (i, _j), q in self.buffers.items():
            buf_backlog[i] += len(q)

        alive_f = self.alive.astype(float)
        node_block = np.stack([
            self.lam,
            np.clip(self.alpha / cfg.fail_rate_norm, 0, 1),
            np.clip(self.gamma / cfg.fail_rate_norm, 0, 1),
            np.clip(self.cpu_hz / cfg.cpu_hz_range[1], 0, 1),
            np.clip(exec_backlog / cfg.queue_norm, 0, 1),
            np.clip(buf_backlog / cfg.queue_norm, 0, 1),
        ], axis=1) * alive_f[:, None]
        obs[:, :lay.NODE_FEATS] = node_block

        avail = self.link_exists & self.alive[:, None] & self.alive[None, :]
        backlog_n = np.clip(exec_backlog / cfg.queue_norm, 0, 1)
        link_feats = np.stack([
            np.clip(self.link_rate / cfg.link_bps_range[1], 0, 1),
            np.clip(self.link_beta / cfg.fail_rate_norm, 0, 1),
            np.ones((n, n)),
            np.broadcast_to(backlog_n[None, :], (n, n)),
        ], axis=2) * avail[:, :, None]
        obs[:, lay.NODE_FEATS + lay.TASK_FEATS:] = link_feats.reshape(n, -1)

        size_max = cfg.size_bits_range[1]
        cycles_max = cfg.size_bits_range[1] * cfg.intensity_range[1]
        task_present = np.zeros(n, dtype=bool)
        for i in range(n):
            if not self.alive[i] or not self.inbox[i]:
                continue
            t = self.inbox[i][0].task
            task_present[i] = True
            obs[i, lay.task_slice] = [
                min(1.0, t.size_bits / size_max),
                min(1.0, t.cycles / cycles_max),
                min(1.0, t.deadline_s / cfg.deadline_s),
                min(1.0, t.hops / max(1, cfg.max_hops)),
                min(1.0, (t.wait_slots * cfg.slot_s) / t.deadline_s),
            ]

        # masks: forwards need a task, hop budget, and a live link; local needs
        # a live node; idle is only for task-less slots
        can_forward = task_present & self.alive
        for i in range(n):
            if can_forward[i] and self.inbox[i][0].task.hops < cfg.max_hops:
                masks[i, :n] = avail[i].astype(float)
            masks[i, lay.local_action] = 1.0 if self.alive[i] else 0.0
            masks[i, lay.idle_action] = 0.0 if task_present[i] else 1.0
        return obs, masks
