"""Delay, reliability and outcome arithmetic for collaborative edge offloading.

Everything here is pure: no randomness, no queues, no clocks. Internal units are
bits, cycles, seconds and failures-per-second. Config files speak KB and MB/s;
use the kb_to_bits / mbps_to_bps helpers at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "Outcome",
    "NodeSpec",
    "LinkSpec",
    "Task",
    "Topology",
    "DeadExecutorError",
    "UnavailableLinkError",
    "kb_to_bits",
    "mbps_to_bps",
    "ghz_to_hz",
    "exec_delay",
    "trans_delay",
    "exec_reliability",
    "link_reliability",
    "reliability",
    "total_delay",
    "task_outcome",
    "success_rate",
]

KB_BITS = 8000.0          # 1 KB = 1000 bytes = 8000 bits
MBPS_BPS = 8.0e6          # 1 MB/s = 8e6 bit/s
GHZ_HZ = 1.0e9


def kb_to_bits(kb: float) -> float:
    return float(kb) * KB_BITS


def mbps_to_bps(mbps: float) -> float:
    return float(mbps) * MBPS_BPS


def ghz_to_hz(ghz: float) -> float:
    return float(ghz) * GHZ_HZ


class Outcome(str, Enum):
    """Terminal label of a resolved task."""

    SUCCESS = "success"
    DEADLINE_VIOLATION = "deadline_violation"
    RELIABILITY_VIOLATION = "reliability_violation"
    IN_FLIGHT = "in_flight"  # unresolved at the horizon; excluded from rates


class DeadExecutorError(ValueError):
    """Raised when a delay/reliability query names a dead node as executor."""


class UnavailableLinkError(ValueError):
    """Raised when a transmission query names a missing or down link."""


@dataclass
class NodeSpec:
    """Static description of an edge node.

    cpu_hz:      CPU frequency F, cycles/s
    memory_bits: storage budget M, bits
    arrival_prob: per-slot Bernoulli task arrival probability
    sw_fail_rate / hw_fail_rate: Poisson failure rates alpha, gamma, 1/s
    """

    node_id: int
    cpu_hz: float
    memory_bits: float
    arrival_prob: float
    sw_fail_rate: float
    hw_fail_rate: float
    alive: bool = True

    def __post_init__(self) -> None:
        if self.cpu_hz <= 0:
            raise ValueError(f"node {self.node_id}: cpu_hz must be positive")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ValueError(f"node {self.node_id}: arrival_prob outside [0, 1]")
        if min(self.sw_fail_rate, self.hw_fail_rate) < 0:
            raise ValueError(f"node {self.node_id}: failure rates must be >= 0")


@dataclass
class LinkSpec:
    """Undirected link between two nodes.

    rate_bps:       transmission rate R, bit/s
    link_fail_rate: Poisson failure rate beta, 1/s
    """

    a: int
    b: int
    rate_bps: float
    link_fail_rate: float
    available: bool = True

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise ValueError("self links are not allowed")
        if self.rate_bps <= 0:
            raise ValueError(f"link ({self.a},{self.b}): rate_bps must be positive")
        if self.link_fail_rate < 0:
            raise ValueError(f"link ({self.a},{self.b}): link_fail_rate must be >= 0")

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


@dataclass
class Task:
    """One offloadable task and its accumulated bookkeeping.

    size_bits / intensity: input size S (bits) and compute density Delta
    (cycles/bit); cycles is always their exact product. Waits are counted in
    whole slots, split into the transmission-side and computation-side shares.
    """

    task_id: int
    origin: int
    created_slot: int
    size_bits: float
    intensity: float
    deadline_s: float
    reliability_floor: float
    cycles: float = field(init=False)
    hops: int = 0
    wait_tx_slots: int = 0
    wait_cpu_slots: int = 0

    def __post_init__(self) -> None:
        if self.size_bits < 0 or self.intensity < 0:
            raise ValueError(f"task {self.task_id}: size/intensity must be >= 0")
        if self.deadline_s <= 0:
            raise ValueError(f"task {self.task_id}: deadline must be positive")
        if not 0.0 < self.reliability_floor <= 1.0:
            raise ValueError(f"task {self.task_id}: reliability floor outside (0, 1]")
        self.cycles = self.size_bits * self.intensity

    @property
    def wait_slots(self) -> int:
        """Total accumulated waiting, in slots."""
        return self.wait_tx_slots + self.wait_cpu_slots


@dataclass
class Topology:
    """Nodes plus undirected links, keyed by sorted id pairs."""

    nodes: dict[int, NodeSpec]
    links: dict[tuple[int, int], LinkSpec]

    def __post_init__(self) -> None:
        for key, link in self.links.items():
            if key != link.key():
                raise ValueError(f"link stored under wrong key {key}")
            if link.a not in self.nodes or link.b not in self.nodes:
                raise ValueError(f"link {key} references unknown node")

    def link(self, i: int, j: int) -> LinkSpec | None:
        return self.links.get((i, j) if i < j else (j, i))

    def neighbors(self, i: int) -> list[int]:
        out = []
        for (a, b) in self.links:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


def exec_delay(cycles: float, node: NodeSpec) -> float:
    """Execution delay C / F in seconds on the given node."""
    if not node.alive:
        raise DeadExecutorError(f"node {node.node_id} is dead")
    return cycles / node.cpu_hz


def trans_delay(size_bits: float, link: LinkSpec) -> float:
    """Transmission delay S / R in seconds over one hop."""
    if not link.available:
        raise UnavailableLinkError(f"link ({link.a},{link.b}) is unavailable")
    return size_bits / link.rate_bps


def exec_reliability(exec_s: float, node: NodeSpec) -> float:
    """exp(-(alpha + gamma) * T_exec): survival of the compute phase."""
    return math.exp(-(node.sw_fail_rate + node.hw_fail_rate) * exec_s)


def link_reliability(trans_s: float, link: LinkSpec) -> float:
    """exp(-beta * T_trans): survival of one transmission hop."""
    return math.exp(-link.link_fail_rate * trans_s)


def reliability(exec_s: float, trans_s: float, node: NodeSpec,
                link: LinkSpec | None) -> float:
    """End-to-end expected reliability of a single-hop placement.

    Local execution passes link=None and trans_s must then be 0. Multi-hop
    routes multiply additional link_reliability factors per hop; callers that
    track hops do that accumulation themselves.
    """
    rel = exec_reliability(exec_s, node)
    if link is not None:
        rel *= link_reliability(trans_s, link)
    elif trans_s != 0.0:
        raise UnavailableLinkError("nonzero transmission time without a link")
    return rel


def total_delay(exec_s: float, trans_s: float, wait_tx_slots: int,
                wait_cpu_slots: int, slot_s: float) -> float:
    """End-to-end delay: both waiting shares (slots -> seconds) + T_exec + T_trans."""
    return (wait_tx_slots + wait_cpu_slots) * slot_s + exec_s + trans_s


def task_outcome(delay_s: float, rel: float, task: Task) -> Outcome:
    """Label a resolved task.

    Deadline is checked first so a task that is both late and unreliable is a
    deadline violation. `rel` may be an expected probability (planning) or a
    realized 0/1 survival indicator (simulation).
    """
    if not 0.0 <= rel <= 1.0:
        raise ValueError(f"reliability {rel} outside [0, 1]")
    if delay_s > task.deadline_s:
        return Outcome.DEADLINE_VIOLATION
    if rel < task.reliability_floor:
        return Outcome.RELIABILITY_VIOLATION
    return Outcome.SUCCESS


def success_rate(outcomes: list[Outcome]) -> float:
    """Fraction of resolved tasks labeled SUCCESS; in-flight entries are excluded.

    An empty (or all in-flight) list scores 1.0: no assigned task failed.
    """
    resolved = [o for o in outcomes if o is not Outcome.IN_FLIGHT]
    if not resolved:
        return 1.0
    return sum(o is Outcome.SUCCESS for o in resolved) / len(resolved)
