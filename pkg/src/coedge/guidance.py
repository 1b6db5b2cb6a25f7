"""Language-model guidance for offloading decisions.

A provider (scripted rule, HTTP endpoint, or recorded replay) receives a
deterministic machine-parseable prompt describing the deciding node, its
pending task, its outgoing links, retrieved memory context, and a risk
summary. The provider answers with one schema line

    ACTION=<LOCAL|FORWARD> TARGET=<id>

and every deviation from that schema, a masked target, a provider exception,
or a timeout falls back to a valid LOCAL decision flagged ``valid=False``.
Decisions are therefore total: no provider behavior can emit an invalid
action or block the simulation beyond the configured timeout.

Each agent owns a dual memory: a short-term store of per-task trajectory
items (soft-capped, compacted into summary items) and a long-term FIFO store
of reflection items written after negative rewards.
"""

from __future__ import annotations

import json
import re
import threading
import urllib.request
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env import EdgeEnv, EnvConfig, NeighborView, ObsLayout, OutcomeRecord
from .heuristics import Policy
from .model import Outcome, Task

DECISION_SCHEMA = "ACTION=<LOCAL|FORWARD> TARGET=<id>"
REFLECT_SCHEMA = "CAUSE=<word> ADVICE=<LOCAL|FORWARD> TARGET=<id>"

_DECISION_RE = re.compile(r"^\s*ACTION=(LOCAL|FORWARD)(?:\s+TARGET=(-?\d+))?\s*$")
_REFLECT_RE = re.compile(
    r"^\s*CAUSE=(\S+)(?:\s+ADVICE=(LOCAL|FORWARD)(?:\s+TARGET=(-?\d+))?)?\s*$")

# outcome label -> root cause tag used by the scripted reflection provider
CAUSE_LOOKUP = {
    Outcome.DEADLINE_VIOLATION.value: "deadline",
    Outcome.RELIABILITY_VIOLATION.value: "reliability",
}

MEMORY_KINDS = ("trajectory", "summary", "reflection")
TASK_TYPES = ("low", "mid", "high")


class ProviderError(RuntimeError):
    """Transport or protocol failure inside a provider."""


# --------------------------------------------------------------------- config


@dataclass
class GuidanceConfig:
    """Retrieval weights, memory capacities, and query cadence."""

    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    k: int = 4                   # retrieved context items per prompt
    short_cap: int = 256         # soft cap; compaction brings it back down
    long_cap: int = 128          # hard FIFO bound on reflections
    compact_batch: int = 32      # trajectory items folded into one summary
    stride: int = 1              # provider is queried every `stride` slots
    timeout_s: float | None = None
    reflect_on_negative: bool = True

    def __post_init__(self) -> None:
        if len(self.weights) != 4 or any(w < 0.0 for w in self.weights):
            raise ValueError("need 4 non-negative retrieval weights")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("retrieval weights must sum to 1")
        if self.k < 1 or self.short_cap < 1 or self.long_cap < 1:
            raise ValueError("k and memory capacities must be positive")
        if self.compact_batch < 2:
            raise ValueError("compact_batch must fold at least 2 items")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.timeout_s is not None and self.timeout_s <= 0.0:
            raise ValueError("timeout_s must be positive or None")


# --------------------------------------------------------------------- memory


@dataclass
class MemoryItem:
    """One remembered decision, summary, or reflection.

    `task_profile` is (size, intensity, deadline) normalized to [0, 1] and
    `load_snapshot` is the (exec, buffer) backlog pair from the observation,
    so similarity terms stay unit-free.
    """

    node_id: int
    task_type: str
    task_profile: tuple[float, float, float]
    load_snapshot: tuple[float, float]
    action: str                  # "LOCAL" | "FORWARD"
    reward: float
    kind: str = "trajectory"
    target: int | None = None
    cause: str | None = None     # failure tag; set on violations/reflections
    aggregates: dict | None = None  # summary items only
    index: int = -1              # insertion order, stamped by the store

    def __post_init__(self) -> None:
        if self.kind not in MEMORY_KINDS:
            raise ValueError(f"unknown memory kind {self.kind!r}")
        if self.action not in ("LOCAL", "FORWARD"):
            raise ValueError(f"unknown action tag {self.action!r}")
        if len(self.task_profile) != 3 or len(self.load_snapshot) != 2:
            raise ValueError("profile must be length 3, load length 2")


class MemoryStore:
    """Single-writer dual store: short-term trajectories and summaries plus
    a bounded FIFO of long-term reflections."""

    def __init__(self, short_cap: int = 256, long_cap: int = 128):
        self.short_cap = short_cap
        self.short: list[MemoryItem] = []
        self.long: deque[MemoryItem] = deque(maxlen=long_cap)
        self._counter = 0
        self._cache_key: tuple | None = None
        self._cache: tuple | None = None

    def add(self, item: MemoryItem) -> MemoryItem:
        item.index = self._counter
        self._counter += 1
        if item.kind == "reflection":
            self.long.append(item)  # deque maxlen enforces the FIFO bound
        else:
            self.short.append(item)
        return item

    def items(self) -> list[MemoryItem]:
        return self.short + list(self.long)

    def feature_table(self) -> tuple:
        """(items, node ids, task types, profiles, loads, indices) as arrays
        for vectorized scoring; rebuilt whenever the stores change. The key
        is sound: add() bumps the counter and compaction shrinks the short
        store, so any mutation changes it."""
        key = (self._counter, len(self.short), len(self.long))
        if self._cache_key != key:
            items = self.items()
            self._cache = (
                items,
                np.array([it.node_id for it in items], dtype=np.int64),
                np.array([it.task_type for it in items], dtype=object),
                np.array([it.task_profile for it in items],
                         dtype=np.float64).reshape(len(items), 3),
                np.array([it.load_snapshot for it in items],
                         dtype=np.float64).reshape(len(items), 2),
                np.array([it.index for it in items], dtype=np.int64),
            )
            self._cache_key = key
        return self._cache

    def __len__(self) -> int:
        return len(self.short) + len(self.long)


def relevance(query, item: MemoryItem,
              weights: tuple[float, float, float, float]) -> float:
    """Weighted sum of locality, type match, task similarity, and load
    similarity; each term lies in [0, 1]."""
    w1, w2, w3, w4 = weights
    loc = 1.0 if item.node_id == query.node_id else 0.0
    typ = 1.0 if item.task_type == query.task_type else 0.0
    dt = [min(abs(a - b), 1.0) for a, b in zip(query.task_profile, item.task_profile)]
    dl = [min(abs(a - b), 1.0) for a, b in zip(query.load_snapshot, item.load_snapshot)]
    sim_task = 1.0 - sum(dt) / 3.0
    sim_load = 1.0 - sum(dl) / 2.0
    return w1 * loc + w2 * typ + w3 * sim_task + w4 * sim_load


def retrieve(query, store: MemoryStore,
             weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25),
             k: int = 4) -> list[MemoryItem]:
    """Top-k most relevant items across both stores; relevance ties break
    toward the most recently inserted item.

    Scores all items at once against the store's cached feature table; the
    term order matches relevance() exactly, so results are bit-identical to
    scoring items one at a time."""
    if len(weights) != 4 or any(w < 0.0 for w in weights):
        raise ValueError("need 4 non-negative retrieval weights")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("retrieval weights must sum to 1")
    items, nodes, types, profiles, loads, idx = store.feature_table()
    if not items:
        return []
    w1, w2, w3, w4 = weights
    loc = (nodes == query.node_id).astype(np.float64)
    typ = (types == query.task_type).astype(np.float64)
    dt = np.minimum(np.abs(profiles - np.asarray(query.task_profile)), 1.0)
    dl = np.minimum(np.abs(loads - np.asarray(query.load_snapshot)), 1.0)
    sim_task = 1.0 - (dt[:, 0] + dt[:, 1] + dt[:, 2]) / 3.0
    sim_load = 1.0 - (dl[:, 0] + dl[:, 1]) / 2.0
    scores = w1 * loc + w2 * typ + w3 * sim_task + w4 * sim_load
    order = np.lexsort((-idx, -scores))
    return [items[i] for i in order[:k]]


def summarize(batch: list[MemoryItem], node_id: int) -> MemoryItem:
    """Fold trajectory items into one summary item whose aggregates preserve
    the batch total reward exactly."""
    if not batch:
        raise ValueError("cannot summarize an empty batch")
    rewards_by_action: dict[str, list[float]] = {}
    failures: dict[str, int] = {}
    for it in batch:
        rewards_by_action.setdefault(it.action, []).append(it.reward)
        if it.reward < 0.0 and it.cause is not None:
            failures[it.cause] = failures.get(it.cause, 0) + 1
    total = float(sum(it.reward for it in batch))
    aggregates = {
        "count": len(batch),
        "total_reward": total,
        "mean_reward": {a: float(np.mean(v)) for a, v in sorted(rewards_by_action.items())},
        "failures": dict(sorted(failures.items())),
    }
    profile = tuple(float(np.mean([it.task_profile[i] for it in batch]))
                    for i in range(3))
    load = tuple(float(np.mean([it.load_snapshot[i] for it in batch]))
                 for i in range(2))
    action = max(sorted(rewards_by_action), key=lambda a: len(rewards_by_action[a]))
    types = [it.task_type for it in batch]
    task_type = max(sorted(set(types)), key=types.count)
    return MemoryItem(node_id=node_id, task_type=task_type, task_profile=profile,
                      load_snapshot=load, action=action,
                      reward=total / len(batch), kind="summary",
                      aggregates=aggregates)


def compact(store: MemoryStore, batch_size: int = 32) -> MemoryStore:
    """Replace the oldest trajectory batches with summary items until the
    short store fits its cap. Summaries are never re-compacted, so repeated
    calls are idempotent once the store fits."""
    while len(store.short) > store.short_cap:
        batch = [it for it in store.short if it.kind == "trajectory"][:batch_size]
        if len(batch) < 2:
            break  # nothing left to fold; cap is soft
        summary = summarize(batch, node_id=batch[0].node_id)
        batch_ids = {id(it) for it in batch}
        pos = next(i for i, it in enumerate(store.short) if id(it) in batch_ids)
        store.short = [it for it in store.short if id(it) not in batch_ids]
        store.short.insert(pos, summary)
        summary.index = store._counter
        store._counter += 1
    return store


# ------------------------------------------------------------ prompt building


@dataclass(frozen=True)
class LinkRisk:
    node_id: int
    trans_s: float
    link_risk: float   # 1 - exp(-beta * T^t)
    load: int          # privileged target backlog


@dataclass(frozen=True)
class RiskSummary:
    """Expected local waiting plus per-link transmission risk."""

    local_wait_s: float
    exec_risk: float   # 1 - exp(-(alpha + gamma) * T^c)
    links: tuple[LinkRisk, ...]


@dataclass(frozen=True)
class PromptBundle:
    """Structured prompt sections in fixed order plus their rendered text."""

    node_id: int
    node: dict
    task: dict
    links: tuple[dict, ...]
    context: tuple[MemoryItem, ...]
    risk: RiskSummary
    rendered: str


@dataclass(frozen=True)
class GuidanceDecision:
    """Outcome of one provider query, always resolvable to a valid action."""

    action_kind: str             # "local" | "forward"
    target: int | None
    action: int                  # env action id, guaranteed mask-valid
    raw_provider_output: str
    valid: bool                  # False when the fallback was taken


@dataclass
class Diagnostic:
    """Everything the reflection step knows about one finished decision."""

    node_id: int
    task_type: str
    task_profile: tuple[float, float, float]
    load_snapshot: tuple[float, float]
    size_bits: float
    intensity: float
    deadline_s: float
    action: str
    target: int | None
    risk: RiskSummary | None
    reward: float = 0.0
    outcome: str = ""


def task_type_tag(intensity: float, cfg: EnvConfig) -> str:
    """Tercile bucket of compute density over the configured range."""
    lo, hi = cfg.intensity_range
    span = max(hi - lo, 1e-12)
    x = (intensity - lo) / span
    if x < 1.0 / 3.0:
        return "low"
    if x < 2.0 / 3.0:
        return "mid"
    return "high"


def task_profile_of(size_bits: float, intensity: float, deadline_s: float,
                    cfg: EnvConfig) -> tuple[float, float, float]:
    lo, hi = cfg.intensity_range
    span = max(hi - lo, 1e-12)
    return (
        min(size_bits / cfg.size_bits_range[1], 1.0),
        min(max((intensity - lo) / span, 0.0), 1.0),
        min(deadline_s / cfg.deadline_s, 1.0),
    )


def compute_risk(obs_row: np.ndarray, views: list[NeighborView], task: Task,
                 cfg: EnvConfig, layout: ObsLayout) -> RiskSummary:
    """Risk summary from the agent's own observation plus the privileged
    per-neighbor backlog. Local wait is queue length times the mean service
    time; execution and link risks are exponential failure probabilities over
    the predicted busy times."""
    f_own = max(float(obs_row[3]) * cfg.cpu_hz_range[1], 1.0)
    ahead = max(0.0, float(obs_row[4]) * cfg.queue_norm - 1.0)
    c_mean = float(np.mean(cfg.size_bits_range) * np.mean(cfg.intensity_range))
    ab_own = (float(obs_row[1]) + float(obs_row[2])) * cfg.fail_rate_norm
    exec_s = task.cycles / f_own
    links = []
    for v in sorted(views, key=lambda v: v.node_id):
        if not v.alive or v.rate_bps <= 0.0:
            continue
        trans_s = task.size_bits / v.rate_bps
        links.append(LinkRisk(
            node_id=v.node_id,
            trans_s=trans_s,
            link_risk=float(1.0 - np.exp(-v.link_fail_rate * trans_s)),
            load=v.exec_backlog,
        ))
    return RiskSummary(
        local_wait_s=ahead * (c_mean / f_own),
        exec_risk=float(1.0 - np.exp(-ab_own * exec_s)),
        links=tuple(links),
    )


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _render_ctx(it: MemoryItem) -> str:
    prof = ",".join(_fmt(v) for v in it.task_profile)
    load = ",".join(_fmt(v) for v in it.load_snapshot)
    tgt = "-" if it.target is None else str(it.target)
    cause = it.cause if it.cause else "-"
    return (f"CTX kind={it.kind} node={it.node_id} type={it.task_type} "
            f"profile={prof} load={load} action={it.action} target={tgt} "
            f"reward={_fmt(it.reward)} cause={cause}")


def _render_risk(risk: RiskSummary) -> list[str]:
    lines = [f"RISK local_wait_s={_fmt(risk.local_wait_s)} "
             f"exec_risk={_fmt(risk.exec_risk)}"]
    for lr in risk.links:
        lines.append(f"RISKLINK id={lr.node_id} trans_s={_fmt(lr.trans_s)} "
                     f"link_risk={_fmt(lr.link_risk)} load={lr.load}")
    return lines


def build_prompt(agent: int, obs_row: np.ndarray, views: list[NeighborView],
                 task: Task, store: MemoryStore, cfg: EnvConfig,
                 layout: ObsLayout, gcfg: GuidanceConfig | None = None,
                 mask_row: np.ndarray | None = None) -> PromptBundle:
    """Assemble the fixed-order sections (node, task, links, context) plus
    the risk summary and render them deterministically."""
    gcfg = gcfg if gcfg is not None else GuidanceConfig()
    node = {
        "id": agent,
        "cpu_ghz": float(obs_row[3]) * cfg.cpu_ghz_range[1],
        "sw": float(obs_row[1]) * cfg.fail_rate_norm,
        "hw": float(obs_row[2]) * cfg.fail_rate_norm,
        "exec_q": int(round(float(obs_row[4]) * cfg.queue_norm)),
        "buf_q": int(round(float(obs_row[5]) * cfg.queue_norm)),
    }
    tdict = {
        "size_kb": task.size_bits / 8000.0,
        "intensity": task.intensity,
        "deadline_s": task.deadline_s,
        "hops": task.hops,
        "waited_s": task.wait_slots * cfg.slot_s,
    }
    usable = [v for v in sorted(views, key=lambda v: v.node_id)
              if v.alive and v.rate_bps > 0.0
              and (mask_row is None or mask_row[v.node_id] == 1.0)]
    links = tuple({
        "id": v.node_id,
        "rate_mbps": v.rate_bps / 8e6,
        "beta": v.link_fail_rate,
        "load": v.exec_backlog,
    } for v in usable)
    query = MemoryItem(
        node_id=agent,
        task_type=task_type_tag(task.intensity, cfg),
        task_profile=task_profile_of(task.size_bits, task.intensity,
                                     task.deadline_s, cfg),
        load_snapshot=(float(obs_row[4]), float(obs_row[5])),
        action="LOCAL", reward=0.0,
    )
    context = tuple(retrieve(query, store, gcfg.weights, gcfg.k)) if len(store) else ()
    risk = compute_risk(obs_row, usable, task, cfg, layout)

    lines = [f"NODE id={node['id']} cpu_ghz={_fmt(node['cpu_ghz'])} "
             f"sw={_fmt(node['sw'])} hw={_fmt(node['hw'])} "
             f"exec_q={node['exec_q']} buf_q={node['buf_q']}",
             f"TASK size_kb={_fmt(tdict['size_kb'])} "
             f"intensity={_fmt(tdict['intensity'])} "
             f"deadline_s={_fmt(tdict['deadline_s'])} hops={tdict['hops']} "
             f"waited_s={_fmt(tdict['waited_s'])}"]
    for ld in links:
        lines.append(f"LINK id={ld['id']} rate_mbps={_fmt(ld['rate_mbps'])} "
                     f"beta={_fmt(ld['beta'])} load={ld['load']}")
    for it in context:
        lines.append(_render_ctx(it))
    lines.extend(_render_risk(risk))
    return PromptBundle(node_id=agent, node=node, task=tdict, links=links,
                        context=context, risk=risk, rendered="\n".join(lines))


def render_diag(diag: Diagnostic) -> str:
    """Reflection prompt: the decision, its observed outcome, the task, and
    the risk summary that was available when the decision was made."""
    tgt = "-" if diag.target is None else str(diag.target)
    lines = [f"DIAG node={diag.node_id} type={diag.task_type} "
             f"action={diag.action} target={tgt} reward={_fmt(diag.reward)} "
             f"outcome={diag.outcome or '-'}",
             f"TASK size_kb={_fmt(diag.size_bits / 8000.0)} "
             f"intensity={_fmt(diag.intensity)} "
             f"deadline_s={_fmt(diag.deadline_s)} hops=0 waited_s=0"]
    if diag.risk is not None:
        lines.extend(_render_risk(diag.risk))
    return "\n".join(lines)


_KV_RE = re.compile(r"(\w+)=(\S+)")


def _parse_kv(line: str) -> dict:
    out = {}
    for key, val in _KV_RE.findall(line):
        try:
            num = float(val)
            out[key] = int(num) if num.is_integer() and "." not in val and "e" not in val.lower() else num
        except ValueError:
            out[key] = val
    return out


def parse_prompt(text: str) -> dict:
    """Invert the prompt rendering into structured sections. Raises
    ValueError when a required section is missing or malformed."""
    sections: dict = {"links": [], "ctx": [], "risk_links": []}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        tag, _, rest = line.partition(" ")
        fields = _parse_kv(rest)
        if tag == "NODE":
            sections["node"] = fields
        elif tag == "TASK":
            sections["task"] = fields
        elif tag == "LINK":
            sections["links"].append(fields)
        elif tag == "CTX":
            sections["ctx"].append(fields)
        elif tag == "RISK":
            sections["risk"] = fields
        elif tag == "RISKLINK":
            sections["risk_links"].append(fields)
        elif tag == "DIAG":
            sections["diag"] = fields
        else:
            raise ValueError(f"unknown prompt line tag {tag!r}")
    if "task" not in sections:
        raise ValueError("prompt is missing its TASK section")
    if "node" not in sections and "diag" not in sections:
        raise ValueError("prompt is missing NODE and DIAG sections")
    return sections


# ------------------------------------------------------------------ providers


class Provider:
    """Completion interface: prompt text plus the expected schema line in,
    one response line out. Implementations may raise; callers must treat any
    exception as a failed query."""

    name = "provider"

    def complete(self, prompt: str, schema: str) -> str:
        raise NotImplementedError


class ScriptedProvider(Provider):
    """Deterministic rule standing in for a language model.

    Decision queries score every option by predicted reliability times the
    remaining deadline slack fraction, using config means for everything the
    prompt does not state. Reflection queries tag the root cause from the
    outcome label and suggest the leading alternative. With `noise > 0` the
    provider emits schema-breaking prose with that probability, which
    exercises the fallback path end to end.
    """

    name = "scripted"

    def __init__(self, cfg: EnvConfig, noise: float = 0.0, seed: int = 0):
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        self.cfg = cfg
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.f_mean = float(np.mean(cfg.cpu_hz_range))
        self.c_mean = float(np.mean(cfg.size_bits_range)
                            * np.mean(cfg.intensity_range))
        self.ab_mean = float(np.mean(cfg.sw_fail_range)
                             + np.mean(cfg.hw_fail_range))

    def complete(self, prompt: str, schema: str) -> str:
        if self.noise > 0.0 and self.rng.random() < self.noise:
            return "the network looks congested, maybe try a different node"
        fields = parse_prompt(prompt)
        if schema == REFLECT_SCHEMA:
            return self._reflect(fields)
        return self._decide(fields)

    def _score_links(self, fields: dict, cycles: float,
                     deadline: float) -> list[tuple[float, int]]:
        scores = []
        exec_s = cycles / self.f_mean
        for entry in fields.get("risk_links", []):
            est = (entry["trans_s"] + self.cfg.slot_s
                   + entry["load"] * (self.c_mean / self.f_mean) + exec_s)
            rel = (1.0 - entry["link_risk"]) * float(np.exp(-self.ab_mean * exec_s))
            scores.append((rel * max(0.0, 1.0 - est / deadline), int(entry["id"])))
        return scores

    def _decide(self, fields: dict) -> str:
        task = fields["task"]
        size_bits = task["size_kb"] * 8000.0
        cycles = size_bits * task["intensity"]
        deadline = task["deadline_s"]
        node = fields["node"]
        risk = fields.get("risk", {"local_wait_s": 0.0, "exec_risk": 0.0})
        f_own = max(node["cpu_ghz"] * 1e9, 1.0)
        est_local = risk["local_wait_s"] + cycles / f_own
        best_score = (1.0 - risk["exec_risk"]) * max(0.0, 1.0 - est_local / deadline)
        best = "ACTION=LOCAL"
        for score, j in self._score_links(fields, cycles, deadline):
            if score > best_score + 1e-12:
                best_score = score
                best = f"ACTION=FORWARD TARGET={j}"
        return best

    def _reflect(self, fields: dict) -> str:
        diag = fields["diag"]
        cause = CAUSE_LOOKUP.get(str(diag.get("outcome", "")), "unknown")
        if diag.get("action") == "FORWARD":
            return f"CAUSE={cause} ADVICE=LOCAL"
        task = fields["task"]
        size_bits = task["size_kb"] * 8000.0
        scores = self._score_links(fields, size_bits * task["intensity"],
                                   task["deadline_s"])
        if scores:
            _, j = max(scores, key=lambda s: (s[0], -s[1]))
            return f"CAUSE={cause} ADVICE=FORWARD TARGET={j}"
        return f"CAUSE={cause} ADVICE=LOCAL"


class HttpProvider(Provider):
    """POSTs {"prompt", "schema"} as JSON and maps the {"action", "target"}
    reply onto the schema line. Raw response bodies are logged verbatim when
    a log path is given, so a run can be replayed offline."""

    name = "http"

    def __init__(self, endpoint: str, timeout_s: float = 1.0, retries: int = 0,
                 log_path: str | None = None):
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.retries = retries
        self.log_path = log_path

    def _log(self, prompt: str, schema: str, response: str) -> None:
        if self.log_path is None:
            return
        rec = {"prompt": prompt, "schema": schema, "response": response}
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")

    def complete(self, prompt: str, schema: str) -> str:
        payload = json.dumps({"prompt": prompt, "schema": schema}).encode()
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=payload,
                    headers={"Content-Type": "application/json"})
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    body = resp.read().decode("utf-8", errors="replace")
                self._log(prompt, schema, body)
                return self._to_schema_line(body, schema)
            except ProviderError:
                raise
            except Exception as exc:  # transport errors, bad json, timeouts
                last = exc
        raise ProviderError(f"http provider failed: {last}")

    @staticmethod
    def _to_schema_line(body: str, schema: str) -> str:
        if schema != DECISION_SCHEMA:
            return body.strip()
        data = json.loads(body)
        action = data.get("action")
        target = data.get("target")
        if action == "local":
            return "ACTION=LOCAL"
        if action == "forward" and isinstance(target, int):
            return f"ACTION=FORWARD TARGET={target}"
        return body.strip()  # let the schema check reject it


class ReplayProvider(Provider):
    """Serves responses recorded by HttpProvider logging, in order."""

    name = "replay"

    def __init__(self, path: str, strict: bool = False):
        self.records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self.records.append(json.loads(line))
        self.strict = strict
        self.pos = 0

    def complete(self, prompt: str, schema: str) -> str:
        if self.pos >= len(self.records):
            raise ProviderError("replay log exhausted")
        rec = self.records[self.pos]
        self.pos += 1
        if self.strict and rec["prompt"] != prompt:
            raise ProviderError(f"replay mismatch at record {self.pos - 1}")
        return HttpProvider._to_schema_line(rec["response"], schema)


def _call_provider(provider: Provider, prompt: str, schema: str,
                   timeout_s: float | None) -> str | None:
    """Run one provider query; None on exception or timeout. With a timeout
    the call runs on a daemon thread so a stalling provider cannot block the
    simulation past the deadline."""
    if timeout_s is None:
        try:
            return provider.complete(prompt, schema)
        except Exception:
            return None
    box: dict = {}

    def run() -> None:
        try:
            box["text"] = provider.complete(prompt, schema)
        except Exception as exc:
            box["error"] = exc

    th = threading.Thread(target=run, daemon=True)
    th.start()
    th.join(timeout_s)
    return box.get("text")


# ------------------------------------------------------------------ decisions


def decide(bundle: PromptBundle, mask_row: np.ndarray, provider: Provider,
           layout: ObsLayout, timeout_s: float | None = None) -> GuidanceDecision:
    """Query the provider and validate its answer against the action mask.
    Any schema violation, masked target, provider exception, or timeout
    yields the LOCAL fallback with ``valid=False``."""
    text = _call_provider(provider, bundle.rendered, DECISION_SCHEMA, timeout_s)
    raw = text if text is not None else ""

    def fallback() -> GuidanceDecision:
        return GuidanceDecision(action_kind="local", target=None,
                                action=layout.local_action,
                                raw_provider_output=raw, valid=False)

    if text is None:
        return fallback()
    m = _DECISION_RE.match(text)
    if m is None:
        return fallback()
    if m.group(1) == "LOCAL":
        if mask_row[layout.local_action] != 1.0:
            return fallback()
        return GuidanceDecision(action_kind="local", target=None,
                                action=layout.local_action,
                                raw_provider_output=raw, valid=True)
    if m.group(2) is None:
        return fallback()
    target = int(m.group(2))
    if not 0 <= target < layout.max_nodes or mask_row[target] != 1.0:
        return fallback()
    return GuidanceDecision(action_kind="forward", target=target, action=target,
                            raw_provider_output=raw, valid=True)


def reflect(diag: Diagnostic, provider: Provider, store: MemoryStore,
            timeout_s: float | None = None) -> MemoryItem | None:
    """Ask the provider for a root cause after a negative reward and append
    the reflection to long-term memory. Provider failure or a malformed
    answer writes nothing and never raises."""
    text = _call_provider(provider, render_diag(diag), REFLECT_SCHEMA, timeout_s)
    if text is None:
        return None
    m = _REFLECT_RE.match(text)
    if m is None:
        return None
    advice = m.group(2) if m.group(2) is not None else "LOCAL"
    target = int(m.group(3)) if m.group(3) is not None else None
    item = MemoryItem(node_id=diag.node_id, task_type=diag.task_type,
                      task_profile=diag.task_profile,
                      load_snapshot=diag.load_snapshot, action=advice,
                      target=target, reward=diag.reward, kind="reflection",
                      cause=m.group(1))
    return store.add(item)


# --------------------------------------------------------------------- engine


class GuidanceEngine:
    """Per-agent orchestration: prompt, decide, remember, reflect, compact.

    Memory persists across episodes; per-episode bookkeeping (pending task
    attributions and the outcome cursor) resets whenever the environment
    restarts. All prompts and responses can be logged to a JSONL replay file.
    """

    def __init__(self, cfg: EnvConfig, provider: Provider,
                 gcfg: GuidanceConfig | None = None,
                 log_path: str | None = None):
        self.cfg = cfg
        self.provider = provider
        self.gcfg = gcfg if gcfg is not None else GuidanceConfig()
        self.layout = ObsLayout(cfg.max_nodes)
        self.stores: dict[int, MemoryStore] = {}
        self.pending: dict[int, Diagnostic] = {}
        self.last_decisions: dict[int, GuidanceDecision] = {}
        self.cursor = 0
        self.log_path = log_path
        self.query_count = 0
        self.fallback_count = 0

    def store_for(self, agent: int) -> MemoryStore:
        if agent not in self.stores:
            self.stores[agent] = MemoryStore(self.gcfg.short_cap, self.gcfg.long_cap)
        return self.stores[agent]

    def reset_episode(self) -> None:
        self.pending.clear()
        self.last_decisions.clear()
        self.cursor = 0

    def _log(self, record: dict) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    # --------------------------------------------------- outcome ingestion

    def sync(self, env: EdgeEnv) -> None:
        """Fold outcomes that resolved since the last call into memory and
        trigger reflection on negative rewards."""
        outs: list[OutcomeRecord] = env.episode_outcomes
        if len(outs) < self.cursor:
            self.reset_episode()  # the environment was reset under us
        for rec in outs[self.cursor:]:
            diag = self.pending.pop(rec.task_id, None)
            if diag is None or rec.outcome is Outcome.IN_FLIGHT:
                continue
            reward = 1.0 if rec.outcome is Outcome.SUCCESS else -1.0
            diag.reward = reward
            diag.outcome = rec.outcome.value
            store = self.store_for(diag.node_id)
            store.add(MemoryItem(
                node_id=diag.node_id, task_type=diag.task_type,
                task_profile=diag.task_profile,
                load_snapshot=diag.load_snapshot, action=diag.action,
                target=diag.target, reward=reward,
                cause=None if reward > 0.0 else rec.outcome.value,
            ))
            if reward < 0.0 and self.gcfg.reflect_on_negative:
                item = reflect(diag, self.provider, store, self.gcfg.timeout_s)
                if item is not None:
                    self._log({"kind": "reflection", "node": diag.node_id,
                               "cause": item.cause, "advice": item.action})
            if len(store.short) > store.short_cap:
                compact(store, self.gcfg.compact_batch)
        self.cursor = len(outs)

    # ----------------------------------------------------------- decisions

    def decide_all(self, env: EdgeEnv) -> dict[int, GuidanceDecision]:
        """One guidance decision per task-holding agent. On off-stride slots
        the previous decision is reused when it is still mask-valid."""
        self.sync(env)
        lay = self.layout
        obs, masks = env.obs, env.masks
        out: dict[int, GuidanceDecision] = {}
        for i in range(self.cfg.max_nodes):
            if masks[i, lay.idle_action] == 1.0 or masks[i].sum() == 0.0:
                continue
            task = env.pending_task(i)
            if task is None:
                continue
            views = env.guidance_view(i)
            reuse = (env.slot % self.gcfg.stride != 0
                     and i in self.last_decisions
                     and masks[i, self.last_decisions[i].action] == 1.0)
            if reuse:
                dec = self.last_decisions[i]
                risk = compute_risk(obs[i], views, task, self.cfg, lay)
            else:
                bundle = build_prompt(i, obs[i], views, task, self.store_for(i),
                                      self.cfg, lay, self.gcfg, masks[i])
                dec = decide(bundle, masks[i], self.provider, lay,
                             self.gcfg.timeout_s)
                risk = bundle.risk
                self.query_count += 1
                if not dec.valid:
                    self.fallback_count += 1
                self._log({"kind": "decision", "node": i, "slot": env.slot,
                           "prompt": bundle.rendered, "schema": DECISION_SCHEMA,
                           "response": dec.raw_provider_output,
                           "action_kind": dec.action_kind, "target": dec.target,
                           "valid": dec.valid})
            out[i] = dec
            self.last_decisions[i] = dec
            self.pending[task.task_id] = Diagnostic(
                node_id=i, task_type=task_type_tag(task.intensity, self.cfg),
                task_profile=task_profile_of(task.size_bits, task.intensity,
                                             task.deadline_s, self.cfg),
                load_snapshot=(float(obs[i, 4]), float(obs[i, 5])),
                size_bits=task.size_bits, intensity=task.intensity,
                deadline_s=task.deadline_s, action=dec.action_kind.upper(),
                target=dec.target, risk=risk)
        return out


class GuidancePolicy(Policy):
    """Joint policy acting directly on provider decisions: guided agents take
    the provider's (validated) action, everyone else idles."""

    name = "guided"

    def __init__(self, engine: GuidanceEngine):
        self.engine = engine

    def act(self, env: EdgeEnv) -> np.ndarray:
        lay = env.layout
        decisions = self.engine.decide_all(env)
        masks = env.masks
        acts = np.empty(masks.shape[0], dtype=np.int64)
        for i in range(masks.shape[0]):
            if i in decisions:
                acts[i] = decisions[i].action
            elif masks[i, lay.idle_action] == 1.0:
                acts[i] = lay.idle_action
            else:
                acts[i] = lay.local_action
        return acts

    def reset(self) -> None:
        self.engine.reset_episode()
