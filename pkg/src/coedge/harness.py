"""Experiment driver: seeded runs, policy comparisons, robustness sweeps,
and per-decision latency measurement, all emitting a versioned CSV schema.

Conventions
-----------
* Every CSV row carries ``schema_version`` plus BOTH an ``episode`` and an
  ``update_step`` column, since "iteration" is ambiguous between the two
  units; rollout-only rows leave ``update_step`` at 0.
* Success rates in rows are pooled (``success / resolved``) so the summary
  is recomputable from the count columns exactly.
* Sweep runs may execute in parallel worker processes; each run writes its
  own part file and the parts are merged into one CSV at the end.
* Any top-level or nested config key can be overridden through environment
  variables with the ``COEDGE_`` prefix; nesting uses ``__`` (for example
  ``COEDGE_ENV__NODE_COUNT=20``). Values are parsed as JSON when possible
  and fall back to plain strings.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .env import EdgeEnv, EnvConfig
from .fusion import FusedPolicy, FusionConfig, FusionTrainer
from .guidance import (
    GuidanceConfig,
    GuidanceEngine,
    GuidancePolicy,
    HttpProvider,
    Provider,
    ScriptedProvider,
)
from .heuristics import HEURISTIC_POLICIES, Policy, make_heuristic
from .mappo import MappoPolicy, MappoTrainer, PPOConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "COEDGE_"

POLICY_NAMES = tuple(sorted(HEURISTIC_POLICIES)) + ("guided", "mappo", "fused")
PROVIDER_KINDS = ("scripted", "http", "off")

# sweep axis name -> EnvConfig transform; ordered values mean rising difficulty
# for the first four axes (used by the monotonicity report)
DIFFICULTY_AXES = ("size_kb", "intensity", "exec_fail", "trans_fail")
SWEEP_AXES = DIFFICULTY_AXES + ("topology", "node_count")

CSV_COLUMNS = [
    "schema_version", "run_id", "policy", "seed", "axis", "axis_value",
    "episode", "update_step", "success_rate", "return", "success",
    "deadline_violation", "reliability_violation", "resolved", "latency_s",
    "lambda", "guidance_valid_rate", "actor_loss", "critic_loss",
    "hybrid_loss",
]


# --------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """One experiment: an environment, a policy, seeds, and optional sweep
    axes. Sub-configs mirror the library dataclasses one-to-one."""

    env: EnvConfig = field(default_factory=EnvConfig)
    policy: str = "random"
    seeds: tuple[int, ...] = (0,)
    iterations: int = 50              # training updates per seed
    episodes: int = 10                # rollout episodes per seed
    provider: str = "scripted"
    endpoint: str = ""
    timeout_ms: float = 0.0           # 0: provider/library default
    out_dir: str = "runs"
    workers: int = 1
    params_path: str = ""             # optional checkpoint to evaluate
    ppo: PPOConfig = field(default_factory=PPOConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sweep: dict = field(default_factory=dict)  # axis name -> list of values

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.policy not in POLICY_NAMES + ("compare",):
            raise ValueError(f"unknown policy {self.policy!r}; choose from "
                             f"{POLICY_NAMES + ('compare',)}")
        if self.provider not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.provider!r}")
        if self.provider == "http" and not self.endpoint:
            raise ValueError("http provider needs an endpoint")
        if self.iterations < 1 or self.episodes < 1 or self.workers < 1:
            raise ValueError("iterations, episodes and workers must be >= 1")
        if self.timeout_ms < 0:
            raise ValueError("timeout_ms must be >= 0")
        for axis in self.sweep:
            if axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {axis!r}; choose from "
                                 f"{SWEEP_AXES}")
            if not self.sweep[axis]:
                raise ValueError(f"sweep axis {axis!r} has no values")

    @property
    def timeout_s(self) -> float | None:
        return self.timeout_ms / 1000.0 if self.timeout_ms > 0 else None


def _coerce(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text


def _set_nested(tree: dict, path: list[str], value) -> None:
    for key in path[:-1]:
        tree = tree.setdefault(key, {})
        if not isinstance(tree, dict):
            raise ValueError(f"cannot nest under non-mapping key {key!r}")
    tree[path[-1]] = value


def env_overrides(environ=None) -> dict:
    """COEDGE_-prefixed variables as a nested override mapping."""
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        _set_nested(tree, path, _coerce(raw))
    return tree


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _build_dataclass(cls, data: dict):
    """Instantiate cls from a plain mapping, turning JSON lists into tuples
    where the field default is a tuple (range pairs, seed lists)."""
    allowed = {f.name: f for f in fields(cls) if f.init}
    kwargs = {}
    for key, val in data.items():
        if key not in allowed:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def load_config(path: str | None = None, environ=None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Defaults < JSON file < environment variables < explicit overrides."""
    data: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    nested = {"env": EnvConfig, "ppo": PPOConfig, "fusion": FusionConfig,
              "guidance": GuidanceConfig}
    kwargs: dict = {}
    for key, val in data.items():
        if key in nested:
            if not isinstance(val, dict):
                raise ValueError(f"config key {key!r} must be a mapping")
            kwargs[key] = _build_dataclass(nested[key], val)
        else:
            kwargs[key] = val
    return _build_dataclass(ExperimentConfig, kwargs)


# ------------------------------------------------------------------ factories


def make_provider(kind: str, env_cfg: EnvConfig, endpoint: str = "",
                  timeout_s: float | None = None,
                  log_path: str | None = None) -> Provider | None:
    if kind == "off":
        return None
    if kind == "scripted":
        return ScriptedProvider(env_cfg)
    if kind == "http":
        if not endpoint:
            raise ValueError("http provider needs an endpoint")
        return HttpProvider(endpoint, timeout_s=timeout_s or 1.0,
                            log_path=log_path)
    raise ValueError(f"unknown provider kind {kind!r}")


def make_policy(cfg: ExperimentConfig, seed: int,
                policy: str | None = None) -> Policy:
    """Ready-to-roll policy named by the config; learned policies start from
    fresh parameters unless a checkpoint path is configured."""
    name = cfg.policy if policy is None else policy
    if name in HEURISTIC_POLICIES:
        return make_heuristic(name, cfg.env)
    gcfg = (replace(cfg.guidance, timeout_s=cfg.timeout_s)
            if cfg.timeout_s is not None else cfg.guidance)
    if name == "guided":
        provider = make_provider(cfg.provider, cfg.env, cfg.endpoint,
                                 cfg.timeout_s)
        if provider is None:
            raise ValueError("guided policy needs a provider (not 'off')")
        return GuidancePolicy(GuidanceEngine(cfg.env, provider, gcfg))
    if name == "mappo":
        trainer = MappoTrainer(cfg.env, cfg.ppo, seed=seed)
        if cfg.params_path:
            trainer.load(cfg.params_path)
        return MappoPolicy(trainer.ac, mode="greedy")
    if name == "fused":
        provider = make_provider(cfg.provider, cfg.env, cfg.endpoint,
                                 cfg.timeout_s)
        trainer = FusionTrainer(cfg.env, cfg.ppo, cfg.fusion, provider,
                                gcfg, seed=seed)
        if cfg.params_path:
            trainer.load(cfg.params_path)
        engine = (GuidanceEngine(cfg.env, provider, gcfg)
                  if provider is not None else None)
        return FusedPolicy(trainer.ac, trainer.fusion, engine,
                           trainer.schedule, mode="greedy")
    raise ValueError(f"unknown policy {name!r}")


# ----------------------------------------------------------------------- rows


def _row(run_id: str, policy: str, seed: int, episode: int, update_step: int,
         counts: dict, ret: float, latency_s: float = math.nan,
         lam: float = math.nan, guidance_valid_rate: float = math.nan,
         actor_loss: float = math.nan, critic_loss: float = math.nan,
         hybrid_loss: float = math.nan, axis: str = "",
         axis_value: str = "") -> dict:
    resolved = counts.get("resolved", 0)
    success = counts.get("success", 0)
    rate = success / resolved if resolved else 1.0
    return {
        "schema_version": SCHEMA_VERSION, "run_id": run_id, "policy": policy,
        "seed": seed, "axis": axis, "axis_value": axis_value,
        "episode": episode, "update_step": update_step,
        "success_rate": rate, "return": ret, "success": success,
        "deadline_violation": counts.get("deadline_violation", 0),
        "reliability_violation": counts.get("reliability_violation", 0),
        "resolved": resolved, "latency_s": latency_s, "lambda": lam,
        "guidance_valid_rate": guidance_valid_rate, "actor_loss": actor_loss,
        "critic_loss": critic_loss, "hybrid_loss": hybrid_loss,
    }


def write_rows(path: str, rows: list[dict]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_rows(path: str) -> list[dict]:
    """CSV rows with numeric columns parsed back to int/float."""
    int_cols = {"schema_version", "seed", "episode", "update_step", "success",
                "deadline_violation", "reliability_violation", "resolved"}
    float_cols = {"success_rate", "return", "latency_s", "lambda",
                  "guidance_valid_rate", "actor_loss", "critic_loss",
                  "hybrid_loss"}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for col in int_cols:
                row[col] = int(raw[col])
            for col in float_cols:
                row[col] = float(raw[col])
            rows.append(row)
    return rows


def merge_csv(part_paths: list[str], out_path: str) -> str:
    rows: list[dict] = []
    for part in part_paths:
        rows.extend(read_rows(part))
    return write_rows(out_path, rows)


def summarize(rows: list[dict], keys: tuple[str, ...] = ("policy",),
              column: str = "success_rate") -> list[dict]:
    """Mean/std/n of one column grouped by key columns, in first-seen group
    order; recomputable exactly from the raw rows by construction."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(
            float(row[column]))
    out = []
    for group, vals in groups.items():
        entry = dict(zip(keys, group))
        entry.update(mean=float(np.mean(vals)), std=float(np.std(vals)),
                     n=len(vals))
        out.append(entry)
    return out


def format_summary(summary: list[dict], keys: tuple[str, ...],
                   label: str = "success rate") -> str:
    lines = []
    for entry in summary:
        head = " ".join(f"{k}={entry[k]}" for k in keys)
        lines.append(f"{head}: {label} {entry['mean']:.4f} "
                     f"+/- {entry['std']:.4f} (n={entry['n']})")
    return "\n".join(lines)


# -------------------------------------------------------------------- rollout


def rollout_episode(env: EdgeEnv, policy: Policy) -> tuple[dict, float]:
    """One episode on an already-reset env; returns the episode summary and
    the mean wall-clock seconds per policy decision."""
    spent = 0.0
    steps = 0
    while not env.done:
        t0 = time.perf_counter()
        acts = policy.act(env)
        spent += time.perf_counter() - t0
        env.step(acts)
        steps += 1
    return env.episode_summary(), spent / max(steps, 1)


def _guidance_rate(policy: Policy) -> float:
    engine = getattr(policy, "engine", None)
    if engine is None or engine.query_count == 0:
        return math.nan
    return 1.0 - engine.fallback_count / engine.query_count


def simulate_run(cfg: ExperimentConfig, seed: int,
                 policy_name: str | None = None, axis: str = "",
                 axis_value: str = "", run_tag: str = "sim") -> list[dict]:
    """cfg.episodes rollouts of one policy on one seed; one row per episode.
    Identical seeds give identical success-rate columns on rerun."""
    name = cfg.policy if policy_name is None else policy_name
    policy = make_policy(cfg, seed, name)
    env = EdgeEnv(cfg.env, seed=seed)
    run_id = f"{run_tag}-{name}-s{seed}" + (
        f"-{axis}{axis_value}" if axis else "")
    rows = []
    for ep in range(cfg.episodes):
        if ep > 0:
            env.reset()
        policy.reset()
        summary, lat = rollout_episode(env, policy)
        lam = math.nan
        if isinstance(policy, FusedPolicy):
            lam = policy.schedule.lam if policy.fp is not None else 0.0
        rows.append(_row(run_id, name, seed, ep, 0, summary,
                         summary["return"], latency_s=lat, lam=lam,
                         guidance_valid_rate=_guidance_rate(policy),
                         axis=axis, axis_value=axis_value))
    return rows


def run_simulate(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        try:
            rows.extend(simulate_run(cfg, seed))
        except Exception as exc:
            raise RuntimeError(f"run sim-{cfg.policy}-s{seed} failed: "
                               f"{exc}") from exc
    return rows


# ------------------------------------------------------------------- training


def _history_rows(history: list[dict], run_id: str, policy: str, seed: int,
                  episodes_per_iter: int) -> list[dict]:
    rows = []
    for item in history:
        it = item["iteration"]
        rows.append(_row(
            run_id, policy, seed, it * episodes_per_iter, it, item,
            item.get("return_mean", math.nan),
            lam=item.get("lambda", math.nan),
            guidance_valid_rate=item.get("guidance_valid_rate", math.nan),
            actor_loss=item.get("actor_loss", math.nan),
            critic_loss=item.get("critic_loss", math.nan),
            hybrid_loss=item.get("hybrid_loss", math.nan)))
    return rows


def train_run(cfg: ExperimentConfig, seed: int,
              policy_name: str | None = None,
              save_path: str | None = None) -> tuple[list[dict], dict]:
    """Train one learner on one seed; returns per-iteration rows plus the
    final greedy evaluation."""
    name = cfg.policy if policy_name is None else policy_name
    if name == "mappo":
        trainer = MappoTrainer(cfg.env, cfg.ppo, seed=seed)
    elif name == "fused":
        provider = make_provider(cfg.provider, cfg.env, cfg.endpoint,
                                 cfg.timeout_s)
        gcfg = (replace(cfg.guidance, timeout_s=cfg.timeout_s)
                if cfg.timeout_s is not None else cfg.guidance)
        trainer = FusionTrainer(cfg.env, cfg.ppo, cfg.fusion, provider,
                                gcfg, seed=seed)
    else:
        raise ValueError(f"policy {name!r} does not train; "
                         "use 'mappo', 'fused' or 'compare'")
    history = trainer.train(cfg.iterations)
    final = trainer.evaluate(cfg.episodes)
    if save_path:
        trainer.save(save_path)
    run_id = f"train-{name}-s{seed}"
    return (_history_rows(history, run_id, name, seed,
                          cfg.ppo.episodes_per_iter), final)


def run_train(cfg: ExperimentConfig) -> tuple[list[dict], list[str]]:
    """Training per seed; 'compare' trains fused and mappo on paired seeds
    and appends a delta summary line."""
    rows: list[dict] = []
    notes: list[str] = []
    if cfg.policy == "compare":
        deltas = []
        for seed in cfg.seeds:
            m_rows, m_final = train_run(cfg, seed, "mappo")
            f_rows, f_final = train_run(cfg, seed, "fused")
            rows.extend(m_rows)
            rows.extend(f_rows)
            deltas.append(f_final["success_mean"] - m_final["success_mean"])
        notes.append(f"delta success (fused - mappo): "
                     f"{float(np.mean(deltas)):+.4f} over "
                     f"{len(cfg.seeds)} paired seeds")
        return rows, notes
    for seed in cfg.seeds:
        save = (os.path.join(cfg.out_dir, f"{cfg.policy}-s{seed}.npz")
                if cfg.out_dir else None)
        try:
            seed_rows, final = train_run(cfg, seed, save_path=save)
        except Exception as exc:
            raise RuntimeError(f"run train-{cfg.policy}-s{seed} failed: "
                               f"{exc}") from exc
        rows.extend(seed_rows)
        notes.append(f"seed {seed}: eval success "
                     f"{final['success_mean']:.4f} "
                     f"+/- {final['success_std']:.4f}")
    return rows, notes


def run_evaluate(cfg: ExperimentConfig) -> list[dict]:
    """Greedy rollouts on the dedicated evaluation seed base (paired with
    trainer evaluation); loads a checkpoint when params_path is set."""
    rows = []
    for seed in cfg.seeds:
        try:
            policy = make_policy(cfg, seed)
        except Exception as exc:
            raise RuntimeError(f"run eval-{cfg.policy}-s{seed} failed: "
                               f"{exc}") from exc
        env_seeds = [10_000 + k for k in range(cfg.episodes)]
        run_id = f"eval-{cfg.policy}-s{seed}"
        for ep, env_seed in enumerate(env_seeds):
            env = EdgeEnv(cfg.env, seed=env_seed)
            policy.reset()
            summary, lat = rollout_episode(env, policy)
            lam = math.nan
            if isinstance(policy, FusedPolicy):
                lam = policy.schedule.lam if policy.fp is not None else 0.0
            rows.append(_row(run_id, cfg.policy, seed, ep, 0, summary,
                             summary["return"], latency_s=lat, lam=lam,
                             guidance_valid_rate=_guidance_rate(policy)))
    return rows


# ---------------------------------------------------------------------- sweep


def apply_axis(env_cfg: EnvConfig, axis: str, value) -> EnvConfig:
    """EnvConfig with one sweep axis pinned to a single value."""
    if axis == "size_kb":
        return replace(env_cfg, size_kb_range=(float(value), float(value)))
    if axis == "intensity":
        return replace(env_cfg, intensity_range=(float(value), float(value)))
    if axis == "exec_fail":
        pin = (float(value), float(value))
        return replace(env_cfg, sw_fail_range=pin, hw_fail_range=pin)
    if axis == "trans_fail":
        return replace(env_cfg, link_fail_range=(float(value), float(value)))
    if axis == "topology":
        return replace(env_cfg, topology=str(value))
    if axis == "node_count":
        return replace(env_cfg, node_count=int(value), max_nodes=0)
    raise ValueError(f"unknown sweep axis {axis!r}")


def _sweep_unit(cfg: ExperimentConfig, axis: str, value, seed: int,
                part_path: str) -> str:
    try:
        unit_cfg = replace(cfg, env=apply_axis(cfg.env, axis, value),
                           sweep={})
        rows = simulate_run(unit_cfg, seed, axis=axis, axis_value=str(value),
                            run_tag="sweep")
        return write_rows(part_path, rows)
    except Exception as exc:
        raise RuntimeError(f"run sweep-{cfg.policy}-{axis}{value}-s{seed} "
                           f"failed: {exc}") from exc


def monotonicity_flags(rows: list[dict]) -> list[str]:
    """Difficulty axes where a policy's seed-mean success rate rose by more
    than one pooled standard deviation between adjacent sweep values."""
    flags = []
    for axis in DIFFICULTY_AXES:
        axis_rows = [r for r in rows if r["axis"] == axis]
        if not axis_rows:
            continue
        values = sorted({float(r["axis_value"]) for r in axis_rows})
        for policy in sorted({r["policy"] for r in axis_rows}):
            series = []
            for val in values:
                rates = [float(r["success_rate"]) for r in axis_rows
                         if r["policy"] == policy
                         and float(r["axis_value"]) == val]
                series.append((val, float(np.mean(rates)),
                               float(np.var(rates))))
            for (v0, m0, var0), (v1, m1, var1) in zip(series, series[1:]):
                pooled = math.sqrt((var0 + var1) / 2.0)
                if m1 > m0 + pooled:
                    flags.append(
                        f"axis {axis}: policy {policy} success rose "
                        f"{m0:.4f} -> {m1:.4f} from {v0:g} to {v1:g} "
                        f"(pooled std {pooled:.4f})")
    return flags


def run_sweep(cfg: ExperimentConfig) -> tuple[list[dict], list[dict],
                                              list[str]]:
    """Cross-product of axis values and seeds; returns merged rows, per-axis
    summaries, and the monotonicity report."""
    if not cfg.sweep:
        raise ValueError("sweep invoked without sweep axes")
    units = []
    os.makedirs(os.path.join(cfg.out_dir, "parts"), exist_ok=True)
    for axis, values in cfg.sweep.items():
        for value in values:
            for seed in cfg.seeds:
                part = os.path.join(cfg.out_dir, "parts",
                                    f"{axis}-{value}-s{seed}.csv")
                units.append((cfg, axis, value, seed, part))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_sweep_unit, *zip(*units)))
    else:
        parts = [_sweep_unit(*unit) for unit in units]
    rows = []
    for part in parts:
        rows.extend(read_rows(part))
    summaries = summarize(rows, keys=("axis", "axis_value", "policy"))
    return rows, summaries, monotonicity_flags(rows)


# -------------------------------------------------------------------- latency


def measure_latency(policy: Policy, env: EdgeEnv, n_steps: int,
                    warmup: int = 5) -> dict:
    """Wall-clock per-decision stats over n_steps environment steps. When
    the policy carries a guidance engine, the engine's share of each
    decision is timed separately (network time = decision - guidance)."""
    engine = getattr(policy, "engine", None)
    guidance_box = {"s": 0.0}
    if engine is not None:
        inner = engine.decide_all

        def timed(env_):
            t0 = time.perf_counter()
            out = inner(env_)
            guidance_box["s"] += time.perf_counter() - t0
            return out

        engine.decide_all = timed
    try:
        samples = []
        for step in range(warmup + n_steps):
            if env.done:
                env.reset()
                policy.reset()
            if step == warmup:
                guidance_box["s"] = 0.0
            t0 = time.perf_counter()
            acts = policy.act(env)
            dt = time.perf_counter() - t0
            if step >= warmup:
                samples.append(dt)
            env.step(acts)
    finally:
        if engine is not None:
            engine.decide_all = inner
    arr = np.asarray(samples)
    guidance_mean = guidance_box["s"] / n_steps if engine is not None else 0.0
    return {
        "policy": policy.name, "n": int(n_steps),
        "mean_s": float(arr.mean()), "p50_s": float(np.percentile(arr, 50)),
        "p95_s": float(np.percentile(arr, 95)),
        "p99_s": float(np.percentile(arr, 99)), "max_s": float(arr.max()),
        "guidance_s_mean": float(guidance_mean),
        "network_s_mean": float(arr.mean() - guidance_mean),
    }


def run_latency(cfg: ExperimentConfig, n_steps: int = 200) -> list[dict]:
    out = []
    for seed in cfg.seeds:
        policy = make_policy(cfg, seed)
        env = EdgeEnv(cfg.env, seed=seed)
        stats = measure_latency(policy, env, n_steps)
        stats["seed"] = seed
        out.append(stats)
    return out
