"""Non-learning baseline policies.

Every baseline acts per agent on the local observation row and action mask
alone. Quantities a node cannot observe (a neighbor's cpu speed or queue
depth) are replaced by config-mean estimates, keeping the baselines subject
to the same partial observability as the learned policies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EdgeEnv, EnvConfig, ObsLayout


@dataclass
class HeuristicConfig:
    """Knobs shared by the sampling and annealing baselines."""

    ratc_sample_k: int = 2        # forward targets sampled per decision
    agsp_population: int = 4      # independent annealing restarts
    agsp_generations: int = 12    # proposals per restart
    agsp_init_temp: float = 1.0
    agsp_cooling: float = 0.9     # geometric temperature decay
    w_d: float = 0.5              # deadline term weight
    w_r: float = 0.5              # reliability term weight

    def __post_init__(self) -> None:
        if self.ratc_sample_k < 1:
            raise ValueError("ratc_sample_k must be >= 1")
        if self.agsp_population < 1 or self.agsp_generations < 1:
            raise ValueError("annealer needs at least one restart and step")
        if not 0.0 < self.agsp_cooling < 1.0:
            raise ValueError("agsp_cooling must lie in (0, 1)")
        if self.agsp_init_temp <= 0.0:
            raise ValueError("agsp_init_temp must be positive")
        if self.w_d < 0.0 or self.w_r < 0.0:
            raise ValueError("score weights must be non-negative")


class Estimator:
    """Maps observation features back to physical units and predicts the
    (delay, reliability) a candidate action would achieve.

    A forwarded task is assumed to land on an average-speed empty node with
    average failure rates one decision slot after the hop: remote cpu speed
    is hidden from the observation and the advertised remote backlog is
    deliberately left unmodeled, keeping these baselines link-quality rules.
    """

    def __init__(self, cfg: EnvConfig, layout: ObsLayout | None = None):
        self.cfg = cfg
        self.layout = layout if layout is not None else ObsLayout(cfg.max_nodes)
        self.f_mean = float(np.mean(cfg.cpu_hz_range))
        self.c_mean = float(np.mean(cfg.size_bits_range)
                            * np.mean(cfg.intensity_range))
        self.ab_mean = float(np.mean(cfg.sw_fail_range)
                             + np.mean(cfg.hw_fail_range))

    def task_fields(self, obs_row: np.ndarray) -> tuple[float, float, float, float]:
        """(size_bits, cycles, deadline_s, waited_s) of the pending task."""
        cfg = self.cfg
        tb = obs_row[self.layout.task_slice]
        size = tb[0] * cfg.size_bits_range[1]
        cycles = tb[1] * cfg.size_bits_range[1] * cfg.intensity_range[1]
        deadline = tb[2] * cfg.deadline_s
        waited = tb[4] * deadline
        return float(size), float(cycles), float(deadline), float(waited)

    def predict(self, obs_row: np.ndarray, action: int) -> tuple[float, float]:
        """Predicted (total delay incl. time already waited, reliability)."""
        cfg, lay = self.cfg, self.layout
        size, cycles, _, waited = self.task_fields(obs_row)
        if action == lay.local_action:
            f_own = max(obs_row[3] * cfg.cpu_hz_range[1], 1.0)
            ahead = max(0.0, obs_row[4] * cfg.queue_norm - 1.0)
            exec_s = cycles / f_own
            ab_own = (obs_row[1] + obs_row[2]) * cfg.fail_rate_norm
            delay = waited + ahead * (self.c_mean / f_own) + exec_s
            return delay, float(np.exp(-ab_own * exec_s))
        feats = obs_row[lay.neighbor_slice(action)]
        rate = feats[0] * cfg.link_bps_range[1]
        if feats[2] == 0.0 or rate <= 0.0:
            return float("inf"), 0.0
        beta = feats[1] * cfg.fail_rate_norm
        trans_s = size / rate
        exec_s = cycles / self.f_mean
        delay = waited + trans_s + cfg.slot_s + exec_s
        return delay, float(np.exp(-beta * trans_s - self.ab_mean * exec_s))

    def sorted_forwards(self, obs_row: np.ndarray, mask_row: np.ndarray) -> list[int]:
        """Valid forward targets in content-canonical order (best link first)
        so candidate sampling is independent of neighbor slot numbering."""
        lay = self.layout
        js = [j for j in range(self.cfg.max_nodes) if mask_row[j] == 1.0]

        def key(j: int) -> tuple[float, float]:
            f = obs_row[lay.neighbor_slice(j)]
            return (-f[0], f[1])

        return sorted(js, key=key)


def ratc_decide(obs_row: np.ndarray, mask_row: np.ndarray,
                rng: np.random.Generator, est: Estimator,
                hcfg: HeuristicConfig | None = None) -> int:
    """Sample up to k forward targets and keep the one that best satisfies
    deadline and reliability; run locally when no forward is available."""
    hcfg = hcfg if hcfg is not None else HeuristicConfig()
    lay = est.layout
    if mask_row[lay.idle_action] == 1.0:
        return lay.idle_action
    cand = est.sorted_forwards(obs_row, mask_row)
    if not cand:
        return lay.local_action
    if len(cand) > hcfg.ratc_sample_k:
        pick = rng.choice(len(cand), size=hcfg.ratc_sample_k, replace=False)
        cand = [cand[p] for p in np.sort(pick)]
    _, _, deadline, _ = est.task_fields(obs_row)
    best, best_key = cand[0], None
    for a in cand:
        delay, rel = est.predict(obs_row, a)
        score = (hcfg.w_d * float(delay <= deadline)
                 + hcfg.w_r * float(rel >= est.cfg.reliability_floor))
        key = (-score, delay, a)
        if best_key is None or key < best_key:
            best, best_key = a, key
    return best


def agsp_decide(obs_row: np.ndarray, mask_row: np.ndarray,
                rng: np.random.Generator, est: Estimator,
                hcfg: HeuristicConfig | None = None,
                return_trace: bool = False):
    """Annealing walk over the categorical choice set (local or one forward
    target), returning the best-seen choice.

    The per-arrival decision is one categorical pick, so the walk proposes
    uniformly random alternatives and accepts worse ones with Boltzmann
    probability while the temperature cools geometrically; restarts share
    the global best.
    """
    hcfg = hcfg if hcfg is not None else HeuristicConfig()
    lay = est.layout
    if mask_row[lay.idle_action] == 1.0:
        return (lay.idle_action, []) if return_trace else lay.idle_action
    choices: list[int] = []
    if mask_row[lay.local_action] == 1.0:
        choices.append(lay.local_action)
    choices.extend(est.sorted_forwards(obs_row, mask_row))
    _, _, deadline, _ = est.task_fields(obs_row)

    fits = {}
    for a in choices:
        delay, rel = est.predict(obs_row, a)
        slack = max(0.0, 1.0 - delay / deadline) if deadline > 0.0 else 0.0
        fits[a] = hcfg.w_d * slack + hcfg.w_r * rel

    best_a, best_f = choices[0], fits[choices[0]]
    trace: list[float] = []
    for _ in range(hcfg.agsp_population):
        cur = choices[int(rng.integers(len(choices)))]
        cur_f = fits[cur]
        if cur_f > best_f:
            best_a, best_f = cur, cur_f
        temp = hcfg.agsp_init_temp
        for _ in range(hcfg.agsp_generations):
            prop = choices[int(rng.integers(len(choices)))]
            gain = fits[prop] - cur_f
            if gain >= 0.0 or rng.random() < np.exp(gain / max(temp, 1e-12)):
                cur, cur_f = prop, fits[prop]
            if cur_f > best_f:
                best_a, best_f = cur, cur_f
            trace.append(best_f)
            temp *= hcfg.agsp_cooling
    return (best_a, trace) if return_trace else best_a


class Policy:
    """Joint policy interface: one action per agent slot for the current
    environment state. Implementations emit only mask-valid actions and draw
    randomness from the env's dedicated policy stream, so arrival traces
    stay identical across policies."""

    name = "policy"

    def act(self, env: EdgeEnv) -> np.ndarray:
        raise NotImplementedError

    def reset(self) -> None:
        """Clear per-episode state; default policies are stateless."""


class RandomValidPolicy(Policy):
    name = "random"

    def act(self, env: EdgeEnv) -> np.ndarray:
        rng = env.streams.policy
        masks = env.masks
        acts = np.empty(masks.shape[0], dtype=np.int64)
        for i, row in enumerate(masks):
            valid = np.nonzero(row)[0]
            acts[i] = valid[int(rng.integers(len(valid)))]
        return acts


class LocalOnlyPolicy(Policy):
    name = "local"

    def act(self, env: EdgeEnv) -> np.ndarray:
        lay = env.layout
        masks = env.masks
        acts = np.where(masks[:, lay.idle_action] == 1.0,
                        lay.idle_action, lay.local_action)
        return acts.astype(np.int64)


class GreedyMinDelayPolicy(Policy):
    """Argmin predicted delay over the valid choices, ignoring reliability."""

    name = "greedy"

    def __init__(self, cfg: EnvConfig, hcfg: HeuristicConfig | None = None):
        self.est = Estimator(cfg)

    def act(self, env: EdgeEnv) -> np.ndarray:
        lay = self.est.layout
        obs, masks = env.obs, env.masks
        acts = np.full(masks.shape[0], lay.idle_action, dtype=np.int64)
        for i in range(masks.shape[0]):
            if masks[i, lay.idle_action] == 1.0:
                continue
            choices = [j for j in range(self.est.cfg.max_nodes)
                       if masks[i, j] == 1.0]
            if masks[i, lay.local_action] == 1.0:
                choices.append(lay.local_action)
            acts[i] = min(choices,
                          key=lambda a: (self.est.predict(obs[i], a)[0], a))
        return acts


class RatcPolicy(Policy):
    name = "ratc"

    def __init__(self, cfg: EnvConfig, hcfg: HeuristicConfig | None = None):
        self.est = Estimator(cfg)
        self.hcfg = hcfg if hcfg is not None else HeuristicConfig()

    def act(self, env: EdgeEnv) -> np.ndarray:
        obs, masks = env.obs, env.masks
        rng = env.streams.policy
        return np.array([ratc_decide(obs[i], masks[i], rng, self.est, self.hcfg)
                         for i in range(masks.shape[0])], dtype=np.int64)


class AgspPolicy(Policy):
    name = "agsp"

    def __init__(self, cfg: EnvConfig, hcfg: HeuristicConfig | None = None):
        self.est = Estimator(cfg)
        self.hcfg = hcfg if hcfg is not None else HeuristicConfig()

    def act(self, env: EdgeEnv) -> np.ndarray:
        obs, masks = env.obs, env.masks
        rng = env.streams.policy
        return np.array([agsp_decide(obs[i], masks[i], rng, self.est, self.hcfg)
                         for i in range(masks.shape[0])], dtype=np.int64)


HEURISTIC_POLICIES = {
    "random": RandomValidPolicy,
    "local": LocalOnlyPolicy,
    "greedy": GreedyMinDelayPolicy,
    "ratc": RatcPolicy,
    "agsp": AgspPolicy,
}


def make_heuristic(name: str, cfg: EnvConfig,
                   hcfg: HeuristicConfig | None = None) -> Policy:
    try:
        cls = HEURISTIC_POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown heuristic policy {name!r}; "
                         f"choose from {sorted(HEURISTIC_POLICIES)}") from None
    if cls in (RandomValidPolicy, LocalOnlyPolicy):
        return cls()
    return cls(cfg, hcfg)
