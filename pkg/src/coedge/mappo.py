"""Multi-agent PPO on the shared edge environment.

One actor and one critic are shared across agent slots. The actor splits
into a feature trunk and an action head so feature-level blending can later
reuse the exact trunk output. The default trunk is structured: one shared
scoring network rates every action slot from the slot's own input block
(node, task, link-to-target, locality flag), so what is learned about one
neighbor transfers to all of them. A flat dense trunk over the raw
observation remains available. The critic is centralized by default,
reading the concatenated team observation. Rollouts record decisions only
for agents holding a task; task-less and dead slots idle deterministically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .env import EdgeEnv, EnvConfig, ObsLayout
from .heuristics import Policy
from .nn import (
    Adam,
    Linear,
    MLP,
    Param,
    Var,
    backward,
    clip,
    const,
    exp,
    load_params,
    masked_log_softmax,
    minimum,
    mse,
    reshape,
    save_params,
    tanh,
    vmean,
    vsum,
    zero_grads,
)


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_weight: float = 0.01
    entropy_decay: float = 1.0      # multiplicative, applied per eval interval
    lr: float = 4e-4
    lr_decay: float = 0.99          # multiplicative, applied per eval interval
    lr_decay_enabled: bool = True
    epochs: int = 4
    critic_lr: float = 3e-3         # critic needs a faster fit than the actor
    critic_epochs: int = 8          # critic-only passes per update
    critic_weight: float = 0.5
    max_grad_norm: float = 0.5
    eval_interval: int = 4
    eval_episodes: int = 3
    episodes_per_iter: int = 4
    centralized_critic: bool = True
    value_norm: bool = True         # critic regresses normalized returns
    structured_trunk: bool = True   # per-action shared scorer vs flat dense
    scorer_hidden: int = 32         # hidden width of the shared slot scorer
    trunk_dim: int = 16             # feature width of the flat trunk
    hidden_dim: int = 64

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 <= self.discount <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("discount and gae_lambda must lie in [0, 1]")
        if self.lr <= 0.0 or not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("need positive lr and decay in (0, 1]")
        if self.epochs < 1 or self.episodes_per_iter < 1:
            raise ValueError("epochs and episodes_per_iter must be >= 1")
        if self.critic_lr <= 0.0 or self.critic_epochs < 1:
            raise ValueError("critic_lr must be positive, critic_epochs >= 1")
        if self.entropy_weight < 0.0 or self.critic_weight < 0.0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.entropy_decay <= 1.0:
            raise ValueError("entropy_decay must lie in (0, 1]")
        if self.scorer_hidden < 1 or self.trunk_dim < 1 or self.hidden_dim < 1:
            raise ValueError("network widths must be >= 1")


def gae(rewards: np.ndarray, values: np.ndarray, discount: float,
        lam: float) -> np.ndarray:
    """Generalized advantage estimates; values carries one bootstrap entry."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (rewards.shape[0] + 1,):
        raise ValueError("values must have one trailing bootstrap entry")
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + discount * values[t + 1] - values[t]
        running = delta + discount * lam * running
        adv[t] = running
    return adv


def clipped_surrogate(ratio, advantage, eps: float):
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    out = np.minimum(ratio * advantage, clipped * advantage)
    return float(out) if out.ndim == 0 else out


def entropy(probs) -> float:
    """Shannon entropy (nats) of a masked, renormalized distribution."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


class RunningNorm:
    """Welford running mean/std of value targets. Identity until two samples
    arrive; the critic regresses normalized returns so its gradient scale is
    independent of the reward magnitude."""

    def __init__(self):
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        n = float(x.size)
        mu = float(x.mean())
        tot = self.count + n
        delta = mu - self.mean
        self.m2 += float(x.var()) * n + delta * delta * self.count * n / tot
        self.mean += delta * n / tot
        self.count = tot

    @property
    def std(self) -> float:
        if self.count < 2.0:
            return 1.0
        return max(math.sqrt(self.m2 / self.count), 1e-6)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) * self.std + self.mean

    def state(self) -> list[float]:
        return [self.count, self.mean, self.m2]

    def load_state(self, s) -> None:
        self.count, self.mean, self.m2 = (float(v) for v in s)


def critic_input(obs: np.ndarray, slot: int, horizon: int,
                 centralized: bool) -> np.ndarray:
    """Critic conditioning vector: the team observation (flat when
    centralized, mean-pooled otherwise) plus normalized time remaining --
    finite-horizon return-to-go is unpredictable without it."""
    flat = obs.reshape(-1) if centralized else obs.mean(axis=0)
    return np.concatenate([flat, [1.0 - slot / horizon]])


class ActorCritic:
    """Shared actor (trunk + head) and critic with analytic gradients.

    Structured trunk (default): every action slot is scored by one shared
    network over [node feats, task feats, link feats toward the slot's
    target, is-local flag], yielding one feature per action; the head is a
    square map started at identity so the slot/feature alignment survives
    early training. Flat trunk: a dense projection of the observation.
    """

    def __init__(self, layout: ObsLayout, cfg: PPOConfig,
                 rng: np.random.Generator, team_slots: int):
        self.layout = layout
        self.cfg = cfg
        self.team_slots = team_slots
        d, h = cfg.trunk_dim, cfg.hidden_dim
        if cfg.structured_trunk:
            slot_in = (layout.NODE_FEATS + layout.TASK_FEATS
                       + layout.LINK_FEATS + 1)
            self.scorer = MLP("actor_scorer", [slot_in, cfg.scorer_hidden, 1],
                              rng)
            self.head = MLP("actor_head",
                            [layout.n_actions, layout.n_actions], rng)
            self.head.layers[-1].w.value[...] = np.eye(layout.n_actions)
            self.head.layers[-1].b.value[...] = 0.0
        else:
            self.trunk = Linear("actor_trunk", layout.obs_dim, d, rng)
            self.head = MLP("actor_head", [d, h, h, layout.n_actions], rng)
        critic_base = (team_slots * layout.obs_dim if cfg.centralized_critic
                       else layout.obs_dim)
        self.critic = MLP("critic", [critic_base + 1, h, h, 1], rng)
        self.vnorm = RunningNorm()

    @property
    def feat_dim(self) -> int:
        return (self.layout.n_actions if self.cfg.structured_trunk
                else self.cfg.trunk_dim)

    def _slot_blocks(self, obs: np.ndarray) -> np.ndarray:
        """Per-action scorer inputs, one row per (decision, action slot).

        Forward slot j carries the link feats toward j. LOCAL carries a
        pseudo-link (full rate, failure-free, alive, own exec backlog) so
        the scorer compares staying against forwarding on equal terms. The
        idle slot keeps a zero link block; its logit is only ever consumed
        when idle is the sole valid action.
        """
        lay = self.layout
        b = obs.shape[0]
        node = obs[:, :lay.NODE_FEATS]
        task = obs[:, lay.task_slice]
        links = obs[:, lay.NODE_FEATS + lay.TASK_FEATS:].reshape(
            b, lay.max_nodes, lay.LINK_FEATS)
        lo = lay.NODE_FEATS + lay.TASK_FEATS
        blocks = np.zeros((b, lay.n_actions, lo + lay.LINK_FEATS + 1))
        blocks[:, :, :lay.NODE_FEATS] = node[:, None, :]
        blocks[:, :, lay.NODE_FEATS:lo] = task[:, None, :]
        blocks[:, :lay.max_nodes, lo:lo + lay.LINK_FEATS] = links
        blocks[:, lay.local_action, lo] = 1.0       # rate: no transmission
        blocks[:, lay.local_action, lo + 2] = 1.0   # alive (holder decides)
        blocks[:, lay.local_action, lo + 3] = node[:, 4]  # own exec backlog
        blocks[:, lay.local_action, -1] = 1.0       # is-local flag
        return blocks.reshape(b * lay.n_actions, blocks.shape[-1])

    def features(self, obs: np.ndarray) -> Var:
        obs = np.asarray(obs, dtype=np.float64)
        if self.cfg.structured_trunk:
            scores = self.scorer(const(self._slot_blocks(obs)))
            return tanh(reshape(scores,
                                (obs.shape[0], self.layout.n_actions)))
        return tanh(self.trunk(const(obs)))

    def head_logits(self, feats: Var) -> Var:
        return self.head(feats)

    def log_probs(self, obs: np.ndarray, masks: np.ndarray) -> Var:
        return masked_log_softmax(self.head_logits(self.features(obs)), masks)

    def value(self, team_obs: np.ndarray) -> Var:
        return self.critic(const(np.asarray(team_obs, dtype=np.float64)))

    def predict_value(self, team_obs: np.ndarray) -> np.ndarray:
        """Value estimates in raw return units (graph-free)."""
        v = self.value(team_obs).value[:, 0]
        return self.vnorm.denormalize(v) if self.cfg.value_norm else v

    def actor_params(self) -> list[Param]:
        front = (self.scorer.params() if self.cfg.structured_trunk
                 else self.trunk.params())
        return front + self.head.params()

    def critic_params(self) -> list[Param]:
        return self.critic.params()

    def params(self) -> list[Param]:
        return self.actor_params() + self.critic_params()


def sample_masked_rows(probs: np.ndarray, masks: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Inverse-cdf draw per row; masked cells hold exactly zero mass so the
    flat cdf segments they create can never be selected."""
    cum = probs.cumsum(axis=1)
    cum /= cum[:, -1:]
    u = rng.random(probs.shape[0])
    acts = (u[:, None] > cum).sum(axis=1)
    for k, a in enumerate(acts):  # fp-safety net, not expected to trigger
        if masks[k, a] == 0.0:
            acts[k] = int(np.argmax(probs[k]))
    return acts.astype(np.int64)


class MappoPolicy(Policy):
    """Greedy or stochastic execution of a trained actor."""

    name = "mappo"

    def __init__(self, ac: ActorCritic, mode: str = "sample"):
        if mode not in ("sample", "greedy"):
            raise ValueError("mode must be 'sample' or 'greedy'")
        self.ac = ac
        self.mode = mode

    def act(self, env: EdgeEnv) -> np.ndarray:
        acts, _ = self.act_with_logprobs(env)
        return acts

    def act_with_logprobs(self, env: EdgeEnv):
        lay = self.ac.layout
        obs, masks = env.obs, env.masks
        acts = np.full(masks.shape[0], lay.idle_action, dtype=np.int64)
        holders = np.nonzero(masks[:, lay.idle_action] == 0.0)[0]
        if holders.size == 0:
            return acts, {}
        logp = self.ac.log_probs(obs[holders], masks[holders]).value
        probs = np.exp(logp)
        if self.mode == "greedy":
            chosen = probs.argmax(axis=1)
        else:
            chosen = sample_masked_rows(probs, masks[holders],
                                        env.streams.policy)
        acts[holders] = chosen
        info = {int(i): (int(a), float(logp[k, a]))
                for k, (i, a) in enumerate(zip(holders, chosen))}
        return acts, info


class RolloutBuffer:
    """Per-slot team records plus per-decision actor records, across any
    number of episodes; build() flattens into update-ready arrays."""

    def __init__(self, cfg: PPOConfig):
        self.cfg = cfg
        self._episodes: list[dict] = []
        self._cur: dict | None = None

    def start_episode(self) -> None:
        self._cur = {"team_obs": [], "values": [], "rewards": [],
                     "obs": [], "masks": [], "actions": [], "logp": [],
                     "slot_of": []}

    def add_step(self, team_obs: np.ndarray, value: float, reward: float,
                 decisions: list[tuple[np.ndarray, np.ndarray, int, float]]
                 ) -> None:
        cur = self._cur
        slot_idx = len(cur["rewards"])
        cur["team_obs"].append(team_obs)
        cur["values"].append(value)
        cur["rewards"].append(reward)
        for obs_row, mask_row, action, logp in decisions:
            cur["obs"].append(obs_row)
            cur["masks"].append(mask_row)
            cur["actions"].append(action)
            cur["logp"].append(logp)
            cur["slot_of"].append(slot_idx)

    def finish_episode(self, bootstrap: float = 0.0) -> None:
        cur = self._cur
        values = np.array(cur["values"] + [bootstrap])
        rewards = np.array(cur["rewards"])
        adv = gae(rewards, values, self.cfg.discount, self.cfg.gae_lambda)
        cur["adv_slots"] = adv
        cur["returns"] = adv + values[:-1]
        self._episodes.append(cur)
        self._cur = None

    @property
    def n_decisions(self) -> int:
        return sum(len(ep["actions"]) for ep in self._episodes)

    def build(self) -> dict:
        if not self._episodes:
            raise ValueError("empty rollout buffer")
        obs, masks, actions, logp, adv = [], [], [], [], []
        team_obs, returns = [], []
        for ep in self._episodes:
            obs.extend(ep["obs"])
            masks.extend(ep["masks"])
            actions.extend(ep["actions"])
            logp.extend(ep["logp"])
            adv.extend(ep["adv_slots"][k] for k in ep["slot_of"])
            team_obs.extend(ep["team_obs"])
            returns.extend(ep["returns"])
        adv = np.asarray(adv, dtype=np.float64)
        if adv.size > 1 and adv.std() > 0.0:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        else:
            adv = np.zeros_like(adv)
        return {
            "obs": np.asarray(obs, dtype=np.float64),
            "masks": np.asarray(masks, dtype=np.float64),
            "actions": np.asarray(actions, dtype=np.int64),
            "logp_old": np.asarray(logp, dtype=np.float64),
            "adv": adv,
            "team_obs": np.asarray(team_obs, dtype=np.float64),
            "returns": np.asarray(returns, dtype=np.float64),
        }


def actor_objective(batch: dict, ac: ActorCritic, cfg: PPOConfig) -> tuple:
    """Loss to minimize: -(clipped surrogate) - beta * entropy. Returns the
    Var loss plus scalar diagnostics."""
    logp_all = ac.log_probs(batch["obs"], batch["masks"])
    onehot = np.zeros_like(batch["masks"])
    onehot[np.arange(len(batch["actions"])), batch["actions"]] = 1.0
    picked = vsum(logp_all * const(onehot), axis=-1)
    ratio = exp(picked - const(batch["logp_old"]))
    adv = const(batch["adv"])
    surrogate = minimum(ratio * adv,
                        clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
                        * adv)
    l_clip = vmean(surrogate)
    p = exp(logp_all)
    ent = vmean(-vsum(p * logp_all, axis=-1))  # p==0 cells contribute -0.0
    loss = -l_clip - const(np.float64(cfg.entropy_weight)) * ent
    clip_frac = float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip_eps))
    return loss, float(l_clip.value), float(ent.value), clip_frac


def critic_objective(batch: dict, ac: ActorCritic, cfg: PPOConfig) -> Var:
    v = ac.value(batch["team_obs"])
    target = batch["returns"]
    if cfg.value_norm:
        target = ac.vnorm.normalize(target)
    return const(np.float64(cfg.critic_weight)) * mse(v, target.reshape(-1, 1))


def update_actor(batch: dict, ac: ActorCritic, cfg: PPOConfig,
                 opt: Adam) -> dict:
    loss, l_clip, ent, clip_frac = actor_objective(batch, ac, cfg)
    if not math.isfinite(float(loss.value)):
        raise FloatingPointError(f"actor loss diverged: {loss.value!r}")
    zero_grads(ac.actor_params())
    backward(loss)
    norm = opt.step(cfg.max_grad_norm)
    return {"actor_loss": float(loss.value), "clip_objective": l_clip,
            "entropy": ent, "clip_fraction": clip_frac, "actor_grad_norm": norm}


def update_critic(batch: dict, ac: ActorCritic, cfg: PPOConfig,
                  opt: Adam) -> dict:
    loss = critic_objective(batch, ac, cfg)
    if not math.isfinite(float(loss.value)):
        raise FloatingPointError(f"critic loss diverged: {loss.value!r}")
    zero_grads(ac.critic_params())
    backward(loss)
    norm = opt.step(cfg.max_grad_norm)
    return {"critic_loss": float(loss.value), "critic_grad_norm": norm}


def update(batch: dict, ac: ActorCritic, cfg: PPOConfig, actor_opt: Adam,
           critic_opt: Adam) -> dict:
    """cfg.epochs actor passes then cfg.critic_epochs critic passes over the
    full batch."""
    if cfg.value_norm:
        ac.vnorm.update(batch["returns"])
    epochs = []
    for _ in range(cfg.epochs):
        epochs.append(update_actor(batch, ac, cfg, actor_opt))
    crit = {}
    for _ in range(cfg.critic_epochs):
        crit = update_critic(batch, ac, cfg, critic_opt)
    out = dict(epochs[-1])
    out.update(crit)
    out["epochs"] = epochs
    out["batch_size"] = int(len(batch["actions"]))
    return out


class MappoTrainer:
    """Collect-update loop with periodic greedy evaluation."""

    def __init__(self, env_cfg: EnvConfig, cfg: PPOConfig | None = None,
                 seed: int = 0):
        self.env_cfg = env_cfg
        # private copy: annealing mutates entropy_weight during training
        self.cfg = replace(cfg) if cfg is not None else PPOConfig()
        self.seed = seed
        self.env = EdgeEnv(env_cfg, seed=seed)
        rng = np.random.default_rng(seed)
        self.ac = ActorCritic(self.env.layout, self.cfg, rng,
                              env_cfg.max_nodes)
        self.actor_opt = Adam(self.ac.actor_params(), lr=self.cfg.lr)
        self.critic_opt = Adam(self.ac.critic_params(), lr=self.cfg.critic_lr)
        self.policy = MappoPolicy(self.ac, mode="sample")
        self.iteration = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------- rollouts

    def collect(self, episodes: int) -> tuple[dict, dict]:
        buf = RolloutBuffer(self.cfg)
        returns, rates = [], []
        counts = {"success": 0, "deadline_violation": 0,
                  "reliability_violation": 0, "resolved": 0}
        for _ in range(episodes):
            self.env.reset()
            buf.start_episode()
            while not self.env.done:
                obs = self.env.obs
                team = critic_input(obs, self.env.slot, self.env_cfg.horizon,
                                    self.cfg.centralized_critic)
                value = float(self.ac.predict_value(team[None, :])[0])
                acts, info = self.policy.act_with_logprobs(self.env)
                masks = self.env.masks
                decisions = [(obs[i], masks[i], a, lp)
                             for i, (a, lp) in info.items()]
                rec = self.env.step(acts)
                buf.add_step(team, value, rec.reward, decisions)
            buf.finish_episode(bootstrap=0.0)
            summary = self.env.episode_summary()
            returns.append(summary["return"])
            rates.append(summary["success_rate"])
            for key in counts:
                counts[key] += summary[key]
        roll_stats = {"return_mean": float(np.mean(returns)),
                      "success_mean": float(np.mean(rates)), **counts}
        return buf.build(), roll_stats

    # ------------------------------------------------------------- training

    def train(self, iterations: int) -> list[dict]:
        for _ in range(iterations):
            batch, roll_stats = self.collect(self.cfg.episodes_per_iter)
            stats = update(batch, self.ac, self.cfg, self.actor_opt,
                           self.critic_opt)
            stats.pop("epochs")
            self.iteration += 1
            row = {"iteration": self.iteration, **roll_stats, **stats}
            if self.iteration % self.cfg.eval_interval == 0:
                ev = self.evaluate(self.cfg.eval_episodes)
                row["eval_success"] = ev["success_mean"]
                row["eval_return"] = ev["return_mean"]
                if self.cfg.lr_decay_enabled:
                    self.actor_opt.decay_lr(self.cfg.lr_decay)
                    self.critic_opt.decay_lr(self.cfg.lr_decay)
                self.cfg.entropy_weight *= self.cfg.entropy_decay
            self.history.append(row)
        return self.history

    def evaluate(self, episodes: int, seed_base: int = 10_000) -> dict:
        """Greedy policy on dedicated eval seeds (paired across trainers).

        success_mean pools counts over all episodes (total successes over
        total resolved tasks); success_std is the per-episode spread.
        """
        pol = MappoPolicy(self.ac, mode="greedy")
        rates, rets = [], []
        succ = res = 0
        for k in range(episodes):
            env = EdgeEnv(self.env_cfg, seed=seed_base + k)
            while not env.done:
                env.step(pol.act(env))
            s = env.episode_summary()
            succ += s["success"]
            res += s["resolved"]
            rates.append(s["success_rate"])
            rets.append(s["return"])
        return {"success_mean": succ / res if res else 1.0,
                "success_std": float(np.std(rates)),
                "return_mean": float(np.mean(rets))}

    # ---------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        save_params(path, self.ac.params(),
                    extra={"ppo_config": json.dumps(asdict(self.cfg)),
                           "iteration": self.iteration,
                           "vnorm": json.dumps(self.ac.vnorm.state())})

    def load(self, path: str) -> None:
        extra = load_params(path, self.ac.params())
        self.iteration = int(extra.get("iteration", self.iteration))
        if "vnorm" in extra:
            self.ac.vnorm.load_state(json.loads(str(extra["vnorm"])))
