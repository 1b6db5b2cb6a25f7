"""Guidance-fused policy learning.

The provider's schema decision is embedded from a learned table, encoded,
and attention-fused with an encoding of the local observation. The fused
feature is distilled by a hybrid loss (feature consistency plus action
cross-entropy through a frozen copy of the actor head) and blended into the
actor's trunk feature with a scheduled coefficient:

    g_F = (1 - lam) * g_drl + lam * phi_last(g_llm)

Gradient flow is strictly separated: the policy loss updates only the
actor/critic (with the guidance term held as a constant snapshot), and the
hybrid loss updates only the fusion parameters (with the actor head weights
held constant). At lam = 0 the blend short-circuits to the bare trunk
feature, making every action distribution bit-identical to the plain MAPPO
pipeline under the same RNG streams.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .env import EdgeEnv, EnvConfig, ObsLayout
from .guidance import (
    GuidanceConfig,
    GuidanceDecision,
    GuidanceEngine,
    Provider,
)
from .heuristics import Policy
from .mappo import (
    ActorCritic,
    MappoTrainer,
    PPOConfig,
    RolloutBuffer,
    critic_input,
    sample_masked_rows,
    update_critic,
)
from .nn import (
    Adam,
    Attention,
    Linear,
    MLP,
    Param,
    Var,
    backward,
    clip,
    const,
    dropout,
    exp,
    expand_dims,
    load_params,
    masked_log_softmax,
    matmul,
    minimum,
    save_params,
    softmax_rows,
    square,
    tanh,
    vmean,
    vsum,
    zero_grads,
)


@dataclass
class FusionConfig:
    """Blend schedule, distillation weight, and module sizes."""

    lambda_init: float = 0.5
    beta_cap: float = 1.0        # upper bound factor: lam <= beta_cap * lambda_init
    eta: float = 0.9             # on-interval boost factor
    gamma_decay: float = 0.995   # off-interval decay factor
    lambda_min: float = 0.05
    interval: int = 50           # steps between boost updates
    w_c: float = 1.0             # action distillation weight
    d_model: int | None = None   # feature width; None = match the actor
    d_k: int = 8
    drop_rate: float = 0.1       # attention dropout, hybrid-loss forward only
    lr: float = 4e-4

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_init <= 1.0 or self.beta_cap <= 0.0:
            raise ValueError("lambda_init in [0, 1] and beta_cap > 0 required")
        if self.beta_cap * self.lambda_init > 1.0:
            raise ValueError("beta_cap * lambda_init must stay within [0, 1]")
        if not 0.0 < self.eta < 1.0 or not 0.0 < self.gamma_decay < 1.0:
            raise ValueError("eta and gamma_decay must lie in (0, 1)")
        if not 0.0 <= self.lambda_min <= self.beta_cap * self.lambda_init:
            raise ValueError("lambda_min must lie in [0, beta_cap * lambda_init]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.w_c < 0.0 or self.lr <= 0.0:
            raise ValueError("w_c must be >= 0 and lr positive")
        if self.d_model is not None and self.d_model < 1:
            raise ValueError("d_model must be >= 1 (or None to match actor)")
        if self.d_k < 1 or not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("bad module sizes or drop rate")


@dataclass
class FusionSchedule:
    """Current blend coefficient plus its update rule parameters."""

    lam: float
    lambda_init: float
    beta_cap: float
    eta: float
    gamma_decay: float
    lambda_min: float
    interval: int

    @classmethod
    def from_config(cls, fcfg: FusionConfig) -> "FusionSchedule":
        return cls(lam=fcfg.lambda_init, lambda_init=fcfg.lambda_init,
                   beta_cap=fcfg.beta_cap, eta=fcfg.eta,
                   gamma_decay=fcfg.gamma_decay, lambda_min=fcfg.lambda_min,
                   interval=fcfg.interval)


def schedule_step(schedule: FusionSchedule, t: int) -> FusionSchedule:
    """On-interval steps re-anchor toward the capped initial value; all other
    steps decay geometrically. Both branches respect the floor so the bounds
    lambda_min <= lam <= beta_cap * lambda_init hold from the first update."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t % schedule.interval == 0:
        lam = min(schedule.beta_cap * schedule.lambda_init,
                  schedule.eta * schedule.lam)
    else:
        lam = schedule.gamma_decay * schedule.lam
    schedule.lam = max(schedule.lambda_min, lam)
    return schedule


# ---------------------------------------------------------------- parameters


class FusionParams:
    """Embedding table over schema action slots plus the encoders, attention,
    output head, and alignment projector.

    Table rows: one per forward slot, one for LOCAL, and a final row for
    invalid/fallback decisions, indexed exactly like env actions with the
    idle slot reused as the invalid row.
    """

    def __init__(self, layout: ObsLayout, fcfg: FusionConfig,
                 rng: np.random.Generator):
        d = fcfg.d_model
        if d is None:
            raise ValueError("FusionParams needs a concrete d_model")
        self.layout = layout
        self.cfg = fcfg
        self.embed = Param("fusion_embed",
                           np.asarray(rng.normal(0.0, 0.1, (layout.n_actions, d))))
        self.f1 = Linear("fusion_f1", layout.obs_dim, d, rng)
        self.f2 = Linear("fusion_f2", d, d, rng)
        self.attn = Attention("fusion_attn", d, fcfg.d_k, rng, fcfg.drop_rate)
        self.head = Linear("fusion_head", d, d, rng)          # O_theta3
        self.phi_last = Linear("fusion_phi_last", d, d, rng)

    def params(self) -> list[Param]:
        return ([self.embed] + self.f1.params() + self.f2.params()
                + self.attn.params() + self.head.params()
                + self.phi_last.params())


def embed_slot(decision: GuidanceDecision, layout: ObsLayout) -> int:
    """Embedding row for a decision: its action id when valid, the dedicated
    invalid row otherwise."""
    return decision.action if decision.valid else layout.idle_action


def _weight(p: Param, frozen: bool) -> Var:
    return const(p.value) if frozen else p.var()


def _linear(x: Var, lin: Linear, frozen: bool = False) -> Var:
    return matmul(x, _weight(lin.w, frozen)) + _weight(lin.b, frozen)


def _mlp(x: Var, mlp: MLP, frozen: bool = False) -> Var:
    for layer in mlp.layers[:-1]:
        x = mlp.act(_linear(x, layer, frozen))
    return _linear(x, mlp.layers[-1], frozen)


def _attention(attn: Attention, h_env: Var, h_ctx: Var, frozen: bool = False,
               drop_rng: np.random.Generator | None = None) -> Var:
    q = matmul(h_env, _weight(attn.wq, frozen))
    k = matmul(h_ctx, _weight(attn.wk, frozen))
    v = matmul(h_ctx, _weight(attn.wv, frozen))
    scores = vsum(expand_dims(q, 1) * k, axis=-1) * (1.0 / math.sqrt(attn.d_k))
    alpha = dropout(softmax_rows(scores), attn.drop_rate, drop_rng)
    return vsum(expand_dims(alpha, 2) * v, axis=1) + h_env


def _embed_rows(fp: FusionParams, slots: np.ndarray, frozen: bool) -> Var:
    onehot = np.zeros((len(slots), fp.layout.n_actions))
    onehot[np.arange(len(slots)), np.asarray(slots, dtype=np.int64)] = 1.0
    return matmul(const(onehot), _weight(fp.embed, frozen))


def embed_guidance(decision: GuidanceDecision, fp: FusionParams) -> np.ndarray:
    """Encoded guidance feature h_llm for one decision (deterministic table
    lookup followed by the f2 encoder)."""
    slot = embed_slot(decision, fp.layout)
    e = _embed_rows(fp, np.array([slot]), frozen=True)
    return tanh(_linear(e, fp.f2, frozen=True)).value[0]


def distill(obs: np.ndarray, slots: np.ndarray, fp: FusionParams,
            frozen: bool = False,
            drop_rng: np.random.Generator | None = None) -> tuple[Var, Var]:
    """Attention-fuse the encoded observation with the encoded guidance
    decision. Returns (h_t, g_llm) where g_llm = head(h_t)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != fp.layout.obs_dim:
        raise ValueError(f"obs must be (B, {fp.layout.obs_dim})")
    if len(slots) != obs.shape[0]:
        raise ValueError("one guidance slot per observation row required")
    h_env = tanh(_linear(const(obs), fp.f1, frozen))
    h_llm = tanh(_linear(_embed_rows(fp, slots, frozen), fp.f2, frozen))
    h_t = _attention(fp.attn, h_env, expand_dims(h_llm, 1), frozen, drop_rng)
    return h_t, _linear(h_t, fp.head, frozen)


def guidance_feature(obs: np.ndarray, slots: np.ndarray, fp: FusionParams,
                     frozen: bool = False,
                     drop_rng: np.random.Generator | None = None) -> Var:
    """phi_last(g_llm): the aligned guidance-side feature entering the blend."""
    _, g_llm = distill(obs, slots, fp, frozen, drop_rng)
    return _linear(g_llm, fp.phi_last, frozen)


def fuse(obs: np.ndarray, g_llm: Var | None, lam: float, ac: ActorCritic,
         fp: FusionParams | None) -> Var:
    """Convex blend of the actor trunk feature with the aligned guidance
    feature. lam = 0 (or absent guidance) short-circuits to the bare trunk
    output so the plain pipeline is reproduced exactly."""
    g_drl = ac.features(obs)
    if lam == 0.0 or g_llm is None or fp is None:
        return g_drl
    aligned = _linear(g_llm, fp.phi_last, frozen=False)
    return g_drl * const(np.float64(1.0 - lam)) + aligned * const(np.float64(lam))


# ------------------------------------------------------------------- losses


def hybrid_loss(batch: dict, fp: FusionParams, ac: ActorCritic,
                w_c: float, drop_rng: np.random.Generator | None = None
                ) -> tuple[Var, float, float]:
    """L_feat + w_c * L_act over one decision batch.

    L_feat keeps the head close to an identity map on the attention output
    (self-consistency of the distilled feature). L_act is the cross-entropy
    of the provider's action under the actor head read on the aligned
    guidance feature; the head weights are constants here, so this loss
    touches only fusion parameters.
    """
    h_t, g_llm = distill(batch["obs"], batch["g_slots"], fp, frozen=False,
                         drop_rng=drop_rng)
    l_feat = vmean(vsum(square(h_t - g_llm), axis=-1))
    aligned = _linear(g_llm, fp.phi_last, frozen=False)
    logp = masked_log_softmax(_mlp(aligned, ac.head, frozen=True),
                              batch["masks"])
    onehot = np.zeros_like(batch["masks"])
    onehot[np.arange(len(batch["g_actions"])), batch["g_actions"]] = 1.0
    l_act = vmean(-vsum(logp * const(onehot), axis=-1))
    total = l_feat + const(np.float64(w_c)) * l_act
    return total, float(l_feat.value), float(l_act.value)


def fused_log_probs(batch: dict, ac: ActorCritic,
                    guidance_term: np.ndarray | None) -> Var:
    """Actor log-probabilities on blended features for the policy update.
    The guidance term is a numeric snapshot (already scaled by lam), so
    gradients reach only the trunk and head."""
    feats = ac.features(batch["obs"])
    if guidance_term is not None:
        scale = (1.0 - batch["lams"]).reshape(-1, 1)
        feats = feats * const(scale) + const(guidance_term)
    return masked_log_softmax(_mlp(feats, ac.head, frozen=False),
                              batch["masks"])


def fused_actor_objective(batch: dict, ac: ActorCritic, cfg: PPOConfig,
                          guidance_term: np.ndarray | None) -> tuple:
    """Clipped-surrogate PPO loss on the blended features."""
    logp_all = fused_log_probs(batch, ac, guidance_term)
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
    ent = vmean(-vsum(p * logp_all, axis=-1))
    loss = -l_clip - const(np.float64(cfg.entropy_weight)) * ent
    clip_frac = float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip_eps))
    return loss, float(l_clip.value), float(ent.value), clip_frac


def snapshot_guidance_term(batch: dict, fp: FusionParams) -> np.ndarray | None:
    """Numeric lam * phi_last(g_llm) per row, or None when every row has
    lam = 0 so the policy path can skip the blend entirely."""
    lams = batch["lams"]
    if not np.any(lams):
        return None
    feat = guidance_feature(batch["obs"], batch["g_slots"], fp,
                            frozen=True).value
    return feat * lams.reshape(-1, 1)


# -------------------------------------------------------------------- policy


class FusedPolicy(Policy):
    """Actor execution on blended features. Without an engine (provider off)
    it reduces to the plain trunk pipeline regardless of the schedule."""

    name = "fused"

    def __init__(self, ac: ActorCritic, fp: FusionParams | None,
                 engine: GuidanceEngine | None,
                 schedule: FusionSchedule | None, mode: str = "sample"):
        if mode not in ("sample", "greedy"):
            raise ValueError("mode must be 'sample' or 'greedy'")
        self.ac = ac
        self.fp = fp
        self.engine = engine
        self.schedule = schedule
        self.mode = mode

    @property
    def lam(self) -> float:
        return 0.0 if self.schedule is None else self.schedule.lam

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
        decisions = (self.engine.decide_all(env)
                     if self.engine is not None else {})
        slots = np.array([embed_slot(decisions[i], lay) if i in decisions
                          else lay.idle_action for i in holders])
        # recorded lam must match the features actually used, so rows fall
        # back to 0 whenever the guidance side is unavailable
        lam = self.lam if (self.fp is not None and decisions) else 0.0
        if lam == 0.0:
            feats = self.ac.features(obs[holders])
        else:
            aligned = guidance_feature(obs[holders], slots, self.fp,
                                       frozen=False)
            feats = (self.ac.features(obs[holders])
                     * const(np.float64(1.0 - lam))
                     + aligned * const(np.float64(lam)))
        logp = masked_log_softmax(_mlp(feats, self.ac.head), masks[holders]).value
        probs = np.exp(logp)
        if self.mode == "greedy":
            chosen = probs.argmax(axis=1)
        else:
            chosen = sample_masked_rows(probs, masks[holders],
                                        env.streams.policy)
        acts[holders] = chosen
        info = {}
        for k, (i, a) in enumerate(zip(holders, chosen)):
            dec = decisions.get(int(i))
            g_action = dec.action if dec is not None else lay.local_action
            valid = bool(dec.valid) if dec is not None else False
            info[int(i)] = {"action": int(a), "logp": float(logp[k, a]),
                            "g_slot": int(slots[k]), "g_action": int(g_action),
                            "g_valid": valid, "lam": lam}
        return acts, info

    def reset(self) -> None:
        if self.engine is not None:
            self.engine.reset_episode()


# -------------------------------------------------------------------- buffer


class FusionBuffer(RolloutBuffer):
    """Rollout buffer with per-decision guidance columns."""

    def start_episode(self) -> None:
        super().start_episode()
        self._cur.update({"g_slots": [], "g_actions": [], "lams": []})

    def add_step(self, team_obs, value, reward, decisions) -> None:
        base = [(o, m, a, lp) for (o, m, a, lp, _, _, _) in decisions]
        super().add_step(team_obs, value, reward, base)
        for _, _, _, _, slot, g_action, lam in decisions:
            self._cur["g_slots"].append(slot)
            self._cur["g_actions"].append(g_action)
            self._cur["lams"].append(lam)

    def build(self) -> dict:
        out = super().build()
        out["g_slots"] = np.asarray(
            [s for ep in self._episodes for s in ep["g_slots"]], dtype=np.int64)
        out["g_actions"] = np.asarray(
            [a for ep in self._episodes for a in ep["g_actions"]], dtype=np.int64)
        out["lams"] = np.asarray(
            [l for ep in self._episodes for l in ep["lams"]], dtype=np.float64)
        return out


# ------------------------------------------------------------------- trainer


class FusionTrainer(MappoTrainer):
    """MAPPO loop extended with guidance collection, the hybrid distillation
    update, and the scheduled blend. Divergence aborts after checkpointing
    the last finite state when an abort path is set."""

    def __init__(self, env_cfg: EnvConfig, cfg: PPOConfig | None = None,
                 fcfg: FusionConfig | None = None,
                 provider: Provider | None = None,
                 gcfg: GuidanceConfig | None = None, seed: int = 0,
                 abort_path: str | None = None):
        super().__init__(env_cfg, cfg, seed)
        self.fcfg = fcfg if fcfg is not None else FusionConfig()
        if self.fcfg.d_model is None:
            self.fcfg = replace(self.fcfg, d_model=self.ac.feat_dim)
        if self.fcfg.d_model != self.ac.feat_dim:
            raise ValueError(
                "fusion d_model must equal the actor feature width")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.fusion = FusionParams(self.env.layout, self.fcfg, rng)
        self.fusion_opt = Adam(self.fusion.params(), lr=self.fcfg.lr)
        self.drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.schedule = FusionSchedule.from_config(self.fcfg)
        self.engine = (GuidanceEngine(env_cfg, provider, gcfg)
                       if provider is not None else None)
        self.provider = provider
        self.gcfg = gcfg if gcfg is not None else GuidanceConfig()
        self.policy = FusedPolicy(self.ac, self.fusion, self.engine,
                                  self.schedule, mode="sample")
        self.abort_path = abort_path
        self.t = 0
        self.lambda_trace: list[float] = []

    # ------------------------------------------------------------- rollouts

    def collect(self, episodes: int) -> tuple[dict, dict]:
        buf = FusionBuffer(self.cfg)
        returns, rates = [], []
        counts = {"success": 0, "deadline_violation": 0,
                  "reliability_violation": 0, "resolved": 0}
        queries = fallbacks = 0
        for _ in range(episodes):
            self.env.reset()
            self.policy.reset()
            buf.start_episode()
            while not self.env.done:
                obs = self.env.obs
                team = critic_input(obs, self.env.slot, self.env_cfg.horizon,
                                    self.cfg.centralized_critic)
                value = float(self.ac.predict_value(team[None, :])[0])
                acts, info = self.policy.act_with_logprobs(self.env)
                masks = self.env.masks
                decisions = [(obs[i], masks[i], d["action"], d["logp"],
                              d["g_slot"], d["g_action"], d["lam"])
                             for i, d in info.items()]
                queries += len(info)
                fallbacks += sum(1 for d in info.values() if not d["g_valid"])
                rec = self.env.step(acts)
                buf.add_step(team, value, rec.reward, decisions)
                self.t += 1
                schedule_step(self.schedule, self.t)
                self.lambda_trace.append(self.schedule.lam)
            if self.engine is not None:
                self.engine.sync(self.env)
            buf.finish_episode(bootstrap=0.0)
            summary = self.env.episode_summary()
            returns.append(summary["return"])
            rates.append(summary["success_rate"])
            for key in counts:
                counts[key] += summary[key]
        roll_stats = {
            "return_mean": float(np.mean(returns)),
            "success_mean": float(np.mean(rates)),
            "lambda": float(self.schedule.lam),
            "guidance_valid_rate": (1.0 - fallbacks / queries) if queries else 1.0,
            **counts,
        }
        return buf.build(), roll_stats

    # ------------------------------------------------------------- training

    def update_fusion(self, batch: dict) -> dict:
        loss, l_feat, l_act = hybrid_loss(batch, self.fusion, self.ac,
                                          self.fcfg.w_c, self.drop_rng)
        if not math.isfinite(float(loss.value)):
            raise FloatingPointError(f"hybrid loss diverged: {loss.value!r}")
        zero_grads(self.fusion.params())
        backward(loss)
        norm = self.fusion_opt.step(self.cfg.max_grad_norm)
        return {"hybrid_loss": float(loss.value), "l_feat": l_feat,
                "l_act": l_act, "fusion_grad_norm": norm}

    def update_fused_actor(self, batch: dict,
                           guidance_term: np.ndarray | None) -> dict:
        loss, l_clip, ent, clip_frac = fused_actor_objective(
            batch, self.ac, self.cfg, guidance_term)
        if not math.isfinite(float(loss.value)):
            raise FloatingPointError(f"actor loss diverged: {loss.value!r}")
        zero_grads(self.ac.actor_params())
        backward(loss)
        norm = self.actor_opt.step(self.cfg.max_grad_norm)
        return {"actor_loss": float(loss.value), "clip_objective": l_clip,
                "entropy": ent, "clip_fraction": clip_frac,
                "actor_grad_norm": norm}

    def train(self, iterations: int) -> list[dict]:
        try:
            for _ in range(iterations):
                batch, roll_stats = self.collect(self.cfg.episodes_per_iter)
                if self.cfg.value_norm:
                    self.ac.vnorm.update(batch["returns"])
                guidance_term = snapshot_guidance_term(batch, self.fusion)
                stats: dict = {}
                for _ in range(self.cfg.epochs):
                    stats = self.update_fused_actor(batch, guidance_term)
                    stats.update(self.update_fusion(batch))
                for _ in range(self.cfg.critic_epochs):
                    stats.update(update_critic(batch, self.ac, self.cfg,
                                               self.critic_opt))
                self.iteration += 1
                row = {"iteration": self.iteration, **roll_stats, **stats}
                if self.iteration % self.cfg.eval_interval == 0:
                    ev = self.evaluate(self.cfg.eval_episodes)
                    row["eval_success"] = ev["success_mean"]
                    row["eval_return"] = ev["return_mean"]
                    if self.cfg.lr_decay_enabled:
                        self.actor_opt.decay_lr(self.cfg.lr_decay)
                        self.critic_opt.decay_lr(self.cfg.lr_decay)
                        self.fusion_opt.decay_lr(self.cfg.lr_decay)
                    self.cfg.entropy_weight *= self.cfg.entropy_decay
                self.history.append(row)
        except FloatingPointError:
            if self.abort_path is not None:
                self.save(self.abort_path)
            raise
        return self.history

    def evaluate(self, episodes: int, seed_base: int = 10_000) -> dict:
        """Greedy fused policy with the schedule frozen; each eval episode
        gets a fresh guidance engine so training memory state is untouched.

        success_mean pools counts over all episodes (total successes over
        total resolved tasks); success_std is the per-episode spread.
        """
        rates, rets = [], []
        succ = res = 0
        for k in range(episodes):
            env = EdgeEnv(self.env_cfg, seed=seed_base + k)
            engine = (GuidanceEngine(self.env_cfg, self.provider, self.gcfg)
                      if self.provider is not None else None)
            pol = FusedPolicy(self.ac, self.fusion, engine, self.schedule,
                              mode="greedy")
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
        save_params(path, self.ac.params() + self.fusion.params(),
                    extra={"ppo_config": json.dumps(asdict(self.cfg)),
                           "fusion_config": json.dumps(asdict(self.fcfg)),
                           "iteration": self.iteration,
                           "lam": self.schedule.lam, "t": self.t,
                           "vnorm": json.dumps(self.ac.vnorm.state())})

    def load(self, path: str) -> None:
        extra = load_params(path, self.ac.params() + self.fusion.params())
        self.iteration = int(extra.get("iteration", self.iteration))
        if "lam" in extra:
            self.schedule.lam = float(extra["lam"])
        if "t" in extra:
            self.t = int(extra["t"])
        if "vnorm" in extra:
            self.ac.vnorm.load_state(json.loads(str(extra["vnorm"])))
