"""Blend schedule, guidance embedding, distillation losses, and the fused
training loop. Hand-computed cases use d_model=2, d_k=1 modules whose
weights are overwritten with closed-form-friendly values."""

from __future__ import annotations

import math
import os

import numpy as np
import pytest

from coedge.env import EdgeEnv, EnvConfig, ObsLayout
from coedge.fusion import (
    FusedPolicy,
    FusionBuffer,
    FusionConfig,
    FusionParams,
    FusionSchedule,
    FusionTrainer,
    distill,
    embed_guidance,
    embed_slot,
    fuse,
    fused_actor_objective,
    fused_log_probs,
    guidance_feature,
    hybrid_loss,
    schedule_step,
    snapshot_guidance_term,
)
from coedge.guidance import GuidanceConfig, GuidanceDecision, ScriptedProvider
from coedge.mappo import ActorCritic, MappoTrainer, PPOConfig
from coedge.nn import backward, finite_difference, zero_grads


def make_schedule(**kw) -> FusionSchedule:
    return FusionSchedule.from_config(FusionConfig(**kw))


def local_decision(lay: ObsLayout, valid=True) -> GuidanceDecision:
    return GuidanceDecision(action_kind="local", target=None,
                            action=lay.local_action,
                            raw_provider_output="ACTION=LOCAL", valid=valid)


def forward_decision(lay: ObsLayout, j: int) -> GuidanceDecision:
    return GuidanceDecision(action_kind="forward", target=j, action=j,
                            raw_provider_output=f"ACTION=FORWARD TARGET={j}",
                            valid=True)


def tiny_params(seed=0, **cfg_kw) -> tuple[FusionParams, ObsLayout]:
    lay = ObsLayout(2)
    fcfg = FusionConfig(d_model=2, d_k=1, drop_rate=0.0, **cfg_kw)
    fp = FusionParams(lay, fcfg, np.random.default_rng(seed))
    return fp, lay


class TestFusionConfig:
    def test_defaults_valid(self):
        FusionConfig()

    def test_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(lambda_init=1.5)
        with pytest.raises(ValueError):
            FusionConfig(beta_cap=3.0)  # cap * init > 1
        with pytest.raises(ValueError):
            FusionConfig(eta=1.0)
        with pytest.raises(ValueError):
            FusionConfig(gamma_decay=0.0)
        with pytest.raises(ValueError):
            FusionConfig(lambda_min=0.6)  # above beta_cap * lambda_init
        with pytest.raises(ValueError):
            FusionConfig(interval=0)
        with pytest.raises(ValueError):
            FusionConfig(w_c=-0.1)
        with pytest.raises(ValueError):
            FusionConfig(drop_rate=1.0)


class TestSchedule:
    def test_boost_hand_value(self):
        s = make_schedule()
        s.lam = 0.3
        schedule_step(s, 50)
        assert s.lam == pytest.approx(min(1.0 * 0.5, 0.9 * 0.3), abs=1e-15)
        assert s.lam == pytest.approx(0.27, abs=1e-15)

    def test_boost_caps_at_init(self):
        s = make_schedule()
        s.lam = 0.9  # above cap only possible by construction here
        schedule_step(s, 100)
        assert s.lam == pytest.approx(0.5, abs=1e-15)  # min(0.5, 0.81)

    def test_decay_hand_value(self):
        s = make_schedule(gamma_decay=0.99)
        s.lam = 0.2
        schedule_step(s, 51)
        assert s.lam == pytest.approx(0.198, abs=1e-15)

    def test_floor_holds_off_interval(self):
        s = make_schedule()
        s.lam = s.lambda_min
        schedule_step(s, 7)
        assert s.lam == s.lambda_min

    def test_floor_holds_on_interval(self):
        # eta * lambda_min dips below the floor; the bound must still hold
        s = make_schedule()
        s.lam = s.lambda_min
        schedule_step(s, 50)
        assert s.lam == s.lambda_min

    def test_bounds_invariant_long_run(self):
        for gamma in (0.9, 0.995):
            s = make_schedule(gamma_decay=gamma)
            for t in range(1, 500):
                schedule_step(s, t)
                assert s.lambda_min - 1e-15 <= s.lam <= s.beta_cap * s.lambda_init + 1e-15

    def test_zero_init_stays_zero(self):
        s = make_schedule(lambda_init=0.0, lambda_min=0.0)
        for t in range(1, 200):
            schedule_step(s, t)
            assert s.lam == 0.0

    def test_negative_t_rejected(self):
        with pytest.raises(ValueError):
            schedule_step(make_schedule(), -1)


class TestEmbedding:
    def test_slot_mapping(self):
        lay = ObsLayout(4)
        assert embed_slot(local_decision(lay), lay) == lay.local_action
        assert embed_slot(forward_decision(lay, 2), lay) == 2
        assert embed_slot(local_decision(lay, valid=False), lay) == lay.idle_action

    def test_identical_decisions_identical_embeddings(self):
        fp, lay = tiny_params()
        a = embed_guidance(local_decision(lay), fp)
        b = embed_guidance(local_decision(lay), fp)
        assert np.array_equal(a, b)

    def test_local_and_forward_select_distinct_rows(self):
        fp, lay = tiny_params()
        a = embed_guidance(local_decision(lay), fp)
        b = embed_guidance(forward_decision(lay, 0), fp)
        assert not np.allclose(a, b)

    def test_zeroed_encoder_gives_bias_vector(self):
        fp, lay = tiny_params()
        fp.f2.w.value[:] = 0.0
        fp.f2.b.value[:] = np.array([0.25, -0.5])
        want = np.tanh([0.25, -0.5])
        for dec in (local_decision(lay), forward_decision(lay, 1),
                    local_decision(lay, valid=False)):
            assert np.allclose(embed_guidance(dec, fp), want, atol=1e-15)


class TestDistill:
    def craft(self):
        """Closed-form weights: f1 constant via bias, f2 identity,
        value projection identity, head identity."""
        fp, lay = tiny_params()
        fp.f1.w.value[:] = 0.0
        fp.f1.b.value[:] = np.array([0.3, -0.2])
        fp.f2.w.value[:] = np.eye(2)
        fp.f2.b.value[:] = 0.0
        fp.embed.value[lay.local_action] = np.array([0.5, 0.1])
        fp.attn.wv.value[:] = np.eye(2)
        fp.head.w.value[:] = np.eye(2)
        fp.head.b.value[:] = 0.0
        obs = np.zeros((1, lay.obs_dim))
        slots = np.array([lay.local_action])
        return fp, lay, obs, slots

    def test_hand_computed_attention_path(self):
        fp, lay, obs, slots = self.craft()
        h_t, g_llm = distill(obs, slots, fp)
        h_env = np.tanh([0.3, -0.2])
        h_llm = np.tanh([0.5, 0.1])
        # single context item: attention weight is exactly 1, residual adds h_env
        want = h_llm + h_env
        assert np.allclose(h_t.value[0], want, atol=1e-12)
        assert np.allclose(g_llm.value[0], want, atol=1e-12)  # identity head

    def test_zero_value_projection_is_residual_only(self):
        fp, lay, obs, slots = self.craft()
        fp.attn.wv.value[:] = 0.0
        h_t, g_llm = distill(obs, slots, fp)
        h_env = np.tanh([0.3, -0.2])
        assert np.allclose(h_t.value[0], h_env, atol=1e-15)
        assert np.allclose(g_llm.value[0], h_env, atol=1e-15)

    def test_deterministic_without_dropout(self):
        fp, lay = tiny_params(seed=3)
        obs = np.random.default_rng(0).random((4, lay.obs_dim))
        slots = np.array([0, 1, lay.local_action, lay.idle_action])
        a, _ = distill(obs, slots, fp)
        b, _ = distill(obs, slots, fp)
        assert np.array_equal(a.value, b.value)

    def test_shape_errors(self):
        fp, lay = tiny_params()
        with pytest.raises(ValueError):
            distill(np.zeros((2, lay.obs_dim + 1)), np.array([0, 1]), fp)
        with pytest.raises(ValueError):
            distill(np.zeros((2, lay.obs_dim)), np.array([0]), fp)

    def test_dropout_only_with_rng(self):
        fp, lay = tiny_params(seed=4)
        fp.attn.drop_rate = 0.5
        obs = np.random.default_rng(1).random((8, lay.obs_dim))
        slots = np.zeros(8, dtype=np.int64)
        plain, _ = distill(obs, slots, fp)
        dropped, _ = distill(obs, slots, fp,
                             drop_rng=np.random.default_rng(5))
        again, _ = distill(obs, slots, fp,
                           drop_rng=np.random.default_rng(5))
        assert not np.allclose(plain.value, dropped.value)
        assert np.array_equal(dropped.value, again.value)


class TestFuse:
    def setup(self):
        lay = ObsLayout(2)
        pcfg = PPOConfig(trunk_dim=2, hidden_dim=8, structured_trunk=False)
        ac = ActorCritic(lay, pcfg, np.random.default_rng(0), lay.max_nodes)
        fcfg = FusionConfig(d_model=2, d_k=1, drop_rate=0.0)
        fp = FusionParams(lay, fcfg, np.random.default_rng(1))
        obs = np.random.default_rng(2).random((3, lay.obs_dim))
        slots = np.array([0, 1, lay.local_action])
        return ac, fp, obs, slots

    def test_lambda_zero_is_trunk_exactly(self):
        ac, fp, obs, slots = self.setup()
        g = fuse(obs, None, 0.0, ac, fp)
        assert np.array_equal(g.value, ac.features(obs).value)
        g_llm = distill(obs, slots, fp)[1]
        g2 = fuse(obs, g_llm, 0.0, ac, fp)
        assert np.array_equal(g2.value, ac.features(obs).value)

    def test_lambda_one_is_aligned_guidance(self):
        ac, fp, obs, slots = self.setup()
        aligned = guidance_feature(obs, slots, fp).value
        g = fuse(obs, distill(obs, slots, fp)[1], 1.0, ac, fp)
        assert np.allclose(g.value, aligned, atol=1e-15)

    def test_lambda_half_is_elementwise_midpoint(self):
        ac, fp, obs, slots = self.setup()
        drl = ac.features(obs).value
        aligned = guidance_feature(obs, slots, fp).value
        g = fuse(obs, distill(obs, slots, fp)[1], 0.5, ac, fp)
        assert np.allclose(g.value, 0.5 * drl + 0.5 * aligned, atol=1e-14)


def make_batch(ac: ActorCritic, fp: FusionParams, lay: ObsLayout, n=6,
               lam=0.3, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    obs = rng.random((n, lay.obs_dim))
    masks = np.zeros((n, lay.n_actions))
    masks[:, lay.local_action] = 1.0
    for i in range(n):
        masks[i, rng.integers(0, lay.max_nodes)] = 1.0
    actions = np.array([int(np.nonzero(m)[0][0]) for m in masks])
    g_actions = np.array([lay.local_action] * n)
    g_slots = np.array([lay.local_action] * n)
    logp_old = fused_log_probs(
        {"obs": obs, "masks": masks, "lams": np.full(n, lam)},
        ac, snapshot_guidance_term(
            {"obs": obs, "g_slots": g_slots, "lams": np.full(n, lam)}, fp)
    ).value[np.arange(n), actions]
    return {"obs": obs, "masks": masks, "actions": actions,
            "logp_old": logp_old, "adv": rng.normal(size=n),
            "g_slots": g_slots, "g_actions": g_actions,
            "lams": np.full(n, lam)}


class TestHybridLoss:
    def setup(self):
        lay = ObsLayout(2)
        pcfg = PPOConfig(trunk_dim=2, hidden_dim=8, structured_trunk=False)
        ac = ActorCritic(lay, pcfg, np.random.default_rng(0), lay.max_nodes)
        fcfg = FusionConfig(d_model=2, d_k=1, drop_rate=0.0)
        fp = FusionParams(lay, fcfg, np.random.default_rng(1))
        return ac, fp, lay

    def test_identity_head_zeroes_feature_loss(self):
        ac, fp, lay = self.setup()
        fp.head.w.value[:] = np.eye(2)
        fp.head.b.value[:] = 0.0
        batch = make_batch(ac, fp, lay)
        _, l_feat, _ = hybrid_loss(batch, fp, ac, w_c=1.0)
        assert l_feat == pytest.approx(0.0, abs=1e-24)

    def test_uniform_logits_give_ln_k(self):
        ac, fp, lay = self.setup()
        for p in ac.head.params():
            p.value[:] = 0.0  # constant zero logits -> uniform over valid
        batch = make_batch(ac, fp, lay)
        batch["masks"][:] = 0.0
        batch["masks"][:, :4] = 1.0  # K = 4 valid actions
        batch["g_actions"][:] = 2
        _, _, l_act = hybrid_loss(batch, fp, ac, w_c=1.0)
        assert l_act == pytest.approx(math.log(4.0), abs=1e-12)

    def test_wc_zero_reduces_to_feature_loss(self):
        ac, fp, lay = self.setup()
        batch = make_batch(ac, fp, lay)
        total, l_feat, _ = hybrid_loss(batch, fp, ac, w_c=0.0)
        assert float(total.value) == pytest.approx(l_feat, abs=1e-15)

    def test_gradients_touch_only_fusion_params(self):
        ac, fp, lay = self.setup()
        batch = make_batch(ac, fp, lay)
        zero_grads(ac.params() + fp.params())
        total, _, _ = hybrid_loss(batch, fp, ac, w_c=1.0)
        backward(total)
        assert all(np.all(p.grad == 0.0) for p in ac.params())
        assert any(np.any(p.grad != 0.0) for p in fp.params())
        assert np.any(fp.embed.grad != 0.0)  # table rows receive gradient

    def test_policy_gradients_never_touch_fusion_params(self):
        ac, fp, lay = self.setup()
        batch = make_batch(ac, fp, lay)
        term = snapshot_guidance_term(batch, fp)
        zero_grads(ac.params() + fp.params())
        loss, *_ = fused_actor_objective(batch, ac,
                                         PPOConfig(trunk_dim=2,
                                                   structured_trunk=False),
                                         term)
        backward(loss)
        assert all(np.all(p.grad == 0.0) for p in fp.params())
        assert any(np.any(p.grad != 0.0) for p in ac.actor_params())

    def test_hybrid_gradients_match_finite_differences(self):
        ac, fp, lay = self.setup()
        batch = make_batch(ac, fp, lay, n=4, seed=3)
        zero_grads(fp.params())
        total, _, _ = hybrid_loss(batch, fp, ac, w_c=0.7)
        grads = backward(total)
        fd = finite_difference(
            lambda: float(hybrid_loss(batch, fp, ac, w_c=0.7)[0].value),
            fp.params())
        for p in fp.params():
            num, ana = fd[p.name], grads[p.name]
            denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
            assert np.abs(num - ana).max() / denom < 1e-4, p.name

    def test_joint_objective_matches_finite_differences(self):
        # Cross inputs are snapshots: the guidance term enters the policy
        # loss as a numeric array and the hybrid loss reads a detached copy
        # of the actor head, so the joint gradient is exactly blockwise.
        ac, fp, lay = self.setup()
        head_copy = ActorCritic(
            lay, PPOConfig(trunk_dim=2, hidden_dim=8, structured_trunk=False),
            np.random.default_rng(9), lay.max_nodes)
        for src, dst in zip(ac.head.params(), head_copy.head.params()):
            dst.value[...] = src.value
        batch = make_batch(ac, fp, lay, n=4, seed=4)
        term = snapshot_guidance_term(batch, fp)
        pcfg = PPOConfig(trunk_dim=2, structured_trunk=False)

        def total_value() -> float:
            pol = fused_actor_objective(batch, ac, pcfg, term)[0]
            hyb = hybrid_loss(batch, fp, head_copy, w_c=1.0)[0]
            return float(pol.value) + float(hyb.value)

        params = ac.actor_params() + fp.params()
        zero_grads(params + head_copy.params())
        loss_p = fused_actor_objective(batch, ac, pcfg, term)[0]
        loss_h = hybrid_loss(batch, fp, head_copy, w_c=1.0)[0]
        g1 = backward(loss_p)
        g2 = backward(loss_h)
        fd = finite_difference(total_value, params)
        for p in params:
            ana = g1.get(p.name, 0.0) + g2.get(p.name, 0.0)
            num = fd[p.name]
            denom = max(np.abs(num).max(), np.abs(np.asarray(ana)).max(), 1e-8)
            assert np.abs(num - ana).max() / denom < 1e-4, p.name


class TestFusedPolicyCollapse:
    def test_lambda_zero_training_is_bit_identical_to_mappo(self):
        cfg = EnvConfig(horizon=25)
        pcfg = PPOConfig(episodes_per_iter=2, epochs=1, eval_interval=100)
        fcfg = FusionConfig(lambda_init=0.0, lambda_min=0.0)
        ft = FusionTrainer(cfg, pcfg, fcfg,
                           provider=ScriptedProvider(cfg), seed=11)
        mt = MappoTrainer(cfg, pcfg, seed=11)
        fb, _ = ft.collect(2)
        mb, _ = mt.collect(2)
        assert np.array_equal(fb["actions"], mb["actions"])
        assert np.array_equal(fb["logp_old"], mb["logp_old"])
        assert np.array_equal(fb["obs"], mb["obs"])
        assert np.all(fb["lams"] == 0.0)

    def test_provider_off_matches_mappo_even_with_positive_lambda(self):
        cfg = EnvConfig(horizon=25)
        pcfg = PPOConfig(episodes_per_iter=1, epochs=1, eval_interval=100)
        ft = FusionTrainer(cfg, pcfg, FusionConfig(), provider=None, seed=7)
        mt = MappoTrainer(cfg, pcfg, seed=7)
        fb, _ = ft.collect(1)
        mb, _ = mt.collect(1)
        assert np.array_equal(fb["actions"], mb["actions"])
        assert np.array_equal(fb["logp_old"], mb["logp_old"])
        assert np.all(fb["lams"] == 0.0)

    def test_greedy_fused_policy_is_deterministic(self):
        cfg = EnvConfig(horizon=20)
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=1),
                           FusionConfig(), provider=ScriptedProvider(cfg),
                           seed=3)
        outs = []
        for _ in range(2):
            env = EdgeEnv(cfg, seed=42)
            from coedge.guidance import GuidanceEngine
            pol = FusedPolicy(ft.ac, ft.fusion,
                              GuidanceEngine(cfg, ScriptedProvider(cfg)),
                              ft.schedule, mode="greedy")
            acts = []
            while not env.done:
                a = pol.act(env)
                acts.append(a.copy())
                env.step(a)
            outs.append(np.stack(acts))
        assert np.array_equal(outs[0], outs[1])


class TestFusionBufferColumns:
    def test_guidance_columns_align_with_decisions(self):
        cfg = EnvConfig(horizon=20)
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=2),
                           FusionConfig(), provider=ScriptedProvider(cfg),
                           seed=2)
        batch, stats = ft.collect(2)
        n = len(batch["actions"])
        assert len(batch["g_slots"]) == n
        assert len(batch["g_actions"]) == n
        assert len(batch["lams"]) == n
        lay = ft.env.layout
        assert np.all(batch["g_slots"] >= 0)
        assert np.all(batch["g_slots"] < lay.n_actions)
        assert np.all(batch["g_actions"] <= lay.local_action)
        assert np.all((batch["lams"] >= 0.0) & (batch["lams"] <= 1.0))
        assert 0.0 <= stats["guidance_valid_rate"] <= 1.0


class TestFusionTrainer:
    def test_short_training_run_history(self):
        cfg = EnvConfig(horizon=20)
        pcfg = PPOConfig(episodes_per_iter=2, epochs=2, eval_interval=2,
                         eval_episodes=1)
        ft = FusionTrainer(cfg, pcfg, FusionConfig(interval=10),
                           provider=ScriptedProvider(cfg), seed=0)
        hist = ft.train(2)
        assert len(hist) == 2
        for row in hist:
            for key in ("hybrid_loss", "l_feat", "l_act", "lambda",
                        "guidance_valid_rate", "actor_loss", "critic_loss"):
                assert key in row
        assert "eval_success" in hist[1] and "eval_success" not in hist[0]

    def test_lambda_trace_respects_bounds(self):
        cfg = EnvConfig(horizon=30)
        fcfg = FusionConfig(interval=7)
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=2, epochs=1,
                                          eval_interval=100),
                           fcfg, provider=ScriptedProvider(cfg), seed=1)
        ft.collect(4)
        trace = np.asarray(ft.lambda_trace)
        assert trace.size >= 100
        assert np.all(trace >= fcfg.lambda_min - 1e-15)
        assert np.all(trace <= fcfg.beta_cap * fcfg.lambda_init + 1e-15)

    def test_fusion_update_leaves_actor_bits(self):
        cfg = EnvConfig(horizon=20)
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=1),
                           FusionConfig(), provider=ScriptedProvider(cfg),
                           seed=4)
        batch, _ = ft.collect(1)
        before = [p.value.copy() for p in ft.ac.params()]
        ft.update_fusion(batch)
        assert all(np.array_equal(b, p.value)
                   for b, p in zip(before, ft.ac.params()))

    def test_actor_update_leaves_fusion_bits(self):
        cfg = EnvConfig(horizon=20)
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=1),
                           FusionConfig(), provider=ScriptedProvider(cfg),
                           seed=4)
        batch, _ = ft.collect(1)
        term = snapshot_guidance_term(batch, ft.fusion)
        before = [p.value.copy() for p in ft.fusion.params()]
        ft.update_fused_actor(batch, term)
        assert all(np.array_equal(b, p.value)
                   for b, p in zip(before, ft.fusion.params()))

    def test_nan_batch_aborts_with_checkpoint(self, tmp_path):
        cfg = EnvConfig(horizon=15)
        path = str(tmp_path / "abort.npz")
        ft = FusionTrainer(cfg, PPOConfig(episodes_per_iter=1, epochs=1,
                                          eval_interval=100),
                           FusionConfig(), provider=ScriptedProvider(cfg),
                           seed=6, abort_path=path)
        batch, stats = ft.collect(1)
        batch["adv"] = np.full_like(batch["adv"], np.nan)
        ft.collect = lambda episodes: (batch, stats)
        with pytest.raises(FloatingPointError):
            ft.train(1)
        assert os.path.exists(path)

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = EnvConfig(horizon=15)
        pcfg = PPOConfig(episodes_per_iter=1, epochs=1, eval_interval=100)
        ft = FusionTrainer(cfg, pcfg, FusionConfig(),
                           provider=ScriptedProvider(cfg), seed=8)
        ft.train(1)
        path = str(tmp_path / "ck.npz")
        ft.save(path)
        other = FusionTrainer(cfg, pcfg, FusionConfig(),
                              provider=ScriptedProvider(cfg), seed=999)
        other.load(path)
        for a, b in zip(ft.ac.params() + ft.fusion.params(),
                        other.ac.params() + other.fusion.params()):
            assert np.array_equal(a.value, b.value)
        assert other.iteration == ft.iteration
        assert other.schedule.lam == ft.schedule.lam
        assert other.t == ft.t

    def test_evaluate_leaves_training_state_alone(self):
        cfg = EnvConfig(horizon=15)
        ft = FusionTrainer(cfg, PPOConfig(), FusionConfig(),
                           provider=ScriptedProvider(cfg), seed=9)
        ft.collect(1)
        t, lam, slot = ft.t, ft.schedule.lam, ft.env.slot
        ft.evaluate(2)
        assert (ft.t, ft.schedule.lam, ft.env.slot) == (t, lam, slot)

    def test_trunk_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            FusionTrainer(EnvConfig(horizon=10),
                          PPOConfig(),
                          FusionConfig(d_model=8),
                          provider=None)
