import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from oracles import gae_direct

from dynperturb.env import EpisodeConfig, PlantedEnv
from dynperturb.hppo import (Batch, HierarchicalAgent, PPOConfig, UpdateError, categorical_entropy,
                             collect_rollouts, compute_gae, normalize_advantages, ppo_loss, ppo_update, surrogate)
from dynperturb.tinylm import DTYPE


def test_uniform_at_init():
    agent = HierarchicalAgent(9, 4, 4, seed=0)
    ph, low = agent.policy_probs(np.random.default_rng(0).normal(size=9))
    assert np.allclose(ph, 0.25, atol=0, rtol=0)
    for pt, pm in low:
        assert np.allclose(pt, 1 / 3) and np.allclose(pm, 0.25)


def test_gae_examples():
    adv, ret = compute_gae([1.0], [0.5, 2.0], [False], 0.9, 0.95)
    assert adv[0] == pytest.approx(1.0 + 0.9 * 2.0 - 0.5)
    adv, _ = compute_gae([1.0], [0.5, 2.0], [True], 0.9, 0.95)
    assert adv[0] == pytest.approx(0.5)
    adv, ret = compute_gae([1.0, 1.0], [0.0, 0.0, 0.0], [False, True], 1.0, 1.0)
    assert adv.tolist() == [2.0, 1.0] and ret.tolist() == [2.0, 1.0]
    with pytest.raises(ValueError):
        compute_gae([1.0], [0.0], [False], 0.9, 0.9)


@given(st.integers(1, 32), st.sampled_from([0.0, 0.9, 1.0]), st.sampled_from([0.0, 0.95, 1.0]),
       st.integers(0, 2**31))
def test_gae_matches_direct_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T + 1)
    d = rng.random(T) < 0.2
    adv, ret = compute_gae(r, v, d, gamma, lam)
    assert np.max(np.abs(adv - gae_direct(r, v, d, gamma, lam))) < 1e-10
    assert np.allclose(ret, adv + v[:-1])


def test_normalize():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0]))
    assert out.mean() == pytest.approx(0.0) and out.std() == pytest.approx(1.0, rel=1e-6)


@given(st.integers(2, 12))
def test_uniform_entropy(n):
    assert float(categorical_entropy(torch.zeros(n, dtype=DTYPE))) == pytest.approx(math.log(n))


def test_surrogate_identity_and_plateau():
    adv = torch.tensor([1.0, -1.0], dtype=DTYPE)
    assert torch.equal(surrogate(torch.ones(2, dtype=DTYPE), adv, 0.2), adv)
    r = torch.tensor([1.5, 1.5], dtype=DTYPE, requires_grad=True)
    s = surrogate(r, torch.tensor([1.0, 1.0], dtype=DTYPE), 0.2)
    assert s.tolist() == pytest.approx([1.2, 1.2])
    s.sum().backward()
    assert r.grad.tolist() == [0.0, 0.0]
    r = torch.tensor([0.5], dtype=DTYPE, requires_grad=True)
    s = surrogate(r, torch.tensor([-1.0], dtype=DTYPE), 0.2)
    assert float(s.detach()) == pytest.approx(-0.8)
    s.sum().backward()
    assert r.grad.tolist() == [0.0]


def _batch(agent, level, n=24, seed=0):
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    states = torch.randn(n, agent.state_dim, generator=g, dtype=DTYPE)
    a_h = torch.as_tensor(rng.integers(0, agent.n_h, n))
    a_t = torch.as_tensor(rng.integers(0, 3, n))
    a_m = torch.as_tensor(rng.integers(0, agent.n_m, n))
    with torch.no_grad():
        if level == "high":
            cur = agent.high(states)[0].log_softmax(-1).gather(-1, a_h[:, None]).squeeze(-1)
        else:
            lt, lm, _ = agent.low(states, a_h)
            cur = (lt.log_softmax(-1).gather(-1, a_t[:, None]) + lm.log_softmax(-1).gather(-1, a_m[:, None])).squeeze(-1)
    old = cur + torch.randn(n, generator=g, dtype=DTYPE) * 0.1  # ratios straddle the clip range
    return Batch(states, a_h, a_t, a_m, old, torch.randn(n, generator=g, dtype=DTYPE),
                 torch.randn(n, generator=g, dtype=DTYPE))


def _perturbed_agent(seed=0):
    agent = HierarchicalAgent(6, 3, 4, PPOConfig(hidden=8, embed_dim=3), seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in list(agent.high.parameters()) + list(agent.low.parameters()):
            p.add_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 0.3)
    return agent


@pytest.mark.parametrize("level", ["high", "low"])
def test_ppo_loss_fd(level):
    agent = _perturbed_agent()
    net = agent.high if level == "high" else agent.low
    batch = _batch(agent, level)
    cfg = PPOConfig(entropy_coef=0.05)
    loss, _ = ppo_loss(net, batch, cfg, level)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    eps = 1e-6
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        flat = p.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(ppo_loss(net, batch, cfg, level)[0].detach())
            flat[i] = orig - eps
            dn = float(ppo_loss(net, batch, cfg, level)[0].detach())
            flat[i] = orig
            fd[i] = (up - dn) / (2 * eps)
        err = float((g.view(-1) - fd).norm() / max(float(fd.norm()), 1e-8))
        worst = max(worst, err)
    assert worst < 1e-4


def test_loss_parts_and_bad_level():
    agent = _perturbed_agent()
    batch = _batch(agent, "low")
    total, parts = ppo_loss(agent.low, batch, PPOConfig(), "low")
    cfg = PPOConfig()
    with torch.no_grad():
        expect = parts["policy"] + cfg.value_coef * parts["value"] - cfg.entropy_coef * parts["entropy"]
    assert float(total.detach()) == pytest.approx(float(expect))
    assert len(parts["head_entropies"]) == 2
    with pytest.raises(ValueError):
        ppo_loss(agent.low, batch, cfg, "mid")


def test_nan_update_restores():
    agent = _perturbed_agent()
    batch = _batch(agent, "high")
    batch.adv[0] = float("nan")
    before = {k: v.clone() for k, v in agent.high.state_dict().items()}
    with pytest.raises(UpdateError):
        ppo_update(agent.high, agent.opt_high, batch, agent.cfg, "high", np.random.default_rng(0))
    assert all(torch.equal(before[k], v) for k, v in agent.high.state_dict().items())


def _planted_factory(seed, t_max=8):
    return lambda ep: PlantedEnv(seed, cfg=EpisodeConfig(t_max=t_max, stop_h=-1.0), episode_seed=ep)


def test_random_policy_reward_matches_analytic():
    env = PlantedEnv(3)
    table = env.reward_table()
    base = np.array(list(table.values()))
    expected = base.mean() + env.weights.beta_exp * np.mean(base == 0)
    agent = HierarchicalAgent(env.state_dim, env.n_h, env.n_m, seed=0)
    ro = collect_rollouts(_planted_factory(3, t_max=1), agent, 3000, random_actions=True)
    r = np.array([t.reward for t in ro.transitions])
    assert abs(r.mean() - expected) < 3 * r.std(ddof=1) / math.sqrt(len(r))
    ro = collect_rollouts(_planted_factory(3, t_max=1), agent, 3000)
    r = np.array([t.reward for t in ro.transitions])
    assert abs(r.mean() - expected) < 3 * r.std(ddof=1) / math.sqrt(len(r))


def test_rollout_truncation_bootstraps():
    agent = HierarchicalAgent(23, 4, 4, seed=1)
    ro = collect_rollouts(_planted_factory(0, t_max=8), agent, 12)
    assert len(ro.transitions) == 12 and len(ro.episodes) == 2 and ro.next_episode == 2
    assert ro.episodes[0].finished and not ro.episodes[1].finished
    assert (ro.bootstrap_h, ro.bootstrap_l) == agent.bootstrap(ro.transitions[-1].next_state)
    ro = collect_rollouts(_planted_factory(0, t_max=4), agent, 8)
    assert (ro.bootstrap_h, ro.bootstrap_l) == (0.0, 0.0)
    with pytest.raises(ValueError):
        collect_rollouts(_planted_factory(0), agent, 0)


def test_alternating_schedule():
    agent = HierarchicalAgent(23, 4, 4, PPOConfig(schedule="alternating", horizon=32), seed=0)
    ro = collect_rollouts(_planted_factory(0), agent, 32)
    assert set(agent.update(ro)) == {"high"}
    assert set(agent.update(ro)) == {"low"}


def test_checkpoint_roundtrip(tmp_path):
    cfg = PPOConfig(horizon=32, minibatch=16, epochs=2)
    a = HierarchicalAgent(23, 4, 4, cfg, seed=2)
    ep = 0
    for _ in range(2):
        ro = collect_rollouts(_planted_factory(1), a, cfg.horizon, ep)
        a.update(ro)
        ep = ro.next_episode
    a.save(tmp_path / "a.ckpt")
    b = HierarchicalAgent.load(tmp_path / "a.ckpt")
    for _ in range(3):
        ra = collect_rollouts(_planted_factory(1), a, cfg.horizon, ep)
        rb = collect_rollouts(_planted_factory(1), b, cfg.horizon, ep)
        assert [t.reward for t in ra.transitions] == [t.reward for t in rb.transitions]
        a.update(ra)
        b.update(rb)
        ep = ra.next_episode
    for k, v in a.high.state_dict().items():
        assert torch.equal(v, b.high.state_dict()[k])
    for k, v in a.low.state_dict().items():
        assert torch.equal(v, b.low.state_dict()[k])
    b.save(tmp_path / "b.ckpt")
    a.save(tmp_path / "a2.ckpt")
    assert (tmp_path / "a2.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_deterministic_act_is_argmax():
    agent = _perturbed_agent()
    s = np.random.default_rng(0).normal(size=6)
    act = agent.act(s, deterministic=True)[0]
    ph, low = agent.policy_probs(s)
    assert act.a_h == int(np.argmax(ph))
    assert (act.a_type, act.a_mag) == (int(np.argmax(low[act.a_h][0])), int(np.argmax(low[act.a_h][1])))


def test_nonfinite_logits_raise():
    agent = _perturbed_agent()
    with pytest.raises(FloatingPointError):
        agent.act(np.full(6, np.nan))
