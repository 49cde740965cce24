import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynperturb.adamask import (Block, CategorySpec, GateRecord, MaskParams, l0_surrogate, load_mask, logit,
                                mask_loss, mask_strength, operational_mask, penalty_grad, sample_gates, save_mask,
                                sigmoid, update_mask)

SPEC = CategorySpec.halves(2, 8)


def test_strength_examples():
    assert mask_strength([0.0], 1.0).tolist() == [0.5]
    assert mask_strength([2.0], 2.0)[0] == pytest.approx(1 / (1 + np.exp(-1)))
    with pytest.raises(ValueError):
        mask_strength([0.0], 0.0)


def test_operational_examples():
    assert operational_mask([0.5, 1.0], [1.0, 0.25]).tolist() == [0.5, 0.25]
    assert operational_mask([1.0, 1.0], [0.0, 0.0]).tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        operational_mask([1.0], [1.0, 0.0])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.floats(0.1, 5))
def test_operational_bounded(theta, tau):
    m = mask_strength(theta, tau)
    attr = np.linspace(0, 1, len(theta))
    op = operational_mask(m, attr)
    assert np.all(op >= 0) and np.all(op <= attr + 1e-15)


def test_spec():
    assert len(SPEC) == 4
    assert SPEC.layers(3) == [1] and SPEC.indices(3, 1).tolist() == [4, 5, 6, 7]
    assert CategorySpec.from_list(SPEC.to_list()).to_list() == SPEC.to_list()
    with pytest.raises(ValueError):
        CategorySpec([[Block(0, 0, 4)]])
    with pytest.raises(ValueError):
        SPEC.validate(1, 8)
    mixed = CategorySpec([[Block(0, 0, 2), Block(1, 6, 8)], [Block(0, 2, 8)]])
    assert mixed.layers(0) == [0, 1]


def _penalty(theta, p):
    return p.lambda_sparse * mask_strength(theta, p.tau_gate).sum() + p.lambda_l0 * l0_surrogate(
        theta, p.tau_gate, p.eps_th)


@pytest.mark.parametrize("tau,eps", [(1.0, 0.5), (0.5, 0.2), (2.0, 0.9)])
def test_penalty_grad_fd(tau, eps):
    p = MaskParams.init(SPEC, tau_gate=tau, eps_th=eps, lambda_sparse=1e-2, lambda_l0=3e-2)
    theta = np.random.default_rng(0).normal(0, 2, 6)
    g = penalty_grad(theta, p)
    h = 1e-6
    fd = np.array([(_penalty(theta + h * e, p) - _penalty(theta - h * e, p)) / (2 * h) for e in np.eye(6)])
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-5


def test_l0_surrogate_tracks_open_gates():
    # threshold crossing: strength above eps_th counts towards ~1 once sharp
    theta = np.array([-40.0, 40.0, 40.0])
    assert l0_surrogate(theta, 1.0, 0.5) == pytest.approx(2.0, abs=1e-9)
    assert l0_surrogate(np.array([logit(0.3)]), 1.0, 0.3) == pytest.approx(0.5)


def test_l0_surrogate_monotone_in_theta():
    xs = np.linspace(-5, 5, 50)
    vals = [l0_surrogate(np.array([x]), 1.0, 0.5) for x in xs]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_sample_gates_distribution():
    rng = np.random.default_rng(0)
    m = np.array([0.0, 0.2, 0.7, 1.0])
    draws = np.array([sample_gates(m, rng)[0] for _ in range(4000)])
    assert np.allclose(draws.mean(0), m, atol=0.03)
    b, logp = sample_gates(np.array([0.25]), np.random.default_rng(1))
    assert logp == pytest.approx(np.log(0.25) if b[0] else np.log(0.75))


def test_mask_loss_parts():
    p = MaskParams.init(SPEC, 0.0, lambda_sparse=0.1, lambda_l0=0.2)
    loss = mask_loss(2.0, p)
    assert loss.reward_term == -2.0
    assert loss.l1_term == pytest.approx(0.1 * 16 * 0.5)
    assert loss.l0_term == pytest.approx(0.2 * 16 * 0.5)
    assert loss.total == pytest.approx(loss.reward_term + loss.l1_term + loss.l0_term)


def test_update_reinforce_direction():
    p = MaskParams.init(SPEC, 0.0, lambda_sparse=0.0, lambda_l0=0.0)
    p = update_mask(p, [GateRecord(0, {0: np.ones(4)})], 0.0, lr=0.1)  # seeds the baseline
    assert p.baseline == 0.0
    gates = np.array([1.0, 0.0, 1.0, 0.0])
    q = update_mask(p, [GateRecord(0, {0: gates})], 1.0, lr=0.1)
    d = q.theta[(0, 0)] - p.theta[(0, 0)]
    assert np.allclose(d, 0.1 * (gates - 0.5))
    assert np.array_equal(q.theta[(1, 0)], p.theta[(1, 0)])
    assert q.baseline == pytest.approx(0.1)
    with pytest.raises(ValueError):
        update_mask(p, [], 1.0, 0.1)


def test_update_does_not_mutate():
    p = MaskParams.init(SPEC, 0.5)
    before = {k: v.copy() for k, v in p.theta.items()}
    update_mask(p, [GateRecord(2, {1: np.ones(4)})], 3.0, 0.5)
    assert all(np.array_equal(before[k], p.theta[k]) for k in before)


@given(st.integers(0, 2**31))
def test_sparsity_pressure_at_zero_advantage(seed):
    rng = np.random.default_rng(seed)
    p = MaskParams.init(SPEC, float(rng.normal()), lambda_sparse=1e-2, lambda_l0=0.0)
    prev = p.l1()
    for _ in range(20):
        recs = [GateRecord(k, {l: sample_gates(m, rng)[0] for l, m in p.strengths(k).items()}) for k in range(4)]
        p = update_mask(p, recs, 0.7, lr=0.5)
        assert p.l1() < prev
        prev = p.l1()


def test_validation():
    with pytest.raises(ValueError):
        MaskParams.init(SPEC, tau_gate=0.0)
    with pytest.raises(ValueError):
        MaskParams.init(SPEC, eps_th=1.0)
    with pytest.raises(ValueError):
        MaskParams.init(SPEC, lambda_sparse=-1.0)


def test_save_load(tmp_path):
    p = MaskParams.init(SPEC, 0.3, baseline=1.25)
    p.theta[(1, 0)][2] = -4.0
    save_mask(p, tmp_path / "m.ckpt")
    q = load_mask(tmp_path / "m.ckpt")
    assert q.spec.to_list() == p.spec.to_list() and q.baseline == 1.25
    assert all(np.array_equal(p.theta[k], q.theta[k]) for k in p.theta)
    save_mask(q, tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_sigmoid_stable():
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))
