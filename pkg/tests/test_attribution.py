import pytest
import torch
from hypothesis import given, strategies as st

from dynperturb.attribution import (NumericError, integrated_gradients, normalize_attr, path_integral,
                                    target_logprob)
from dynperturb.taskgen import prompt_for
from dynperturb.tinylm import DTYPE, forward


def test_linear_oracle_exact():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(12, generator=g, dtype=DTYPE)
    a = torch.randn(12, generator=g, dtype=DTYPE)
    base = torch.randn(12, generator=g, dtype=DTYPE)
    attr = path_integral(lambda p: p @ w + 3.0, a, base, steps=7)
    assert torch.allclose(attr, (a - base) * w, atol=1e-9, rtol=0)


def test_quadratic_right_riemann_value():
    # F(x) = x^2 on [0, 1] with S steps: right sum of 2x gives (S + 1) / S
    a, base = torch.tensor([1.0], dtype=DTYPE), torch.zeros(1, dtype=DTYPE)
    for s in (1, 2, 4, 10):
        attr = path_integral(lambda p: (p ** 2).sum(-1), a, base, steps=s)
        assert float(attr) == pytest.approx((s + 1) / s, abs=1e-12)


@given(st.integers(1, 6))
def test_quadratic_error_shrinks(k):
    a, base = torch.tensor([1.0, -2.0], dtype=DTYPE), torch.zeros(2, dtype=DTYPE)
    fn = lambda p: (p ** 2).sum(-1)
    err = lambda s: abs(float(path_integral(fn, a, base, s).sum()) - 5.0)
    assert err(2 * k) < err(k)


def _completeness(model, prompt, steps):
    amap = integrated_gradients(model, prompt, steps=steps)
    _, trace = forward(model, prompt)
    f_a = target_logprob(model, prompt, amap.target, trace.acts)
    f_0 = target_logprob(model, prompt, amap.target, torch.zeros_like(trace.acts))
    return float(amap.attr.sum()), f_a - f_0


def test_completeness_on_toy_model(toy_world):
    world, res, _ = toy_world
    for s, r in world.pairs()[:4]:
        total, delta = _completeness(res.model, prompt_for(s, r), 64)
        assert abs(total - delta) <= 0.05 * abs(delta) + 1e-9


def test_target_defaults_to_argmax(toy_world):
    world, res, _ = toy_world
    p = prompt_for(*world.pairs()[0])
    logits, _ = forward(res.model, p)
    assert integrated_gradients(res.model, p, steps=4).target == int(logits.argmax())


def test_shape_and_errors(small_model):
    amap = integrated_gradients(small_model, [1, 2, 3], steps=3)
    cfg = small_model.config
    assert amap.attr.shape == (cfg.n_layers, cfg.d_ff)
    with pytest.raises(ValueError):
        integrated_gradients(small_model, [1, 2], steps=0)
    with pytest.raises(ValueError):
        integrated_gradients(small_model, [1, 2], target_token=cfg.vocab_size)


def test_non_finite_raises(small_model):
    with torch.no_grad():
        small_model.blocks[0].ff_in.weight[0, 0] = float("nan")
    with pytest.raises(NumericError, match="layer 0"):
        integrated_gradients(small_model, [1, 2, 3], steps=2)


def test_normalize_examples():
    attr = torch.tensor([[0.5, -2.0, 1.0], [0.0, 0.0, 0.0]], dtype=DTYPE)
    out = normalize_attr(attr)
    assert out.tolist() == [[0.25, 1.0, 0.5], [0.0, 0.0, 0.0]]


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
def test_normalize_range(vals):
    out = normalize_attr(torch.tensor([vals], dtype=DTYPE))
    assert bool(((out >= 0) & (out <= 1)).all())
    if max(abs(v) for v in vals) > 1e-12:
        assert float(out.max()) == pytest.approx(1.0)
