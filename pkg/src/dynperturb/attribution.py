"""Integrated-gradients attribution over final-position feed-forward activations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .tinylm import DTYPE, TinyLM, check_tokens

EPS_FLOOR = 1e-12


class NumericError(ArithmeticError):
    pass


@dataclass
class AttributionMap:
    attr: torch.Tensor  # (n_layers, d_ff), signed
    target: int
    steps: int
    baseline: str = "zero"

    def layer(self, l: int) -> torch.Tensor:
        return self.attr[l]


def path_integral(fn: Callable[[torch.Tensor], torch.Tensor], a: torch.Tensor, a_base: torch.Tensor,
                  steps: int) -> torch.Tensor:
    """Right-point Riemann IG of a batched scalar function ``fn`` (S, n) -> (S,)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alphas = torch.arange(1, steps + 1, dtype=DTYPE).unsqueeze(1) / steps
    pts = (a_base + alphas * (a - a_base)).detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(pts).sum(), pts)
    return (a - a_base) * grad.mean(dim=0)


def integrated_gradients(model: TinyLM, prompt: Sequence[int], target_token: int | None = None,
                         steps: int = 16) -> AttributionMap:
    """Joint IG over every layer's final-position FFN activations.

    All layers move together along the straight path from the zero baseline
    to the observed activations; ``F`` is the log-probability of
    ``target_token`` (default: the model's own argmax prediction).
    """
    cfg = model.config
    if steps < 1:
        raise ValueError("steps must be >= 1")
    idx = check_tokens(model, prompt)
    with torch.no_grad():
        logits, _, used = model.run(idx)
    if target_token is None:
        target_token = int(logits[0, -1].argmax())
    if not 0 <= target_token < cfg.vocab_size:
        raise ValueError("target_token out of range")
    a = torch.stack([u[0] for u in used]).reshape(-1)
    batch = idx.expand(steps, -1)
    L, d_ff = cfg.n_layers, cfg.d_ff

    def fn(pts):
        rows = pts.view(steps, L, d_ff)
        out, _, _ = model.run(batch, lambda l, last: rows[:, l, :])
        return out[:, -1].log_softmax(dim=-1)[:, target_token]

    attr = path_integral(fn, a, torch.zeros_like(a), steps).view(L, d_ff).detach()
    bad = ~torch.isfinite(attr)
    if bool(bad.any()):
        layer = int(torch.nonzero(bad)[0, 0])
        raise NumericError(f"non-finite attribution gradient in layer {layer}")
    return AttributionMap(attr, target_token, steps)


@torch.no_grad()
def target_logprob(model: TinyLM, prompt: Sequence[int], target_token: int, acts: torch.Tensor) -> float:
    """F evaluated with every layer's final-position activations overridden by ``acts``."""
    idx = check_tokens(model, prompt)
    out, _, _ = model.run(idx, lambda l, last: acts[l].unsqueeze(0))
    return float(out[0, -1].log_softmax(dim=-1)[target_token])


def normalize_attr(attr: torch.Tensor) -> torch.Tensor:
    """Per-layer |attr| / max |attr|; layers whose max is below the floor become zero."""
    if isinstance(attr, AttributionMap):
        attr = attr.attr
    mag = attr.abs()
    peak = mag.max(dim=-1, keepdim=True).values
    safe = torch.where(peak > EPS_FLOOR, peak, torch.ones_like(peak))
    return torch.where(peak > EPS_FLOOR, mag / safe, torch.zeros_like(mag))
