"""Learnable per-(category, layer) gating mask with L1 / L0-surrogate sparsity.

The reward term of the mask objective cannot be differentiated through the
model and judge, so it is optimized with a score-function estimator over
Bernoulli gate samples and an EMA reward baseline. The penalty terms have
closed-form gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import store


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class Block:
    layer: int
    start: int
    stop: int


@dataclass
class CategorySpec:
    categories: list[list[Block]]

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("need at least 2 categories")
        for cat in self.categories:
            if not cat:
                raise ValueError("empty category")
            for b in cat:
                if b.start < 0 or b.stop <= b.start:
                    raise ValueError(f"bad block {b}")

    def __len__(self):
        return len(self.categories)

    def validate(self, n_layers: int, d_ff: int) -> None:
        for cat in self.categories:
            for b in cat:
                if not 0 <= b.layer < n_layers or b.stop > d_ff:
                    raise ValueError(f"block {b} out of range for {n_layers} layers x {d_ff} neurons")

    def layers(self, k: int) -> list[int]:
        return sorted({b.layer for b in self.categories[k]})

    def indices(self, k: int, layer: int) -> np.ndarray:
        idx = [np.arange(b.start, b.stop) for b in self.categories[k] if b.layer == layer]
        return np.unique(np.concatenate(idx))

    @classmethod
    def halves(cls, n_layers: int, d_ff: int) -> "CategorySpec":
        half = d_ff // 2
        return cls([[Block(l, lo, hi)] for l in range(n_layers) for lo, hi in ((0, half), (half, d_ff))])

    def to_list(self) -> list:
        return [[[b.layer, b.start, b.stop] for b in cat] for cat in self.categories]

    @classmethod
    def from_list(cls, raw) -> "CategorySpec":
        return cls([[Block(*map(int, b)) for b in cat] for cat in raw])


@dataclass
class MaskParams:
    spec: CategorySpec
    theta: dict[tuple[int, int], np.ndarray]
    tau_gate: float = 1.0
    lambda_sparse: float = 1e-3
    lambda_l0: float = 1e-3
    eps_th: float = 0.5
    baseline: float | None = None
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.tau_gate <= 0:
            raise ValueError("tau_gate must be > 0")
        if not 0 < self.eps_th < 1:
            raise ValueError("eps_th must lie in (0, 1)")
        if self.lambda_sparse < 0 or self.lambda_l0 < 0:
            raise ValueError("penalties must be >= 0")

    @classmethod
    def init(cls, spec: CategorySpec, value: float = 0.0, **kw) -> "MaskParams":
        theta = {}
        for k in range(len(spec)):
            for l in spec.layers(k):
                theta[(k, l)] = np.full(len(spec.indices(k, l)), value, dtype=np.float64)
        return cls(spec, theta, **kw)

    def strengths(self, k: int) -> dict[int, np.ndarray]:
        return {l: mask_strength(self.theta[(k, l)], self.tau_gate) for l in self.spec.layers(k)}

    def l1(self) -> float:
        return float(sum(mask_strength(t, self.tau_gate).sum() for t in self.theta.values()))

    def copy(self) -> "MaskParams":
        return MaskParams(self.spec, {k: v.copy() for k, v in self.theta.items()}, self.tau_gate,
                          self.lambda_sparse, self.lambda_l0, self.eps_th, self.baseline, self.ema_decay)


def mask_strength(theta, tau_gate: float) -> np.ndarray:
    if tau_gate <= 0:
        raise ValueError("tau_gate must be > 0")
    return sigmoid(np.asarray(theta, dtype=np.float64) / tau_gate)


def operational_mask(strength: np.ndarray, attr_norm: np.ndarray) -> np.ndarray:
    strength = np.asarray(strength, dtype=np.float64)
    attr_norm = np.asarray(attr_norm, dtype=np.float64)
    if strength.shape != attr_norm.shape:
        raise ValueError(f"shape mismatch: {strength.shape} vs {attr_norm.shape}")
    return strength * attr_norm


def sample_gates(strength: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Bernoulli gates and their total log-probability."""
    m = np.asarray(strength, dtype=np.float64)
    b = (rng.random(m.shape) < m).astype(np.float64)
    with np.errstate(divide="ignore"):
        logp = np.where(b > 0, np.log(m), np.log1p(-m))
    return b, float(logp.sum())


def l0_surrogate(theta: np.ndarray, tau_gate: float, eps_th: float) -> float:
    return float(sigmoid(np.asarray(theta) / tau_gate - logit(eps_th)).sum())


@dataclass
class MaskLoss:
    total: float
    reward_term: float
    l1_term: float
    l0_term: float


def mask_loss(total_reward: float, params: MaskParams) -> MaskLoss:
    l1 = sum(float(mask_strength(t, params.tau_gate).sum()) for t in params.theta.values())
    l0 = sum(l0_surrogate(t, params.tau_gate, params.eps_th) for t in params.theta.values())
    l1_term = params.lambda_sparse * l1
    l0_term = params.lambda_l0 * l0
    return MaskLoss(-total_reward + l1_term + l0_term, -total_reward, l1_term, l0_term)


def penalty_grad(theta: np.ndarray, params: MaskParams) -> np.ndarray:
    """Gradient of the L1 and L0-surrogate penalty terms with respect to theta."""
    tau = params.tau_gate
    m = mask_strength(theta, tau)
    q = sigmoid(theta / tau - logit(params.eps_th))
    return params.lambda_sparse * m * (1 - m) / tau + params.lambda_l0 * q * (1 - q) / tau


@dataclass
class GateRecord:
    """One sampled gate vector for category ``k``, keyed by layer."""

    k: int
    gates: dict[int, np.ndarray]


def update_mask(params: MaskParams, records: list[GateRecord], total_reward: float, lr: float) -> MaskParams:
    """One REINFORCE + penalty SGD step on the categories sampled this episode.

    The EMA reward baseline is updated afterwards (first episode seeds it).
    """
    if not records:
        raise ValueError("update_mask needs at least one gate record")
    baseline = total_reward if params.baseline is None else params.baseline
    adv = total_reward - baseline
    tau = params.tau_gate
    grads: dict[tuple[int, int], np.ndarray] = {}
    for rec in records:
        for l, b in rec.gates.items():
            key = (rec.k, l)
            m = mask_strength(params.theta[key], tau)
            g = grads.setdefault(key, np.zeros_like(m))
            g -= adv * (b - m) / tau
    out = params.copy()
    for key, g in grads.items():
        out.theta[key] = params.theta[key] - lr * (g + penalty_grad(params.theta[key], params))
    out.baseline = baseline if params.baseline is None else (
        params.ema_decay * params.baseline + (1 - params.ema_decay) * total_reward)
    return out


def save_mask(params: MaskParams, path) -> None:
    arrays = {f"theta/{k}/{l}": v for (k, l), v in params.theta.items()}
    meta = {"spec": params.spec.to_list(), "tau_gate": params.tau_gate, "lambda_sparse": params.lambda_sparse,
            "lambda_l0": params.lambda_l0, "eps_th": params.eps_th, "baseline": params.baseline,
            "ema_decay": params.ema_decay}
    store.save_arrays(path, "mask", arrays, meta)


def load_mask(path) -> MaskParams:
    arrays, meta = store.load_arrays(path, kind="mask")
    theta = {}
    for name, v in arrays.items():
        _, k, l = name.split("/")
        theta[(int(k), int(l))] = v
    spec = CategorySpec.from_list(meta.pop("spec"))
    return MaskParams(spec, theta, **meta)
