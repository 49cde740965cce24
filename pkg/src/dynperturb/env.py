"""Perturbation environment: state, hierarchical actions, reward and episodes.

Two backends share one interface (``reset() -> state``,
``step(action) -> (state, reward, done, info)``):

* :class:`PerturbEnv` drives the tiny transformer on one bad case.
* :class:`PlantedEnv` is an analytic stand-in whose optimal action is known,
  used to verify that the agent can find it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from . import adamask
from .adamask import CategorySpec, GateRecord, MaskParams
from .attribution import integrated_gradients, normalize_attr
from .judge import JudgeConfig, Scores, judge_output
from .taskgen import BadCase
from .tinylm import DTYPE, PERTURB_TYPES, ActivationTrace, Intervention, TinyLM, embed_input, forward, generate_greedy

N_TYPES = len(PERTURB_TYPES)


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    w_h: float = 1.0
    w_r: float = 0.3
    w_f: float = 0.3
    beta_exp: float = 0.05

    def __post_init__(self):
        if min(self.w_h, self.w_r, self.w_f, self.beta_exp) < 0:
            raise ValueError("reward weights must be >= 0")
        if self.w_h == self.w_r == self.w_f == 0:
            raise ValueError("reward weights cannot all be zero")


@dataclass(frozen=True)
class EpisodeConfig:
    t_max: int = 8
    stop_h: float = 0.0
    magnitudes: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    max_new_tokens: int = 1

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        m = self.magnitudes
        if not m or any(x <= 0 for x in m) or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError("magnitudes must be positive and strictly increasing")


@dataclass(frozen=True)
class HierAction:
    a_h: int
    a_type: int
    a_mag: int

    @property
    def type_name(self) -> str:
        return PERTURB_TYPES[self.a_type]

    def check(self, n_h: int, n_m: int) -> None:
        if not (0 <= self.a_h < n_h and 0 <= self.a_type < N_TYPES and 0 <= self.a_mag < n_m):
            raise ValueError(f"action {self} out of range")


def all_actions(n_h: int, n_m: int) -> list[HierAction]:
    return [HierAction(k, t, m) for k in range(n_h) for t in range(N_TYPES) for m in range(n_m)]


@dataclass
class EnvState:
    emb: np.ndarray
    baseline: Scores
    best: Scores
    steps_norm: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.emb, self.baseline.as_tuple(), self.best.as_tuple(), [self.steps_norm]])


def compute_reward(baseline: Scores, current: Scores, best: Scores, tried: set, pair: tuple[int, int],
                   weights: RewardWeights) -> tuple[float, float]:
    """Weighted score deltas plus the exploration bonus.

    The bonus fires for a (category, type) pair not yet tried this episode
    whose hallucination score fails to beat the best one so far.
    """
    dh = baseline.h - current.h
    dr = current.r - baseline.r
    df = current.f - baseline.f
    bonus = weights.beta_exp if (pair not in tried and current.h >= best.h) else 0.0
    return weights.w_h * dh + weights.w_r * dr + weights.w_f * df + bonus, bonus


def step_seed(episode_seed: int, t: int) -> int:
    return int(np.random.SeedSequence([int(episode_seed) & 0xFFFFFFFF, t]).generate_state(1)[0])


# -- mask strategies ---------------------------------------------------------


class MaskStrategy(Protocol):
    def op_mask(self, k: int, attr_norm: torch.Tensor, spec: CategorySpec,
                rng: np.random.Generator) -> tuple[dict[int, np.ndarray], GateRecord | None]: ...


@dataclass
class LearnedMask:
    """Gate strengths times normalized attribution; optionally sampled gates for training."""

    params: MaskParams
    sample: bool = False

    def op_mask(self, k, attr_norm, spec, rng):
        out, gates = {}, {}
        for l, m in self.params.strengths(k).items():
            idx = spec.indices(k, l)
            if self.sample:
                b, _ = adamask.sample_gates(m, rng)
                gates[l] = b
                m = b
            out[l] = adamask.operational_mask(m, attr_norm[l, idx].numpy())
        return out, (GateRecord(k, gates) if self.sample else None)


@dataclass
class RandomMask:
    """Uniform-random strengths each step; attribution is ignored."""

    def op_mask(self, k, attr_norm, spec, rng):
        return {l: rng.random(len(spec.indices(k, l))) for l in spec.layers(k)}, None


@dataclass
class ScaledMask:
    """Wraps another strategy and multiplies its output (0 gives the identity intervention)."""

    inner: MaskStrategy
    factor: float = 0.0

    def op_mask(self, k, attr_norm, spec, rng):
        out, rec = self.inner.op_mask(k, attr_norm, spec, rng)
        return {l: v * self.factor for l, v in out.items()}, rec


@dataclass
class TopNMask:
    """Keeps only the ``n`` strongest operational-mask entries across the category."""

    inner: MaskStrategy
    n: int

    def op_mask(self, k, attr_norm, spec, rng):
        out, rec = self.inner.op_mask(k, attr_norm, spec, rng)
        layers = sorted(out)
        flat = np.concatenate([out[l] for l in layers])
        keep = np.zeros_like(flat)
        if self.n > 0:
            order = np.argsort(-flat, kind="stable")[: self.n]
            keep[order] = flat[order]
        res, start = {}, 0
        for l in layers:
            res[l] = keep[start:start + len(out[l])]
            start += len(out[l])
        return res, rec


def apply_perturbation(trace: ActivationTrace, spec: CategorySpec, k: int, kind: str, magnitude: float,
                       m_op: dict[int, np.ndarray], rng_seed: int, d_ff: int) -> Intervention:
    if kind not in PERTURB_TYPES:
        raise ValueError(f"unknown perturbation type {kind!r}")
    if magnitude <= 0:
        raise ValueError("magnitude must be > 0")
    strengths = {}
    for l in spec.layers(k):
        vec = torch.zeros(d_ff, dtype=DTYPE)
        vec[torch.from_numpy(spec.indices(k, l))] = torch.from_numpy(np.asarray(m_op[l], dtype=np.float64))
        strengths[l] = vec
    return Intervention(strengths, kind, float(magnitude), rng_seed=rng_seed, sigma=trace.sigma)


# -- tinylm backend ----------------------------------------------------------


@dataclass
class CaseContext:
    """Per-case quantities that do not depend on the action: cached across episodes."""

    case: BadCase
    emb: np.ndarray
    trace: ActivationTrace
    attr_norm: torch.Tensor
    output: list[int]
    scores: Scores


def prepare_case(model: TinyLM, case: BadCase, judge_cfg: JudgeConfig, ig_steps: int = 16,
                 max_new_tokens: int = 1) -> CaseContext:
    _, trace = forward(model, case.prompt)
    out = generate_greedy(model, case.prompt, max_new_tokens)[len(case.prompt):]
    scores = judge_output(case, out, model, judge_cfg)
    attr = integrated_gradients(model, case.prompt, None, ig_steps)
    emb = embed_input(model, case.prompt).numpy().copy()
    return CaseContext(case, emb, trace, normalize_attr(attr.attr), out, scores)


class PerturbEnv:
    def __init__(self, model: TinyLM, ctx: CaseContext, spec: CategorySpec, mask: MaskStrategy,
                 judge_cfg: JudgeConfig, weights: RewardWeights | None = None,
                 episode: EpisodeConfig | None = None, episode_seed: int = 0):
        self.model = model
        self.ctx = ctx
        self.spec = spec
        self.mask = mask
        self.judge_cfg = judge_cfg
        self.weights = weights or RewardWeights()
        self.cfg = episode or EpisodeConfig()
        self.episode_seed = episode_seed
        spec.validate(model.config.n_layers, model.config.d_ff)
        self.n_h = len(spec)
        self.n_m = len(self.cfg.magnitudes)
        self.state_dim = model.config.d_model + 7
        self.done = True

    def reset(self) -> np.ndarray:
        self.t = 0
        self.tried: set[tuple[int, int]] = set()
        self.best = self.ctx.scores
        self.done = False
        self.rng = np.random.default_rng([self.episode_seed & 0xFFFFFFFF, 7])
        self.state = EnvState(self.ctx.emb, self.ctx.scores, self.best, 0.0)
        return self.state.vector()

    def intervention_for(self, action: HierAction, rng_seed: int):
        m_op, rec = self.mask.op_mask(action.a_h, self.ctx.attr_norm, self.spec, self.rng)
        iv = apply_perturbation(self.ctx.trace, self.spec, action.a_h, action.type_name,
                                self.cfg.magnitudes[action.a_mag], m_op, rng_seed, self.model.config.d_ff)
        return iv, rec

    def step(self, action: HierAction):
        if self.done:
            raise StateError("step() called on a finished episode; call reset() first")
        action.check(self.n_h, self.n_m)
        case = self.ctx.case
        iv, rec = self.intervention_for(action, step_seed(self.episode_seed, self.t))
        out = generate_greedy(self.model, case.prompt, self.cfg.max_new_tokens, iv)[len(case.prompt):]
        scores = judge_output(case, out, self.model, self.judge_cfg)
        pair = (action.a_h, action.a_type)
        reward, bonus = compute_reward(self.ctx.scores, scores, self.best, self.tried, pair, self.weights)
        info = {"output": out, "scores": scores, "bonus": bonus, "best_before": self.best,
                "gates": rec, "tried_before": frozenset(self.tried), "intervention": iv}
        self.tried.add(pair)
        self.best = self.best.best_with(scores)
        self.t += 1
        self.done = self.t >= self.cfg.t_max or scores.h <= self.cfg.stop_h
        self.state = EnvState(self.ctx.emb, self.ctx.scores, self.best, self.t / self.cfg.t_max)
        return self.state.vector(), reward, self.done, info


# -- planted backend ---------------------------------------------------------


@dataclass
class PlantedEnv:
    """Analytic environment with a known optimum ``(k*, t*, m*)``.

    The base reward of an action is ``f(mag)`` when its (category, type)
    matches the planted pair and 0 otherwise, with ``f`` peaking at 1 on
    ``m*``. Scores are synthesized so that the usual reward formula yields
    exactly that base reward plus the exploration bonus.
    """

    seed: int
    n_h: int = 4
    n_m: int = 4
    emb_dim: int = 16
    weights: RewardWeights = field(default_factory=RewardWeights)
    cfg: EpisodeConfig = field(default_factory=EpisodeConfig)
    episode_seed: int = 0

    def __post_init__(self):
        if self.weights.w_h < 1.0:
            raise ValueError("planted backend needs w_h >= 1 to express a unit reward through score_h")
        if len(self.cfg.magnitudes) != self.n_m:
            self.cfg = EpisodeConfig(self.cfg.t_max, self.cfg.stop_h,
                                     tuple(float(2.0 ** (i - 2)) for i in range(self.n_m)), self.cfg.max_new_tokens)
        rng = np.random.default_rng([self.seed, 1234])
        self.k_star = int(rng.integers(self.n_h))
        self.t_star = int(rng.integers(N_TYPES))
        self.m_star = int(rng.integers(self.n_m))
        self.emb = rng.standard_normal(self.emb_dim)
        self.baseline = Scores(1.0, 1.0, 0.5)
        self.state_dim = self.emb_dim + 7
        self.done = True

    def magnitude_factor(self, j: int) -> float:
        return 1.0 / (1.0 + abs(j - self.m_star))

    def base_reward(self, a: HierAction) -> float:
        if (a.a_h, a.a_type) != (self.k_star, self.t_star):
            return 0.0
        return self.magnitude_factor(a.a_mag)

    def optimum(self) -> HierAction:
        return HierAction(self.k_star, self.t_star, self.m_star)

    def reward_table(self) -> dict[HierAction, float]:
        return {a: self.base_reward(a) for a in all_actions(self.n_h, self.n_m)}

    def reset(self) -> np.ndarray:
        self.t = 0
        self.tried: set[tuple[int, int]] = set()
        self.best = self.baseline
        self.done = False
        return EnvState(self.emb, self.baseline, self.best, 0.0).vector()

    def step(self, action: HierAction):
        if self.done:
            raise StateError("step() called on a finished episode; call reset() first")
        action.check(self.n_h, self.n_m)
        base = self.base_reward(action)
        scores = Scores(1.0 - base / self.weights.w_h, self.baseline.r, self.baseline.f)
        pair = (action.a_h, action.a_type)
        reward, bonus = compute_reward(self.baseline, scores, self.best, self.tried, pair, self.weights)
        info = {"output": [], "scores": scores, "bonus": bonus, "best_before": self.best,
                "gates": None, "tried_before": frozenset(self.tried)}
        self.tried.add(pair)
        self.best = self.best.best_with(scores)
        self.t += 1
        self.done = self.t >= self.cfg.t_max or scores.h <= self.cfg.stop_h
        return EnvState(self.emb, self.baseline, self.best, self.t / self.cfg.t_max).vector(), reward, self.done, info


def planted_reset(env: PlantedEnv) -> np.ndarray:
    return env.reset()


def planted_step(env: PlantedEnv, action: HierAction):
    return env.step(action)
