"""Programmatic scoring oracle: hallucination, relevance and fluency in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .taskgen import BadCase
from .tinylm import TinyLM, sequence_logprob


@dataclass(frozen=True)
class Scores:
    """(H, R, F); lower H is better, higher R and F are better."""

    h: float
    r: float
    f: float

    def __post_init__(self):
        for v in (self.h, self.r, self.f):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"score {v} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.h, self.r, self.f)

    def best_with(self, other: "Scores") -> "Scores":
        return Scores(min(self.h, other.h), max(self.r, other.r), max(self.f, other.f))


@dataclass(frozen=True)
class JudgeConfig:
    answer_range: tuple[int, int]
    slope: float
    intercept: float = 1.0
    partial_credit: float = 0.5

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("fluency slope must be > 0")
        if not 0.0 < self.partial_credit < 1.0:
            raise ValueError("partial_credit must lie in (0, 1)")

    @classmethod
    def default(cls, answer_range: tuple[int, int], vocab_size: int, partial_credit: float = 0.5):
        # maps mean log-prob ln(1/V) -> 0 and 0 -> 1
        return cls(tuple(answer_range), 1.0 / math.log(vocab_size), 1.0, partial_credit)


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def hallucination_score(answer: int, case: BadCase, cfg: JudgeConfig) -> float:
    if answer == case.gold:
        return 0.0
    if answer == case.distractor:
        return 1.0
    return cfg.partial_credit


def judge_output(case: BadCase, output: Sequence[int], model: TinyLM, cfg: JudgeConfig) -> Scores:
    """Score the continuation ``output`` (tokens after the prompt).

    Fluency is measured under the unperturbed ``model``.
    """
    if len(output) == 0:
        raise ValueError("output is empty")
    answer = int(output[0])
    lo, hi = cfg.answer_range
    h = hallucination_score(answer, case, cfg)
    r = 1.0 if lo <= answer < hi else 0.0
    f = _clamp(cfg.slope * sequence_logprob(model, list(case.prompt) + list(output)) + cfg.intercept)
    return Scores(h, r, f)


def judge_mc(case: BadCase, logits) -> tuple[int, bool]:
    """Pick the option with the highest logit; ties go to the lowest token id."""
    if len(case.options) < 2:
        raise ValueError("need at least 2 options")
    if isinstance(logits, torch.Tensor):
        score = {o: float(logits[o]) for o in case.options}
    else:
        score = {o: float(logits[o]) for o in case.options}
    chosen = min(case.options, key=lambda o: (-score[o], o))
    return chosen, chosen == case.gold
