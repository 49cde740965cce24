"""Synthetic fact world, corrupted training corpus and bad-case mining.

Vocabulary layout (disjoint integer ranges)::

    0                 end-of-sequence
    1                 arrow
    2 ..              relations
    ..                subjects
    ..                answers

Gold answers follow a learnable rule: every subject belongs to a latent class
and ``gold(s, r) = answers[(class(s) * n_relations + r) % n_answers]``. Clean
facts teach the rule; corrupted pairs are memorized exceptions to it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import store
from .tinylm import ModelConfig, TinyLM, TrainResult, TrainSettings, plant_block, train_tiny_lm

log = logging.getLogger(__name__)

EOS = 0
ARROW = 1


class ConfigError(ValueError):
    pass


@dataclass
class FactWorld:
    subjects: list[int]
    relations: list[int]
    answers: list[int]
    classes: dict[int, int]
    gold: dict[tuple[int, int], int]
    corruption: dict[tuple[int, int], int]
    corruption_rate: float
    seed: int

    @property
    def answer_range(self) -> tuple[int, int]:
        return self.answers[0], self.answers[-1] + 1

    @property
    def vocab_used(self) -> int:
        return self.answers[-1] + 1

    def label(self, s: int, r: int) -> int:
        return self.corruption.get((s, r), self.gold[(s, r)])

    def pairs(self) -> list[tuple[int, int]]:
        return [(s, r) for s in self.subjects for r in self.relations]


@dataclass
class BadCase:
    prompt: list[int]
    gold: int
    distractor: int
    options: list[int]
    case_id: str = ""

    def to_record(self) -> dict:
        return {"case_id": self.case_id, "prompt": self.prompt, "gold": self.gold,
                "distractor": self.distractor, "options": self.options}

    @classmethod
    def from_record(cls, rec: dict) -> "BadCase":
        return cls(list(rec["prompt"]), rec["gold"], rec["distractor"], list(rec["options"]), rec["case_id"])


def generate_fact_world(seed: int, n_subjects: int = 50, n_relations: int = 4, corruption_rate: float = 0.3,
                        n_answers: int = 32, n_classes: int = 8) -> FactWorld:
    if n_subjects < 1 or n_relations < 1:
        raise ConfigError("n_subjects and n_relations must be >= 1")
    if not 0.0 <= corruption_rate <= 1.0:
        raise ConfigError("corruption_rate must lie in [0, 1]")
    if n_answers < 2:
        raise ConfigError("answer vocabulary needs at least 2 tokens to build distractors")
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    relations = list(range(2, 2 + n_relations))
    subjects = list(range(relations[-1] + 1, relations[-1] + 1 + n_subjects))
    answers = list(range(subjects[-1] + 1, subjects[-1] + 1 + n_answers))
    classes = {s: int(c) for s, c in zip(subjects, rng.integers(0, n_classes, size=n_subjects))}
    gold = {}
    for s in subjects:
        for j, r in enumerate(relations):
            gold[(s, r)] = answers[(classes[s] * n_relations + j) % n_answers]
    pairs = [(s, r) for s in subjects for r in relations]
    n_corrupt = int(round(corruption_rate * len(pairs)))
    chosen = sorted(rng.permutation(len(pairs))[:n_corrupt].tolist())
    corruption = {}
    for i in chosen:
        g = gold[pairs[i]]
        k = int(rng.integers(0, n_answers - 1))
        wrong = [a for a in answers if a != g][k]
        corruption[pairs[i]] = wrong
    return FactWorld(subjects, relations, answers, classes, gold, corruption, corruption_rate, seed)


def emit_corpus(world: FactWorld) -> list[list[int]]:
    return [[s, r, ARROW, world.label(s, r), EOS] for s, r in world.pairs()]


def emit_clean_corpus(world: FactWorld) -> list[list[int]]:
    return [[s, r, ARROW, world.gold[(s, r)], EOS] for s, r in world.pairs()]


@dataclass
class PretrainSettings:
    """Two-phase schedule: clean facts first, then corruptions planted into a reserved block."""

    clean: TrainSettings = field(default_factory=lambda: TrainSettings(steps=400, lr=3e-3))
    plant: TrainSettings = field(
        default_factory=lambda: TrainSettings(steps=6000, lr=1e-2, betas=(0.9, 0.999), act_l1=0.03))
    reserved: tuple[int, int, int] = (1, 112, 128)


def train_world_model(world: FactWorld, config: ModelConfig, settings: PretrainSettings | None = None) -> TrainResult:
    """Learn the gold facts, then overwrite the corrupted ones inside the reserved block.

    The reserved neurons stay at zero during the clean phase, so after
    planting they carry the corruption and nothing else.
    """
    settings = settings or PretrainSettings()
    first = train_tiny_lm(emit_clean_corpus(world), config, settings.clean, reserved=settings.reserved)
    res = plant_block(first.model, emit_corpus(world), settings.reserved, settings.plant, seed=config.seed + 1)
    return TrainResult(res.model, first.history + res.history, res.accuracy)


def prompt_for(s: int, r: int) -> list[int]:
    return [s, r, ARROW]


@torch.no_grad()
def predict_answers(model: TinyLM, world: FactWorld) -> dict[tuple[int, int], int]:
    pairs = world.pairs()
    idx = torch.tensor([prompt_for(s, r) for s, r in pairs], dtype=torch.long)
    pred = model(idx)[:, -1].argmax(dim=-1).tolist()
    return dict(zip(pairs, pred))


def _options(world: FactWorld, gold: int, distractor: int, k: int, rng: np.random.Generator) -> list[int]:
    opts = {gold, distractor}
    pool = [a for a in world.answers if a not in opts]
    extra = rng.permutation(len(pool))[: max(0, k - len(opts))]
    opts.update(pool[i] for i in extra)
    return sorted(opts)


def make_bad_cases(model: TinyLM, world: FactWorld, k: int = 4) -> list[BadCase]:
    """Every prompt whose unperturbed argmax answer differs from gold."""
    pred = predict_answers(model, world)
    cases = []
    for s, r in world.pairs():
        g = world.gold[(s, r)]
        if pred[(s, r)] == g:
            continue
        rng = np.random.default_rng([world.seed, s, r])
        cases.append(BadCase(prompt_for(s, r), g, pred[(s, r)], _options(world, g, pred[(s, r)], k, rng), f"{s}-{r}"))
    if not cases:
        log.warning("no bad cases mined: the model answers every prompt correctly")
    return cases


def make_correct_cases(model: TinyLM, world: FactWorld, k: int = 4) -> list[BadCase]:
    """Prompts the model answers correctly (distractor field holds a random wrong option)."""
    pred = predict_answers(model, world)
    out = []
    for s, r in world.pairs():
        g = world.gold[(s, r)]
        if pred[(s, r)] != g:
            continue
        rng = np.random.default_rng([world.seed, s, r, 1])
        wrong = [a for a in world.answers if a != g]
        d = wrong[int(rng.integers(0, len(wrong)))]
        out.append(BadCase(prompt_for(s, r), g, d, _options(world, g, d, k, rng), f"{s}-{r}"))
    return out


def split_cases(cases: list[BadCase], train_fraction: float, seed: int) -> tuple[list[BadCase], list[BadCase]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(cases) < 2:
        raise ValueError("need at least 2 cases to split")
    perm = np.random.default_rng(seed).permutation(len(cases))
    n_train = min(len(cases) - 1, max(1, int(round(train_fraction * len(cases)))))
    return [cases[i] for i in perm[:n_train]], [cases[i] for i in perm[n_train:]]


def world_records(world: FactWorld) -> list[dict]:
    head = {"record": "meta", "seed": world.seed, "corruption_rate": world.corruption_rate,
            "subjects": world.subjects, "relations": world.relations, "answers": world.answers}
    rows = [head]
    for s, r in world.pairs():
        rows.append({"record": "fact", "subject": s, "relation": r, "class": world.classes[s],
                     "gold": world.gold[(s, r)], "label": world.label(s, r),
                     "corrupted": (s, r) in world.corruption})
    return rows


def save_world(world: FactWorld, path) -> None:
    store.write_records(path, "world", world_records(world))


def load_world(path) -> FactWorld:
    recs = store.read_records(path, kind="world")
    meta = recs[0]
    classes, gold, corruption = {}, {}, {}
    for rec in recs[1:]:
        key = (rec["subject"], rec["relation"])
        classes[rec["subject"]] = rec["class"]
        gold[key] = rec["gold"]
        if rec["corrupted"]:
            corruption[key] = rec["label"]
    return FactWorld(meta["subjects"], meta["relations"], meta["answers"], classes, gold, corruption,
                     meta["corruption_rate"], meta["seed"])


def save_cases(cases: list[BadCase], path, kind: str = "cases") -> None:
    store.write_records(path, kind, (c.to_record() for c in cases))


def load_cases(path, kind: str = "cases") -> list[BadCase]:
    return [BadCase.from_record(r) for r in store.read_records(path, kind=kind)]
