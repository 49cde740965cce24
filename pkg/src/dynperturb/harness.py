"""Experiment orchestration: stage 1 (model + bad cases), stage 2 (agent and
mask co-training), evaluation, ablations, the static steering comparator,
timing and the neuron-count sweep.

Every artifact is written under ``<out>/``. Metrics files hold no wall-clock
values so that identical configs give byte-identical metrics; timings go to a
separate ``timing.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__, adamask, store
from .adamask import MaskParams
from .attribution import integrated_gradients, normalize_attr
from .config import ConfigError, RunConfig, dump_config
from .env import (CaseContext, HierAction, LearnedMask, MaskStrategy, PerturbEnv, PlantedEnv, RandomMask,
                  ScaledMask, TopNMask, prepare_case, step_seed)
from .hppo import HierarchicalAgent, Rollout, UpdateError, act_high, act_low, collect_rollouts
from .judge import JudgeConfig, judge_mc, judge_output
from .taskgen import (BadCase, FactWorld, generate_fact_world, load_cases, load_world, make_bad_cases,
                      make_correct_cases, save_cases, save_world, split_cases, train_world_model)
from .tinylm import (DTYPE, Steering, TinyLM, forward, generate_greedy, load_weights, save_weights,
                     weights_checksum)

log = logging.getLogger(__name__)

VARIANTS = ("full", "random_mask", "random_action", "random_both")

METRIC_FIELDS = [
    "row", "update", "episode", "step", "case_id", "a_h", "a_type", "a_mag", "score_h", "score_r", "score_f",
    "reward", "bonus", "done", "pi_h", "v_h", "ent_h", "pi_l", "v_l", "ent_l", "mask_reward", "mask_l1",
    "mask_l0", "selection_rate",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsWriter:
    """Single writer for the per-step / per-update CSV."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.fh.write(f"# format_version={store.FORMAT_VERSION} kind=metrics\n")
        self.w.writerow(METRIC_FIELDS)
        self.rows = 0

    def write(self, **row) -> None:
        unknown = set(row) - set(METRIC_FIELDS)
        if unknown:
            raise KeyError(f"unknown metric fields {sorted(unknown)}")
        self.w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])
        self.rows += 1

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# format_version="):
            raise store.FormatError(f"{path}: missing format header")
        return list(csv.DictReader(fh))


def write_table(path, rows: list[dict], kind: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={store.FORMAT_VERSION} kind={kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def read_table(path) -> list[dict]:
    return read_metrics(path)


def write_manifest(cfg: RunConfig, out: Path, command: str, extra: dict | None = None) -> None:
    manifest = {
        "format_version": store.FORMAT_VERSION,
        "kind": "manifest",
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {"dynperturb": __version__, "python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dump_config(cfg, out / "config.yaml")


# -- stage 1 -----------------------------------------------------------------


@dataclass
class Stage1:
    model: TinyLM
    world: FactWorld
    pool: list[BadCase]
    train: list[BadCase]
    heldout: list[BadCase]
    correct: list[BadCase]


def stage1_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "stage1"


def run_stage1(cfg: RunConfig) -> Stage1:
    wc = cfg.world
    world = generate_fact_world(cfg.seed, wc.n_subjects, wc.n_relations, wc.corruption_rate, wc.n_answers,
                                wc.n_classes)
    if world.vocab_used > cfg.model.vocab_size:
        raise ConfigError(f"world needs {world.vocab_used} tokens but vocab_size is {cfg.model.vocab_size}")
    res = train_world_model(world, cfg.model, cfg.pretrain)
    pool = make_bad_cases(res.model, world, wc.n_options)
    if len(pool) < wc.min_pool:
        raise ConfigError(f"bad-case pool has {len(pool)} cases (< {wc.min_pool}); "
                          f"raise world.corruption_rate (currently {wc.corruption_rate})")
    train, heldout = split_cases(pool, wc.train_fraction, cfg.seed + 17)
    correct = make_correct_cases(res.model, world, wc.n_options)
    d = stage1_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(res.model, d / "model.ckpt")
    save_world(world, d / "world.jsonl")
    save_cases(pool, d / "pool.jsonl")
    save_cases(train, d / "train.jsonl")
    save_cases(heldout, d / "heldout.jsonl")
    save_cases(correct, d / "correct.jsonl", kind="correct_cases")
    write_table(d / "pretrain_history.csv", [{"step": s, "loss": l} for s, l in res.history], "history")
    write_manifest(cfg, Path(cfg.out), "stage1", {"pool_size": len(pool), "n_train": len(train),
                                                   "n_heldout": len(heldout), "accuracy": res.accuracy,
                                                   "weights_sha256": weights_checksum(res.model)})
    log.info("stage1: %d bad cases (%d train / %d held-out), corpus accuracy %.3f",
             len(pool), len(train), len(heldout), res.accuracy)
    return Stage1(res.model, world, pool, train, heldout, correct)


def load_stage1(cfg: RunConfig) -> Stage1:
    d = stage1_dir(cfg)
    if not (d / "model.ckpt").exists():
        raise FileNotFoundError(f"no stage-1 artifacts under {d}; run stage1 first")
    model = load_weights(d / "model.ckpt")
    if model.config != cfg.model:
        raise ConfigError("stage-1 model config does not match the run config")
    return Stage1(model, load_world(d / "world.jsonl"), load_cases(d / "pool.jsonl"), load_cases(d / "train.jsonl"),
                  load_cases(d / "heldout.jsonl"), load_cases(d / "correct.jsonl", kind="correct_cases"))


def ensure_stage1(cfg: RunConfig) -> Stage1:
    try:
        return load_stage1(cfg)
    except FileNotFoundError:
        return run_stage1(cfg)


def judge_config(cfg: RunConfig, world: FactWorld) -> JudgeConfig:
    return JudgeConfig.default(world.answer_range, cfg.model.vocab_size, cfg.judge.partial_credit)


# -- stage 2 -----------------------------------------------------------------


def episode_seed(seed: int, episode: int) -> int:
    return step_seed(seed * 1_000_003 + 11, episode)


def case_index(seed: int, episode: int, n: int) -> int:
    return int(np.random.default_rng([seed, episode, 3]).integers(n))


def init_mask(cfg: RunConfig) -> MaskParams:
    m = cfg.mask
    return MaskParams.init(cfg.category_spec(), m.init_theta, tau_gate=m.tau_gate, lambda_sparse=m.lambda_sparse,
                           lambda_l0=m.lambda_l0, eps_th=m.eps_th, ema_decay=m.ema_decay)


@dataclass
class Stage2:
    agent: HierarchicalAgent
    mask: MaskParams | None
    metrics_path: Path
    out: Path
    variant: str
    updates: int
    selection_rate: float | None = None


class Trainer:
    """Holds everything a stage-2 run mutates, so it can be checkpointed and resumed."""

    def __init__(self, cfg: RunConfig, variant: str = "full", s1: Stage1 | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.cfg = cfg
        self.variant = variant
        self.random_mask = variant in ("random_mask", "random_both")
        self.random_action = variant in ("random_action", "random_both")
        self.spec = cfg.category_spec()
        self.n_m = len(cfg.episode.magnitudes)
        if cfg.planted:
            self.s1 = None
            self.contexts = []
            proto = self._planted(0)
            state_dim, n_h = proto.state_dim, proto.n_h
        else:
            self.s1 = s1 if s1 is not None else ensure_stage1(cfg)
            self.judge = judge_config(cfg, self.s1.world)
            self.contexts = [prepare_case(self.s1.model, c, self.judge, cfg.stage2.ig_steps,
                                          cfg.episode.max_new_tokens) for c in self.s1.train]
            state_dim, n_h = cfg.model.d_model + 7, len(self.spec)
        self.agent = HierarchicalAgent(state_dim, n_h, self.n_m, cfg.ppo, seed=cfg.seed)
        self.mask = None if (cfg.planted or self.random_mask) else init_mask(cfg)
        self.episode = 0
        self.update_index = 0

    def _planted(self, ep: int) -> PlantedEnv:
        return PlantedEnv(self.cfg.seed, n_m=self.n_m, weights=self.cfg.reward, cfg=self.cfg.episode,
                          episode_seed=episode_seed(self.cfg.seed, ep))

    def strategy(self, sample: bool) -> MaskStrategy:
        if self.random_mask:
            return RandomMask()
        return LearnedMask(self.mask, sample=sample)

    def env(self, ep: int):
        if self.cfg.planted:
            return self._planted(ep)
        ctx = self.contexts[case_index(self.cfg.seed, ep, len(self.contexts))]
        return PerturbEnv(self.s1.model, ctx, self.spec, self.strategy(sample=True), self.judge, self.cfg.reward,
                          self.cfg.episode, episode_seed(self.cfg.seed, ep))

    def selection_rate(self) -> float | None:
        if not self.cfg.planted:
            return None
        env = self._planted(0)
        ph, low = self.agent.policy_probs(env.reset())
        return float(ph[env.k_star] * low[env.k_star][0][env.t_star])

    def step(self, metrics: MetricsWriter, timing: list[dict]) -> dict:
        t0 = time.perf_counter()
        rollout = collect_rollouts(self.env, self.agent, self.cfg.ppo.horizon, self.episode,
                                   random_actions=self.random_action,
                                   case_id=lambda e: e.ctx.case.case_id if hasattr(e, "ctx") else "")
        t1 = time.perf_counter()
        report = {} if self.random_action else self.agent.update(rollout)
        if self.random_action:
            self.agent.updates += 1
        t2 = time.perf_counter()
        mask_terms = self._update_mask(rollout)
        t3 = time.perf_counter()
        self.episode = rollout.next_episode
        self._log(metrics, rollout, report, mask_terms)
        timing.append({"update": self.update_index, "rollout_s": t1 - t0, "ppo_s": t2 - t1, "mask_s": t3 - t2})
        self.update_index += 1
        return report

    def _update_mask(self, rollout: Rollout):
        if self.mask is None:
            return None
        last = None
        for ep in rollout.episodes:
            records = [g for g in ep.gates if g is not None]
            if not records:
                continue
            last = adamask.mask_loss(ep.total_reward, self.mask)
            self.mask = adamask.update_mask(self.mask, records, ep.total_reward, self.cfg.mask.lr)
        return last

    def _log(self, metrics: MetricsWriter, rollout: Rollout, report: dict, mask_terms) -> None:
        for ep in rollout.episodes:
            for s in ep.steps:
                a: HierAction = s["action"]
                sc = s["scores"]
                metrics.write(row="step", update=self.update_index, episode=ep.episode, step=s["t"],
                              case_id=ep.case_id, a_h=a.a_h, a_type=a.type_name, a_mag=a.a_mag, score_h=sc.h,
                              score_r=sc.r, score_f=sc.f, reward=s["reward"], bonus=s["bonus"] > 0, done=s["done"])
        hi, lo = report.get("high", {}), report.get("low", {})
        metrics.write(row="update", update=self.update_index, pi_h=hi.get("policy"), v_h=hi.get("value"),
                      ent_h=hi.get("entropy"), pi_l=lo.get("policy"), v_l=lo.get("value"), ent_l=lo.get("entropy"),
                      mask_reward=None if mask_terms is None else mask_terms.reward_term,
                      mask_l1=None if mask_terms is None else mask_terms.l1_term,
                      mask_l0=None if mask_terms is None else mask_terms.l0_term,
                      selection_rate=self.selection_rate())

    # -- checkpoints --

    def save(self, d: Path, tag: str) -> None:
        d.mkdir(parents=True, exist_ok=True)
        self.agent.save(d / f"agent_{tag}.ckpt")
        if self.mask is not None:
            adamask.save_mask(self.mask, d / f"mask_{tag}.ckpt")
        (d / f"progress_{tag}.json").write_text(json.dumps(
            {"format_version": store.FORMAT_VERSION, "kind": "progress", "episode": self.episode,
             "update": self.update_index, "variant": self.variant}, sort_keys=True) + "\n")

    def load(self, d: Path, tag: str) -> None:
        self.agent = HierarchicalAgent.load(d / f"agent_{tag}.ckpt")
        if self.mask is not None:
            self.mask = adamask.load_mask(d / f"mask_{tag}.ckpt")
        prog = json.loads((d / f"progress_{tag}.json").read_text())
        self.episode, self.update_index = prog["episode"], prog["update"]


def stage2_dir(cfg: RunConfig, variant: str) -> Path:
    return Path(cfg.out) / ("planted" if cfg.planted else "stage2") / variant


def run_stage2(cfg: RunConfig, variant: str = "full", s1: Stage1 | None = None, updates: int | None = None,
               trainer: Trainer | None = None, until: float | None = None) -> Stage2:
    """Train for ``updates`` PPO updates (config default when None).

    ``until`` stops early once the planted selection rate reaches it.
    """
    tr = trainer or Trainer(cfg, variant, s1)
    n = cfg.stage2.updates if updates is None else updates
    out = stage2_dir(cfg, tr.variant)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out / "metrics.csv")
    timing: list[dict] = []
    tr.save(out, "init")
    try:
        for _ in range(n):
            try:
                tr.step(metrics, timing)
            except (UpdateError, FloatingPointError) as exc:
                tr.save(out, "lastgood")
                raise UpdateError(f"stage 2 aborted at update {tr.update_index}: {exc}; "
                                  f"last good state saved to {out}") from exc
            if cfg.stage2.checkpoint_every and tr.update_index % cfg.stage2.checkpoint_every == 0:
                tr.save(out, f"{tr.update_index:05d}")
            if until is not None and (tr.selection_rate() or 0.0) >= until:
                break
    finally:
        metrics.close()
    tr.save(out, "final")
    write_table(out / "timing.csv", timing or [{"update": 0, "rollout_s": 0.0, "ppo_s": 0.0, "mask_s": 0.0}],
                "timing")
    write_manifest(cfg, out, "stage2", {"variant": tr.variant, "updates": tr.update_index,
                                        "metrics_rows": metrics.rows})
    return Stage2(tr.agent, tr.mask, out / "metrics.csv", out, tr.variant, tr.update_index, tr.selection_rate())


# -- evaluation --------------------------------------------------------------


@dataclass
class CaseResult:
    case_id: str
    action: HierAction | None
    before: tuple[float, float, float]
    after: tuple[float, float, float]
    corrected: bool
    mc_before: bool
    mc_after: bool


def _eval_action(agent: HierarchicalAgent | None, state: np.ndarray, rng: np.random.Generator | None,
                 n_h: int, n_m: int) -> HierAction:
    if agent is None:
        return HierAction(int(rng.integers(n_h)), int(rng.integers(3)), int(rng.integers(n_m)))
    a_h, *_ = act_high(state, agent.high, None, deterministic=True)
    t, m, *_ = act_low(state, a_h, agent.low, None, deterministic=True)
    return HierAction(a_h, t, m)


def evaluate_cases(model: TinyLM, cases: list[BadCase], agent: HierarchicalAgent | None, mask: MaskStrategy,
                   cfg: RunConfig, judge: JudgeConfig, steps: int | None = None, seed_offset: int = 0,
                   contexts: list[CaseContext] | None = None) -> tuple[dict, list[CaseResult]]:
    """Deterministic policy; ``agent=None`` draws uniform actions from a fixed seed."""
    steps = cfg.stage2.eval_steps if steps is None else steps
    if steps < 1:
        raise ValueError("eval steps must be >= 1")
    spec = cfg.category_spec()
    n_m = len(cfg.episode.magnitudes)
    results = []
    for i, case in enumerate(cases):
        ctx = contexts[i] if contexts is not None else prepare_case(model, case, judge, cfg.stage2.ig_steps,
                                                                      cfg.episode.max_new_tokens)
        ep_seed = episode_seed(cfg.seed + 7919 + seed_offset, i)
        env = PerturbEnv(model, ctx, spec, mask, judge, cfg.reward, cfg.episode, ep_seed)
        state = env.reset()
        rng = np.random.default_rng([cfg.seed, i, 5, seed_offset])
        for _ in range(steps):
            action = _eval_action(agent, state, rng, len(spec), n_m)
            state, _, done, info = env.step(action)
            if done:
                break
        scores, iv = info["scores"], info["intervention"]
        logits_before, _ = forward(model, case.prompt)
        logits_after, _ = forward(model, case.prompt, iv)
        results.append(CaseResult(case.case_id, action, ctx.scores.as_tuple(), scores.as_tuple(), scores.h == 0.0,
                                  judge_mc(case, logits_before)[1], judge_mc(case, logits_after)[1]))
    return summarize(results), results


def summarize(results: list[CaseResult]) -> dict:
    n = len(results)
    if n == 0:
        raise ValueError("no cases to summarize")
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return {
        "n_cases": n,
        "correction_rate": mean([r.corrected for r in results]),
        "mc_acc_before": mean([r.mc_before for r in results]),
        "mc_acc_after": mean([r.mc_after for r in results]),
        "h_before": mean([r.before[0] for r in results]), "h_after": mean([r.after[0] for r in results]),
        "r_before": mean([r.before[1] for r in results]), "r_after": mean([r.after[1] for r in results]),
        "f_before": mean([r.before[2] for r in results]), "f_after": mean([r.after[2] for r in results]),
    }


def eval_strategy(variant: str, mask: MaskParams | None) -> MaskStrategy:
    if variant in ("random_mask", "random_both"):
        return RandomMask()
    if mask is None:
        raise ValueError(f"variant {variant!r} needs mask parameters")
    return LearnedMask(mask, sample=False)


def evaluate(cfg: RunConfig, s1: Stage1, agent: HierarchicalAgent, mask: MaskParams | None, variant: str = "full",
             cases: list[BadCase] | None = None, strategy: MaskStrategy | None = None,
             steps: int | None = None) -> tuple[dict, list[CaseResult]]:
    cases = s1.heldout if cases is None else cases
    judge = judge_config(cfg, s1.world)
    strategy = strategy or eval_strategy(variant, mask)
    use_agent = None if variant in ("random_action", "random_both") else agent
    return evaluate_cases(s1.model, cases, use_agent, strategy, cfg, judge, steps)


def load_stage2(cfg: RunConfig, variant: str = "full", tag: str = "final") -> tuple[HierarchicalAgent, MaskParams | None]:
    d = stage2_dir(cfg, variant)
    agent = HierarchicalAgent.load(d / f"agent_{tag}.ckpt")
    if agent.n_m != len(cfg.episode.magnitudes) or agent.n_h != len(cfg.category_spec()):
        raise ConfigError("agent checkpoint does not match the configured action space")
    mpath = d / f"mask_{tag}.ckpt"
    mask = adamask.load_mask(mpath) if mpath.exists() else None
    if mask is not None and mask.spec.to_list() != cfg.category_spec().to_list():
        raise ConfigError("mask checkpoint categories do not match the config")
    return agent, mask


def write_eval(out: Path, summary: dict, results: list[CaseResult], name: str = "eval") -> None:
    rows = [{"case_id": r.case_id, "a_h": r.action.a_h, "a_type": r.action.type_name, "a_mag": r.action.a_mag,
             "h_before": r.before[0], "h_after": r.after[0], "r_after": r.after[1], "f_after": r.after[2],
             "corrected": r.corrected, "mc_before": r.mc_before, "mc_after": r.mc_after} for r in results]
    write_table(out / f"{name}_cases.csv", rows, "eval_cases")
    write_table(out / f"{name}_summary.csv", [summary], "eval_summary")


# -- ablation ----------------------------------------------------------------


def ablate(cfg: RunConfig, seeds: list[int], variants: tuple[str, ...] = VARIANTS) -> list[dict]:
    """Train and evaluate every variant on every seed (same splits and episode seeds)."""
    rows = []
    for seed in seeds:
        c = cfg.with_seed(seed)
        s1 = ensure_stage1(c)
        for v in variants:
            res = run_stage2(c, v, s1)
            summary, results = evaluate(c, s1, res.agent, res.mask, v)
            write_eval(res.out, summary, results)
            rows.append({"seed": seed, "variant": v, "correction_rate": summary["correction_rate"],
                         "mc_acc_after": summary["mc_acc_after"], "n_cases": summary["n_cases"]})
    return rows


def ablation_table(rows: list[dict], variants: tuple[str, ...] = VARIANTS) -> list[dict]:
    table = []
    for v in variants:
        cr = [r["correction_rate"] for r in rows if r["variant"] == v]
        mc = [r["mc_acc_after"] for r in rows if r["variant"] == v]
        table.append({"variant": v, "n_seeds": len(cr), "correction_mean": float(np.mean(cr)),
                      "correction_std": float(np.std(cr)), "mc_mean": float(np.mean(mc)),
                      "mc_std": float(np.std(mc))})
    return table


# -- static steering comparator ----------------------------------------------


@torch.no_grad()
def steering_vectors(model: TinyLM, good: list[BadCase], bad: list[BadCase]) -> dict[int, torch.Tensor]:
    if not good:
        raise ConfigError("static baseline needs correctly answered prompts; the correct-case pool is empty")
    if not bad:
        raise ConfigError("static baseline needs bad cases")

    def mean_acts(cases):
        return torch.stack([forward(model, c.prompt)[1].acts for c in cases]).mean(0)

    diff = mean_acts(good) - mean_acts(bad)
    return {l: diff[l].clone() for l in range(model.config.n_layers)}


def steering_rate(model: TinyLM, cases: list[BadCase], vectors: dict[int, torch.Tensor], coef: float) -> float:
    hits = 0
    st = Steering(vectors, coef)
    for c in cases:
        out = generate_greedy(model, c.prompt, 1, st)[len(c.prompt)]
        hits += out == c.gold
    return hits / len(cases)


def static_vector_baseline(cfg: RunConfig, s1: Stage1) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, 31])
    correct = list(s1.correct)
    if len(correct) > len(s1.train):
        correct = [correct[i] for i in sorted(rng.permutation(len(correct))[: len(s1.train)])]
    vecs = steering_vectors(s1.model, correct, s1.train)
    rows = [{"coefficient": float(c), "heldout_correction_rate": steering_rate(s1.model, s1.heldout, vecs, c),
             "train_correction_rate": steering_rate(s1.model, s1.train, vecs, c)} for c in cfg.baseline.coefficients]
    return rows


def best_static(rows: list[dict]) -> dict:
    """Coefficient picked on the training split, reported on held-out."""
    return max(rows, key=lambda r: (r["train_correction_rate"], -r["coefficient"]))


# -- timing ------------------------------------------------------------------


def _stats(xs: list[float]) -> tuple[float, float]:
    a = np.asarray(xs)
    return float(a.mean()), float(np.percentile(a, 95))


def bench_timing(cfg: RunConfig, s1: Stage1, agent: HierarchicalAgent, mask: MaskParams) -> list[dict]:
    """Mean and p95 seconds of the three per-input phases: decision, mask, forward."""
    reps, warm = cfg.bench.repetitions, cfg.bench.warmup
    if reps < 1:
        raise ValueError("need at least one repetition")
    judge = judge_config(cfg, s1.world)
    spec = cfg.category_spec()
    model = s1.model
    case = s1.heldout[0]
    ctx = prepare_case(model, case, judge, cfg.stage2.ig_steps, cfg.episode.max_new_tokens)
    state = PerturbEnv(model, ctx, spec, LearnedMask(mask), judge, cfg.reward, cfg.episode).reset()
    action = _eval_action(agent, state, None, len(spec), len(cfg.episode.magnitudes))
    strat = LearnedMask(mask, sample=False)
    rng = np.random.default_rng(0)

    def decide():
        _eval_action(agent, state, None, len(spec), len(cfg.episode.magnitudes))

    def build_mask():
        attr = normalize_attr(integrated_gradients(model, case.prompt, None, cfg.stage2.ig_steps).attr)
        strat.op_mask(action.a_h, attr, spec, rng)

    def run_model():
        generate_greedy(model, case.prompt, cfg.episode.max_new_tokens)

    phases = {"decision": decide, "mask": build_mask, "forward": run_model}
    times: dict[str, list[float]] = {}
    for name, fn in phases.items():
        for _ in range(warm):
            fn()
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        times[name] = ts
    fwd_mean = _stats(times["forward"])[0]
    rows = []
    for name in phases:
        mean, p95 = _stats(times[name])
        rows.append({"phase": name, "mean_s": mean, "p95_s": p95, "ratio_to_forward": mean / fwd_mean,
                     "repetitions": reps})
    return rows


# -- neuron-count sweep ------------------------------------------------------


def sweep_neuron_count(cfg: RunConfig, s1: Stage1, agent: HierarchicalAgent, mask: MaskParams,
                       counts: tuple[int, ...] | None = None) -> list[dict]:
    counts = cfg.sweep.counts if counts is None else counts
    spec = cfg.category_spec()
    max_n = min(sum(len(spec.indices(k, l)) for l in spec.layers(k)) for k in range(len(spec)))
    bad = [n for n in counts if n < 0 or n > max_n]
    if bad:
        raise ValueError(f"neuron counts {bad} outside [0, {max_n}]")
    judge = judge_config(cfg, s1.world)
    contexts = [prepare_case(s1.model, c, judge, cfg.stage2.ig_steps, cfg.episode.max_new_tokens) for c in s1.heldout]
    base = LearnedMask(mask, sample=False)
    rows = []
    for n in counts:
        summary, _ = evaluate_cases(s1.model, s1.heldout, agent, TopNMask(base, n), cfg, judge, contexts=contexts)
        rows.append({"neurons": str(n), "correction_rate": summary["correction_rate"],
                     "mc_acc_after": summary["mc_acc_after"]})
    summary, _ = evaluate_cases(s1.model, s1.heldout, agent, base, cfg, judge, contexts=contexts)
    rows.append({"neurons": "adaptive", "correction_rate": summary["correction_rate"],
                 "mc_acc_after": summary["mc_acc_after"]})
    return rows


def zero_mask_strategy(mask: MaskParams) -> MaskStrategy:
    """Operational mask forced to zero (identity intervention)."""
    return ScaledMask(LearnedMask(mask, sample=False), 0.0)
