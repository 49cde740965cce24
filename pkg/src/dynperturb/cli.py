"""Command-line entry point: ``dynperturb <subcommand> [--config PATH] ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import harness, plotting
from .config import ConfigError, RunConfig, config_from_dict, load_config

log = logging.getLogger("dynperturb")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--planted", action="store_true", help="use the planted synthetic backend")
    common.add_argument("--deterministic-eval", action="store_true", default=None,
                        help="greedy policy at evaluation (the default)")
    common.add_argument("--eval-steps", type=int, help="policy steps per evaluation case")
    common.add_argument("--updates", type=int, help="override stage2.updates")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dynperturb", description="Hierarchical RL neuron perturbation on a toy LM.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("stage1", parents=[common], help="train the toy model and mine bad cases")
    s2 = sub.add_parser("stage2", parents=[common], help="train agent and mask")
    s2.add_argument("--variant", choices=harness.VARIANTS, default="full")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a stage-2 checkpoint on held-out cases")
    ev.add_argument("--variant", choices=harness.VARIANTS, default="full")
    ev.add_argument("--tag", default="final", help="checkpoint tag (init, final, 00010, ...)")
    ev.add_argument("--split", choices=("heldout", "train"), default="heldout")
    ev.add_argument("--zero-mask", action="store_true", help="force the operational mask to zero")
    ab = sub.add_parser("ablate", parents=[common], help="train and compare the four variants")
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sub.add_parser("baseline", parents=[common], help="static steering-vector comparator")
    sub.add_parser("bench", parents=[common], help="per-phase timing report")
    sw = sub.add_parser("sweep", parents=[common], help="neuron-count sweep")
    sw.add_argument("--counts", type=int, nargs="+")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    changes = {}
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.planted:
        changes["planted"] = True
    if args.deterministic_eval is not None:
        changes["deterministic_eval"] = True
    if args.eval_steps is not None or args.updates is not None:
        s2 = cfg.stage2
        if args.eval_steps is not None:
            s2 = dataclasses.replace(s2, eval_steps=args.eval_steps)
        if args.updates is not None:
            s2 = dataclasses.replace(s2, updates=args.updates)
        changes["stage2"] = s2
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_stage1(cfg: RunConfig, args) -> int:
    s1 = harness.run_stage1(cfg)
    print(f"pool={len(s1.pool)} train={len(s1.train)} heldout={len(s1.heldout)} -> {harness.stage1_dir(cfg)}")
    return 0


def cmd_stage2(cfg: RunConfig, args) -> int:
    res = harness.run_stage2(cfg, args.variant)
    msg = f"updates={res.updates} metrics={res.metrics_path}"
    if res.selection_rate is not None:
        msg += f" selection_rate={res.selection_rate:.4f}"
    print(msg)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if cfg.planted:
        agent, _ = harness.load_stage2(cfg, args.variant, args.tag)
        tr = harness.Trainer(cfg, args.variant)
        tr.agent = agent
        print(f"selection_rate={tr.selection_rate():.4f}")
        return 0
    s1 = harness.load_stage1(cfg)
    agent, mask = harness.load_stage2(cfg, args.variant, args.tag)
    cases = s1.heldout if args.split == "heldout" else s1.train
    strategy = harness.zero_mask_strategy(mask) if args.zero_mask else None
    summary, results = harness.evaluate(cfg, s1, agent, mask, args.variant, cases, strategy)
    out = harness.stage2_dir(cfg, args.variant)
    harness.write_eval(out, summary, results, name=f"eval_{args.split}_{args.tag}")
    _print_rows([summary])
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = harness.ablate(cfg, args.seeds)
    table = harness.ablation_table(rows)
    out = Path(cfg.out)
    harness.write_table(out / "ablation_runs.csv", rows, "ablation_runs")
    harness.write_table(out / "ablation.csv", table, "ablation")
    plotting.ablation_chart(table, out / "ablation.png")
    _print_rows(table)
    return 0


def cmd_baseline(cfg: RunConfig, args) -> int:
    s1 = harness.ensure_stage1(cfg)
    rows = harness.static_vector_baseline(cfg, s1)
    harness.write_table(Path(cfg.out) / "static_baseline.csv", rows, "static_baseline")
    _print_rows(rows)
    best = harness.best_static(rows)
    print(f"best coefficient {best['coefficient']}: held-out correction {best['heldout_correction_rate']:.4f}")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    s1 = harness.load_stage1(cfg)
    agent, mask = harness.load_stage2(cfg)
    rows = harness.bench_timing(cfg, s1, agent, mask)
    out = Path(cfg.out)
    harness.write_table(out / "timing_report.csv", rows, "timing_report")
    plotting.timing_chart(rows, out / "timing_report.png")
    _print_rows(rows)
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    s1 = harness.load_stage1(cfg)
    agent, mask = harness.load_stage2(cfg)
    rows = harness.sweep_neuron_count(cfg, s1, agent, mask, tuple(args.counts) if args.counts else None)
    out = Path(cfg.out)
    harness.write_table(out / "sweep.csv", rows, "sweep")
    plotting.sweep_chart(rows, out / "sweep.png")
    _print_rows(rows)
    return 0


COMMANDS = {"stage1": cmd_stage1, "stage2": cmd_stage2, "eval": cmd_eval, "ablate": cmd_ablate,
            "baseline": cmd_baseline, "bench": cmd_bench, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        if cfg.planted and args.command not in ("stage2", "eval"):
            raise ConfigError(f"--planted only applies to stage2 and eval, not {args.command}")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
