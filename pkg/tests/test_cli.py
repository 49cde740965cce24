import shutil

import pytest

from dynperturb import harness
from dynperturb.cli import build_parser, main, resolve_config
from conftest import CONFIG_DIR


@pytest.fixture
def run_dir(small_run, tmp_path):
    cfg, _ = small_run
    shutil.copytree(harness.stage1_dir(cfg), tmp_path / "stage1")
    return tmp_path


def _cli(cmd, out, *extra):
    return main([cmd, "--config", str(CONFIG_DIR / "small.yaml"), "--out", str(out), *extra])


def test_overrides():
    args = build_parser().parse_args(["stage2", "--seed", "4", "--updates", "3", "--eval-steps", "2",
                                      "--out", "x"])
    cfg = resolve_config(args)
    assert (cfg.seed, cfg.model.seed, cfg.stage2.updates, cfg.stage2.eval_steps, cfg.out) == (4, 4, 3, 2, "x")


def test_pipeline(run_dir, capsys):
    assert _cli("stage2", run_dir) == 0
    assert "metrics=" in capsys.readouterr().out
    assert _cli("eval", run_dir) == 0
    assert "correction_rate" in capsys.readouterr().out
    assert (run_dir / "stage2" / "full" / "eval_heldout_final_summary.csv").exists()
    assert _cli("eval", run_dir, "--zero-mask", "--split", "train") == 0
    assert _cli("bench", run_dir) == 0
    assert _cli("sweep", run_dir, "--counts", "0", "4") == 0
    assert _cli("baseline", run_dir) == 0
    for name in ("timing_report.csv", "timing_report.png", "sweep.csv", "sweep.png", "static_baseline.csv"):
        assert (run_dir / name).stat().st_size > 0
    assert (run_dir / "timing_report.png").read_bytes()[:4] == b"\x89PNG"


def test_ablate_writes_chart(run_dir):
    assert _cli("ablate", run_dir, "--seeds", "0", "--updates", "1") == 0
    assert harness.read_table(run_dir / "ablation.csv")[0]["variant"] == "full"
    assert (run_dir / "ablation.png").exists()


def test_planted_cli(tmp_path, capsys):
    assert main(["stage2", "--planted", "--out", str(tmp_path), "--updates", "1"]) == 0
    assert "selection_rate=" in capsys.readouterr().out
    assert main(["eval", "--planted", "--out", str(tmp_path)]) == 0


def test_errors(tmp_path, capsys):
    assert main(["bench", "--out", str(tmp_path)]) == 2
    assert "stage1" in capsys.readouterr().err
    assert main(["stage1", "--planted", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.yaml").write_text("ppo: {nope: 1}\n")
    assert main(["stage1", "--config", str(tmp_path / "bad.yaml")]) == 2
    with pytest.raises(SystemExit):
        main(["stage2", "--variant", "bogus"])
