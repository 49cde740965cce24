import dataclasses
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dynperturb.taskgen import PretrainSettings, generate_fact_world, make_bad_cases, train_world_model
from dynperturb.tinylm import ModelConfig, TinyLM, TrainSettings

torch.set_num_threads(1)

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=32, context_len=8, n_layers=2, d_model=16, n_heads=2, d_ff=16, seed=3)


@pytest.fixture
def small_model(small_config):
    return TinyLM(small_config)


@pytest.fixture(scope="session")
def toy_world():
    """A quickly trained 2-layer model on a small corrupted world (shared across tests)."""
    world = generate_fact_world(seed=5, n_subjects=12, n_relations=2, corruption_rate=0.25, n_answers=8,
                                n_classes=3)
    cfg = ModelConfig(vocab_size=32, context_len=8, n_layers=2, d_model=32, n_heads=2, d_ff=32, seed=5)
    pre = PretrainSettings(clean=TrainSettings(steps=600, lr=3e-3),
                           plant=TrainSettings(steps=2000, lr=1e-2, betas=(0.9, 0.999)),
                           reserved=(1, 16, 32))
    res = train_world_model(world, cfg, pre)
    cases = make_bad_cases(res.model, world)
    return world, res, cases


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """Small run config plus its stage-1 artifacts (built once per session)."""
    from dynperturb import harness
    from dynperturb.config import load_config

    out = tmp_path_factory.mktemp("small")
    cfg = dataclasses.replace(load_config(CONFIG_DIR / "small.yaml"), out=str(out))
    return cfg, harness.run_stage1(cfg)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Register one acceptance line: ``record("A1", passed, detail)``."""

    def _rec(key: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (bool(passed), detail)
        return passed

    return _rec


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
