import numpy as np
import pytest
import torch

from wsrtl.config import Config, ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(n_aus=3, width=0.0625, input_size=64, d_model=16, n_heads=2, ffn_dim=32,
                fused_channels=64, roi_size=4, disc_channels=64, gen_channels=64, flow_channels=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg() -> Config:
    cfg = Config(model=tiny_model_config())
    cfg.train.batch_size = 4
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0].split(".")[0])):
            terminalreporter.write_line(line)
