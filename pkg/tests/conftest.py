import numpy as np
import pytest
import torch

from smilegen import dataset as ds
from smilegen.checkpoint import ModelConfig

TINY_MODEL = dict(latent_dim=8, hidden=16, label_dim=4, K=3, T=6,
                  vae_channels=(4, 8, 8, 8), translator_channels=(4, 8, 8, 8, 8, 8), disc_channels=(4, 8, 8, 8))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_split():
    return ds.synthesize(ds.SynthConfig(num_identities=3, modes_per_class=3, T=6, seed=3))


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY_MODEL)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for r in reports
             if getattr(r, "when", None) == "call" for key, value in getattr(r, "user_properties", ()) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
