import numpy as np
import pytest

from splitpriv.data import SynthSpec, synth_splits
from splitpriv.model import PLMConfig, build_plm


@pytest.fixture(scope="session")
def small_splits():
    """A reduced synthetic corpus for fast protocol tests."""
    spec = SynthSpec(sizes={"train": 64, "dev": 32, "test": 16}, markers_per_attr=4)
    return synth_splits(spec)


@pytest.fixture(scope="session")
def tiny_config():
    return PLMConfig(vocab_size=2000, embed_dim=16, num_blocks=3, num_heads=2, ffn_dim=24, max_seq_len=32,
                     num_classes=2, seed=3)


@pytest.fixture()
def tiny_plm(tiny_config):
    return build_plm(tiny_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
