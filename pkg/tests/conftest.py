import os
import sys
from pathlib import Path

import pytest

# tests import the oracle module directly
sys.path.insert(0, str(Path(__file__).parent))

os.environ.setdefault("OMP_NUM_THREADS", "2")


@pytest.fixture(scope="session")
def torch_threads():
    import torch

    torch.set_num_threads(min(4, os.cpu_count() or 1))
    return torch


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset shared across tests."""
    from apamnet.synth import SynthConfig, write_synth_dataset

    root = tmp_path_factory.mktemp("tinyds")
    cfg = SynthConfig(n_images=48, image_edge=96, n_classes=3, seed=11)
    return write_synth_dataset(root / "data", cfg), cfg


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion verdicts where capture cannot hide them."""
    log = getattr(sys.modules.get("test_acceptance"), "CRITERION_LOG", None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(log):
        terminalreporter.write_line(line)
