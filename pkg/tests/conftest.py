import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rgb_dir(tmp_path):
    """Directory with three small random RGB PNGs."""
    from illumrestore.imaging import save_image

    d = tmp_path / "rgb"
    d.mkdir()
    r = np.random.default_rng(7)
    for i in range(3):
        save_image(r.uniform(0.2, 1.0, (40, 48, 3)), d / f"img_{i}.png")
    return d


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
