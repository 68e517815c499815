import os
import sys

import pytest
import torch

from refmatte.toy_sources import make_toy_sources

os.environ.setdefault("REFMATTE_DEVICE", "cpu")
torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def toy_sources(tmp_path_factory):
    """Small procedural source pool: 4 backgrounds, 18 foregrounds, 4 frames of 32x32."""
    root = tmp_path_factory.mktemp("sources")
    bg, fg = make_toy_sources(root, n_backgrounds=4, n_frames=4, bg_size=(32, 32), fg_size=20, seed=0)
    return bg, fg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
