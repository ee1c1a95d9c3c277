import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from peerfl import neuralnet as nn  # noqa: E402
from peerfl._backend import available, get_kernels  # noqa: E402


@pytest.fixture(params=available())
def kernel_backend(request, monkeypatch):
    """Run a test once per importable kernel implementation."""
    monkeypatch.setattr(nn, "kernels", get_kernels(request.param))
    return request.param


def random_params(arch, rng, scale=0.5):
    return nn.ParamVector(arch, rng.uniform(-scale, scale, arch.n_params))


def random_window(rng, T, m=2):
    return np.eye(m)[rng.integers(0, m, T)], rng.integers(0, m, T)


def pytest_collection_modifyitems(config, items):
    gates = {"slow": "PEERFL_SLOW", "paper_full": "PEERFL_PAPER_FULL"}
    for item in items:
        for marker, env in gates.items():
            if marker in item.keywords and os.environ.get(env) != "1":
                item.add_marker(pytest.mark.skip(reason=f"set {env}=1 to run"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    # numbered criteria first, then named properties
    for n in sorted(ACCEPTANCE_LINES, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
