import numpy as np
import pytest

from normssl.config import preset

# Tiny network for structural tests: two stages, one block each, 8x8 inputs.
TINY = dict(widths="8,16", blocks_per_stage=1, hidden_dim=16, proj_dim=8, image_size=8,
            n_train=32, n_test=32, batch_size=8, epochs=2, eval_size=16)


def tiny(name="vanilla-bn", **overrides):
    return preset(name, **{**TINY, **overrides})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
