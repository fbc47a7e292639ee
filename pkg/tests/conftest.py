import numpy as np
import pytest
from hypothesis import settings

from pedscl.model import Architecture, init_params

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_arch():
    return Architecture(grid=4, n_social=2, vel_width=3, occ_width=4, soc_width=3, hidden=5, pred_steps=3)


@pytest.fixture
def small_params(small_arch):
    return init_params(small_arch, np.random.default_rng(0))


def random_sequence(arch, rng, length=4, agent_id=0, scale=1.0):
    """An ExampleSequence with random inputs, targets and initial state."""
    from pedscl.core import ExampleSequence

    P = arch.pred_steps
    target = scale * rng.normal(size=(length, P, 2))
    position = rng.normal(size=(length, 2))
    return ExampleSequence(
        ego=rng.normal(size=(length, 2)),
        occ=rng.random((length, arch.grid, arch.grid)) < 0.3,
        social=rng.normal(size=(length, arch.n_social, 4)),
        target=target,
        position=position,
        future=position[:, None, :] + np.cumsum(target, axis=1) * 0.2,
        agent_id=agent_id,
        ticks=np.arange(length),
        h0=0.5 * rng.normal(size=arch.hidden),
        c0=0.5 * rng.normal(size=arch.hidden),
    )


@pytest.fixture
def make_sequence():
    return random_sequence


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Log one acceptance line (printed in the terminal summary) and assert it."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
