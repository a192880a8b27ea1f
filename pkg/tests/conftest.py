import numpy as np
import pytest

from hola.arena import ArenaConfig, WorldState, new_world
from hola.hyfog import HyFoG


@pytest.fixture
def config():
    return ArenaConfig()


@pytest.fixture
def open_config():
    """Default geometry without obstacles, for hand-built scenes."""
    return ArenaConfig(obstacles=())


def place(config, positions, headings=None, active=None, tick=0) -> WorldState:
    """World with drones at explicit positions (pursuers first)."""
    world = new_world(config, 0)
    n = config.num_drones
    world.positions = np.array(positions, dtype=float)
    world.headings = np.zeros(n) if headings is None else np.array(headings, dtype=float)
    world.active = np.ones(n, bool) if active is None else np.array(active, bool)
    world.tick = tick
    return world


@pytest.fixture
def worked_example():
    return HyFoG.from_edges(3, {(1, 2, 3): 5.0, (1, 2, 4): 3.0, (1, 3, 4): 2.0, (2, 3, 4): 4.0})


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
