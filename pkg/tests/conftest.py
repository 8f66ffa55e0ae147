import numpy as np
import pytest
import torch

from hcmt.datagen import ScenarioSpec, generate_dataset, simulate
from hcmt.dataset import Dataset
from hcmt.mesh import Trajectory

torch.set_num_threads(1)

SHORT = ScenarioSpec(steps=24)


@pytest.fixture(scope="session")
def impact_trajectory() -> Trajectory:
    top, positions, stress, _, _ = simulate(SHORT, np.random.default_rng([7, 0]))
    return Trajectory(top, positions, stress, SHORT.dt)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("data") / "small"
    generate_dataset(root, 3, 1, 1, seed=3, preset=SHORT)
    return Dataset.open(root)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
