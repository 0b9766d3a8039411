import sys

import numpy as np
import pytest
import torch

from vqfill.dataset import DatasetSpec, generate_dataset
from vqfill.model import ArchSpec
from vqfill.solver import SolverParams

torch.set_num_threads(1)

TINY_ARCH = ArchSpec(grid=16, ch=8, ch_mult=(1, 2), z_dim=4, codebook_size=16, disc_ndf=8, disc_layers=2)


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(num_runs=3, train_runs=2, duration=0.25, sample_interval=1 / 32,
                       sim_grid=32, out_grid=16, base_seed=11, solver=SolverParams(dt=1 / 256))


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS):
            terminalreporter.write_line(line)
