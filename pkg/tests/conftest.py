import time

import numpy as np
import pytest

from advpath import data as D
from advpath import model as M

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def desk_data():
    """Default synthetic set split 70/30, stratified."""
    ds = D.generate(D.SynthConfig())
    train, test = D.split(ds, 0.7, seed=0)
    return ds, train, test


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """The default desk model trained with the default config on the training split."""
    _, train, _ = desk_data
    t0 = time.perf_counter()
    model, snaps, losses = M.train(M.build_model(M.ModelSpec(), seed=0), train, M.TrainConfig())
    return {"model": model, "snapshots": snaps, "losses": losses, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def trained(desk_run):
    return desk_run["model"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
