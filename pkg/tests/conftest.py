import datetime as dt
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from epicoord.scenario import EpiParams, MobilitySchedule, RegionId, ScenarioConfig  # noqa: E402

START = dt.date(2021, 1, 4)  # a Monday


def make_config(n_regions=2, n_days=63, *, flows=None, rates=None, initial=None, warmup=21, horizon=6, **kw):
    codes = tuple(f"R{k}" for k in range(n_regions))
    if initial is None:
        initial = np.zeros((n_regions, 6))
        initial[:, 0] = 10_000.0 - 30.0
        initial[:, 1] = 20.0
        initial[:, 2] = 10.0
    if rates is None:
        rates = dict(beta_I=0.3, beta_Q=0.05, sigma=0.2, delta=0.1, gamma=0.1, mu=0.01)
    if flows is None:
        flows = np.full((n_days, n_regions, n_regions), 50.0)
        for t in range(n_days):
            np.fill_diagonal(flows[t], 0.0)
    return ScenarioConfig(
        regions=tuple(RegionId(c, k) for k, c in enumerate(codes)),
        initial=np.asarray(initial, dtype=float),
        params=EpiParams.constant(n_regions, **rates),
        mobility=MobilitySchedule(START, codes, np.asarray(flows, dtype=float)),
        start_date=START,
        end_date=START + dt.timedelta(days=n_days),
        horizon_weeks=horizon,
        warmup_days=warmup,
        **kw,
    )


@pytest.fixture
def small_config():
    return make_config()


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    from epicoord import kernels

    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
