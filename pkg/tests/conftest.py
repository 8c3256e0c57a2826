from __future__ import annotations

import sys
import warnings

import pytest

from avan.synthgen import GenParams, make_world

SMALL = dict(shape=(36, 112, 112), n_neurites=40, n_synapses=20)


def small_params(**kw) -> GenParams:
    return GenParams(**{**SMALL, **kw})


@pytest.fixture(scope="session")
def small_world():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return make_world(small_params(seed=5))


@pytest.fixture(scope="session")
def polyadic_world():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return make_world(small_params(seed=6, max_post_partners=3, n_synapses=25))


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
