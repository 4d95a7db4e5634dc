"""Shared fixtures. Expensive builds are session-scoped so every test file reuses them."""
import time

import numpy as np
import pytest

from newton_sic.assembly import build_composite_surface, composite_from_pairs
from newton_sic.domain import make_domain
from newton_sic.elementary import ElementaryFunction, PairArrays, make_elementary_pair

# desk parameters of the end-to-end runs
DESK = dict(M=1.0, epsilon=0.3, m=4, n=2)


@pytest.fixture(scope="session")
def disc():
    return make_domain({"disc": {"center": [0.0, 0.0], "radius": 1.0}})


@pytest.fixture(scope="session")
def square():
    return make_domain({"polygon": [[0, 0], [1, 0], [1, 1], [0, 1]]})


@pytest.fixture(scope="session")
def wedge_pair():
    """A nonnegative pair at h = 1: O at the origin, base x = 1, half-width 1/4."""
    return make_elementary_pair([0, 0], [1, -0.25], [1, 0.25], 0.5)


@pytest.fixture(scope="session")
def wedge_surface(wedge_pair):
    D = make_domain({"polygon": [wedge_pair.O, wedge_pair.A, wedge_pair.B]})
    return composite_from_pairs(D, 1.0, PairArrays.from_pairs([wedge_pair]), flat_fill=False)


@pytest.fixture(scope="session")
def wedge_function(wedge_pair):
    return ElementaryFunction(wedge_pair, 1.0)


@pytest.fixture(scope="session")
def small_disc():
    return make_domain({"disc": {"center": [0.0, 0.0], "radius": 0.4}})


@pytest.fixture(scope="session")
def small_surface(small_disc):
    """A quick composite surface (a few seconds) for unit tests."""
    return build_composite_surface(small_disc, 1.0, 0.3, verify=False)


@pytest.fixture(scope="session")
def desk_surface(disc):
    """The composite surface on the unit disc at the desk parameters (about a minute)."""
    return build_composite_surface(disc, DESK["M"], DESK["epsilon"], DESK["m"], DESK["n"], verify=False)


@pytest.fixture(scope="session")
def half_surface(disc):
    """Second rung of the parameter ladder: epsilon halved (about four minutes)."""
    return build_composite_surface(disc, DESK["M"], DESK["epsilon"] / 2, DESK["m"], DESK["n"], verify=False)


@pytest.fixture(scope="session")
def dic_bodies(disc):
    """DIC bodies on the unit disc, M = 1, along the epsilon ladder; built lazily."""
    from newton_sic.dic_body import build_dic_body
    cache = {}

    def get(eps):
        if eps not in cache:
            t0 = time.perf_counter()
            cache[eps] = build_dic_body(disc, 1.0, eps)
            get.seconds[eps] = time.perf_counter() - t0
        return cache[eps]
    get.seconds = {}
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """criterion number -> one-line PASS/FAIL summary, printed at the end of the run."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
