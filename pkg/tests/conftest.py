import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mpdr import losses
from mpdr.data import SynthConfig, generate

settings.register_profile(
    "mpdr", deadline=None, max_examples=200, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mpdr")


@pytest.fixture(params=losses.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    previous = losses.set_backend(request.param)
    yield request.param
    losses.set_backend(previous)


def score_lists(min_size=1, max_size=8, low=-2.0, high=2.0):
    return st.lists(st.floats(low, high, allow_nan=False, allow_infinity=False),
                    min_size=min_size, max_size=max_size)


@st.composite
def score_groups(draw, max_pos=8, max_neg=16, low=-2.0, high=2.0):
    pos = draw(score_lists(1, max_pos, low, high))
    neg = draw(score_lists(1, max_neg, low, high))
    return losses.ScoreGroup(pos, neg)


def random_groups(n, seed, max_pos=8, max_neg=16, low=-2.0, high=2.0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p = int(rng.integers(1, max_pos + 1))
        q = int(rng.integers(1, max_neg + 1))
        yield losses.ScoreGroup(rng.uniform(low, high, p), rng.uniform(low, high, q))


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SynthConfig(num_queries=30, corpus_size=800, seed=11))


@pytest.fixture(scope="session")
def desk_corpus():
    return generate(SynthConfig())


#: one verdict line per acceptance check, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
