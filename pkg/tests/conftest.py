import numpy as np
import pytest
import scipy.sparse as sp

from lsic.data import DAY_SECONDS, build_dataset, label_feedback
from lsic.mf import random_factor_store
from lsic.rnn import SessionInputs, session_weights

T0 = 900_000_000


def random_inputs(num_users, num_movies, num_sessions, seed=0, density=0.5):
    """Random per-session rating matrices wrapped as SessionInputs."""
    rng = np.random.default_rng(seed)
    user, movie = [], []
    for _ in range(num_sessions):
        mask = rng.random((num_users, num_movies)) < density
        r = np.where(mask, rng.integers(1, 6, size=mask.shape), 0).astype(float)
        m = sp.csr_matrix(r)
        user.append(session_weights(m))
        movie.append(session_weights(m.T.tocsr()))
    return SessionInputs(tuple(user), tuple(movie))


def toy_factors(num_users=3, num_movies=3, d=3, seed=0, scale=0.5):
    return random_factor_store(num_users, num_movies, d, seed=seed, scale=scale)


def events(rows):
    """rows of (raw_user, raw_movie, rating, day) -> labeled dataset."""
    u, m, r, d = zip(*rows)
    ts = [T0 + int(x * DAY_SECONDS) for x in d]
    return label_feedback(build_dataset(u, m, r, ts), "movielens")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one pass/fail line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
