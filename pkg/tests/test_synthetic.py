import numpy as np
import pytest

from lsic.data import DAY_SECONDS, load_content_features, parse_movielens
from lsic.synthetic import BASE_TIME, SESSION_DAYS, content_world, drift_world, planted_world, write_world


def sessions_of(ds):
    return (ds.timestamps - BASE_TIME) // (SESSION_DAYS * DAY_SECONDS)


def test_planted_world_shape_and_separable_positives():
    w = planted_world(0)
    ds = w.dataset
    assert (ds.num_users, ds.num_movies) == (10, 20)
    assert sessions_of(ds).max() == 5
    for u, m, r in zip(ds.user_ids[ds.users], ds.movie_ids[ds.movies], ds.ratings):
        assert (r >= 4) == (m in w.liked[u])


def test_content_world_heldout_is_unseen_same_genre():
    w = content_world(3)
    ds = w.dataset
    genre = {m: int(np.argmax(v)) for m, v in w.content.items()}
    users, movies = ds.user_ids[ds.users], ds.movie_ids[ds.movies]
    train = ds.timestamps <= w.train_end
    seen = {}
    for u, m in zip(users[train], movies[train]):
        seen.setdefault(u, set()).add(m)
    for u, m, r in zip(users[~train], movies[~train], ds.ratings[~train]):
        assert m not in seen[u]
        same = genre[m] == genre[next(iter(w.liked[u]))]
        assert (r == 5) == same
    # thinly rated: a few 5-star training ratings per movie
    likes = np.bincount(ds.movies[train & (ds.ratings == 5)], minlength=ds.num_movies)
    assert likes.mean() == pytest.approx(60 * 12 / 300)


def test_drift_world_switches_cluster():
    w = drift_world(0, num_users=3, num_movies=30, groups=3, num_sessions=8)
    ds = w.dataset
    s = sessions_of(ds)
    group = (ds.movie_ids[ds.movies] - 1) % 3
    for u in range(ds.num_users):
        liked = (ds.users == u) & (ds.ratings >= 4)
        early, late = set(group[liked & (s < 4)]), set(group[liked & (s >= 4)])
        assert len(early) == 1 and len(late) == 1 and early != late


def test_written_worlds_parse_back(tmp_path):
    ratings, features, end = write_world("content", tmp_path, seed=1)
    ds = parse_movielens(ratings)
    assert len(ds) == len(content_world(1).dataset)
    assert load_content_features(features, ds).dim == 3
    assert int(end.read_text()) == content_world(1).train_end


def test_unknown_world():
    with pytest.raises(ValueError):
        write_world("nope", "/tmp/unused")
