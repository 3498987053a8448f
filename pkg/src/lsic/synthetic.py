"""Small synthetic rating worlds with planted structure, used for the
end-to-end checks that real data cannot provide (known ground truth, poster
features, temporal drift)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import DAY_SECONDS, RatingDataset, build_dataset, write_movielens
from .nn import make_rng

BASE_TIME = 883_612_800  # 1998-01-01
SESSION_DAYS = 30


@dataclass
class World:
    dataset: RatingDataset
    liked: Dict[int, np.ndarray]          # raw user id -> raw movie ids the user likes
    content: Optional[Dict[int, np.ndarray]] = None  # raw movie id -> feature vector
    train_end: int = 0                    # last timestamp of the training sessions

    def write(self, dest) -> List[Path]:
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        paths = [dest / "ratings.tsv"]
        write_movielens(self.dataset, paths[0])
        if self.content is not None:
            paths.append(dest / "content.txt")
            with open(paths[1], "w", encoding="utf-8") as fh:
                for m in sorted(self.content):
                    fh.write(f"{m} " + " ".join(repr(float(x)) for x in self.content[m]) + "\n")
        (dest / "train_end.txt").write_text(f"{self.train_end}\n", encoding="utf-8")
        paths.append(dest / "train_end.txt")
        return paths


class _Log:
    def __init__(self):
        self.rows = ([], [], [], [])

    def add(self, user, movie, rating, ts):
        for col, v in zip(self.rows, (user, movie, rating, ts)):
            col.append(int(v))

    def build(self) -> RatingDataset:
        return build_dataset(*self.rows)


def _ts(session: int, rng: np.random.Generator) -> int:
    return BASE_TIME + session * SESSION_DAYS * DAY_SECONDS + int(rng.integers(1, SESSION_DAYS * DAY_SECONDS - 1))


def planted_world(seed: int = 0, num_users: int = 10, num_movies: int = 20, num_sessions: int = 6,
                  groups: int = 2, train_liked_per_session: int = 1, train_disliked_per_session: int = 1,
                  final_liked: int = 4, final_disliked: int = 1) -> World:
    """Users and movies fall into ``groups`` clusters; a user likes (4-5
    stars) exactly the movies of its own cluster and dislikes (1-2 stars) the
    rest. The last session is held out."""
    rng = make_rng(seed)
    log = _Log()
    movie_group = np.arange(num_movies) % groups
    user_group = np.arange(num_users) % groups
    liked = {}
    for u in range(num_users):
        like = rng.permutation(np.flatnonzero(movie_group == user_group[u]))
        dislike = rng.permutation(np.flatnonzero(movie_group != user_group[u]))
        liked[u + 1] = np.sort(like) + 1
        li = di = 0
        for s in range(num_sessions):
            n_like = final_liked if s == num_sessions - 1 else train_liked_per_session
            n_dis = final_disliked if s == num_sessions - 1 else train_disliked_per_session
            for _ in range(n_like):
                if li < len(like):
                    log.add(u + 1, like[li] + 1, rng.integers(4, 6), _ts(s, rng))
                    li += 1
            for _ in range(n_dis):
                if di < len(dislike):
                    log.add(u + 1, dislike[di] + 1, rng.integers(1, 3), _ts(s, rng))
                    di += 1
    train_end = BASE_TIME + (num_sessions - 1) * SESSION_DAYS * DAY_SECONDS - 1
    return World(log.build(), liked, None, train_end)


def content_world(seed: int = 0, num_users: int = 60, num_movies: int = 300, genres: int = 3,
                  train_sessions: int = 3, liked_per_session: int = 4, disliked_per_session: int = 2,
                  final_liked: int = 20, final_disliked: int = 5, feature_noise: float = 0.1) -> World:
    """Preferences follow a movie genre that the content features reveal.

    The catalogue is large next to the rating volume: a movie gets about
    two 5-star training ratings on average, so its factors say little about
    genre.
    Each user rates 5 stars to unseen movies of its own genre and 1 star to
    unseen others, a few per session. The held-out session asks for more
    unseen movies of the user's genre, which only the features can point to.
    """
    rng = make_rng(seed)
    log = _Log()
    movie_genre = np.arange(num_movies) % genres
    user_genre = np.arange(num_users) % genres
    seen = [set() for _ in range(num_users)]

    def unseen(u, same):
        pool = np.flatnonzero((movie_genre == user_genre[u]) == same)
        return [m for m in pool if m not in seen[u]]

    for s in range(train_sessions):
        for u in range(num_users):
            for m in rng.choice(unseen(u, True), liked_per_session, replace=False):
                log.add(u + 1, m + 1, 5, _ts(s, rng))
                seen[u].add(int(m))
            for m in rng.choice(unseen(u, False), disliked_per_session, replace=False):
                log.add(u + 1, m + 1, 1, _ts(s, rng))
                seen[u].add(int(m))
    for u in range(num_users):
        for m in rng.permutation(unseen(u, True))[:final_liked]:
            log.add(u + 1, m + 1, 5, _ts(train_sessions, rng))
        for m in rng.permutation(unseen(u, False))[:final_disliked]:
            log.add(u + 1, m + 1, 1, _ts(train_sessions, rng))
    feats = {}
    for m in range(num_movies):
        vec = rng.normal(0.0, feature_noise, genres)
        vec[movie_genre[m]] += 1.0
        feats[m + 1] = vec
    liked = {u + 1: np.flatnonzero(movie_genre == user_genre[u]) + 1 for u in range(num_users)}
    train_end = BASE_TIME + train_sessions * SESSION_DAYS * DAY_SECONDS - 1
    return World(log.build(), liked, feats, train_end)


def drift_world(seed: int = 0, num_users: int = 40, num_movies: int = 60, groups: int = 3,
                num_sessions: int = 8, ratings_per_session: int = 3) -> World:
    """Each user's taste moves from one cluster to the next halfway through
    the log, so recent sessions matter more than the long-term profile."""
    rng = make_rng(seed)
    log = _Log()
    movie_group = np.arange(num_movies) % groups
    start = np.arange(num_users) % groups
    switch = num_sessions // 2
    liked = {}
    for u in range(num_users):
        rated = set()
        for s in range(num_sessions):
            g = start[u] if s < switch else (start[u] + 1) % groups
            pool = [m for m in np.flatnonzero(movie_group == g) if m not in rated]
            for m in rng.permutation(pool)[:ratings_per_session]:
                log.add(u + 1, m + 1, rng.integers(4, 6), _ts(s, rng))
                rated.add(int(m))
            bad = [m for m in np.flatnonzero(movie_group != g) if m not in rated]
            for m in rng.permutation(bad)[:1]:
                log.add(u + 1, m + 1, rng.integers(1, 3), _ts(s, rng))
                rated.add(int(m))
        liked[u + 1] = np.flatnonzero(movie_group == (start[u] + 1) % groups) + 1
    train_end = BASE_TIME + (num_sessions - 1) * SESSION_DAYS * DAY_SECONDS - 1
    return World(log.build(), liked, None, train_end)


WORLDS = {"planted": planted_world, "content": content_world, "drift": drift_world}


def write_world(name: str, dest, seed: int = 0) -> List[Path]:
    try:
        make = WORLDS[name]
    except KeyError:
        raise ValueError(f"unknown synthetic world {name!r}; choose from {', '.join(WORLDS)}") from None
    return make(seed).write(dest)
