"""Rating logs: parsing, positive/negative labelling, time-based splits,
session discretisation and poster-feature loading."""
from __future__ import annotations

import calendar
import datetime as _dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, FormatError, ParseError, SplitError
from .nn import make_rng

DAY_SECONDS = 86400

FEEDBACK_SCHEMES = {
    "netflix": 5.0,    # only 5-star ratings are positive
    "movielens": 4.0,  # 4 and 5 stars are positive
}


@dataclass(frozen=True)
class RatingEvent:
    user_id: int
    movie_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Column-oriented, timestamp-sorted rating events.

    ``user_ids`` / ``movie_ids`` hold the raw external id of each dense index,
    so ``user_ids[users[k]]`` is the raw user of event ``k``.
    """

    users: np.ndarray
    movies: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    movie_ids: np.ndarray
    positive: Optional[np.ndarray] = None
    _user_index: Dict[int, int] = field(default=None, repr=False)  # type: ignore[assignment]
    _movie_index: Dict[int, int] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.movies) == len(self.ratings) == len(self.timestamps) == n):
            raise DataError("event columns have different lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= len(self.user_ids):
                raise DataError("user index out of range")
            if self.movies.min() < 0 or self.movies.max() >= len(self.movie_ids):
                raise DataError("movie index out of range")
            if np.any(np.diff(self.timestamps) < 0):
                raise DataError("events are not sorted by timestamp")
        if self.positive is not None and len(self.positive) != n:
            raise DataError("label column has wrong length")
        if self._user_index is None:
            object.__setattr__(self, "_user_index", {int(r): i for i, r in enumerate(self.user_ids)})
        if self._movie_index is None:
            object.__setattr__(self, "_movie_index", {int(r): i for i, r in enumerate(self.movie_ids)})

    def __len__(self) -> int:
        return len(self.users)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_movies(self) -> int:
        return len(self.movie_ids)

    @property
    def is_labeled(self) -> bool:
        return self.positive is not None

    def user_index(self, raw: int) -> int:
        return self._user_index[int(raw)]

    def movie_index(self, raw: int) -> int:
        return self._movie_index[int(raw)]

    def has_user(self, raw: int) -> bool:
        return int(raw) in self._user_index

    def has_movie(self, raw: int) -> bool:
        return int(raw) in self._movie_index

    def events(self) -> Iterator[RatingEvent]:
        for u, m, r, t in zip(self.users, self.movies, self.ratings, self.timestamps):
            yield RatingEvent(int(u), int(m), float(r), int(t))

    def subset(self, mask: np.ndarray) -> "RatingDataset":
        """Events selected by a boolean mask, sharing the id maps."""
        return replace(
            self,
            users=self.users[mask],
            movies=self.movies[mask],
            ratings=self.ratings[mask],
            timestamps=self.timestamps[mask],
            positive=None if self.positive is None else self.positive[mask],
        )

    def label_counts(self) -> Tuple[int, int]:
        if self.positive is None:
            raise DataError("dataset is not labeled")
        pos = int(self.positive.sum())
        return pos, len(self) - pos


def build_dataset(raw_users, raw_movies, ratings, timestamps) -> RatingDataset:
    """Dense re-index (sorted raw ids) and sort events by time."""
    raw_users = np.asarray(raw_users, dtype=np.int64)
    raw_movies = np.asarray(raw_movies, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if len(raw_users) == 0:
        raise DataError("no rating events")
    if np.any((ratings < 1) | (ratings > 5) | (ratings != np.round(ratings))):
        raise DataError("ratings must be integers in 1..5")
    if np.any(timestamps <= 0):
        raise DataError("timestamps must be positive")
    user_ids, users = np.unique(raw_users, return_inverse=True)
    movie_ids, movies = np.unique(raw_movies, return_inverse=True)
    order = np.lexsort((movies, users, timestamps))
    users, movies = users[order], movies[order]
    ratings, timestamps = ratings[order], timestamps[order]
    same = (np.diff(timestamps) == 0) & (np.diff(users) == 0) & (np.diff(movies) == 0)
    if np.any(same):
        k = int(np.flatnonzero(same)[0])
        raise DataError(
            f"duplicate event (user {user_ids[users[k]]}, movie {movie_ids[movies[k]]}, "
            f"timestamp {timestamps[k]})"
        )
    return RatingDataset(users.astype(np.int64), movies.astype(np.int64), ratings, timestamps,
                         user_ids, movie_ids)


def parse_movielens(path) -> RatingDataset:
    """Parse a tab-separated ``user item rating timestamp`` file (u.data)."""
    path = Path(path)
    cols: List[List[int]] = [[], [], [], []]
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(path, line_no, f"expected 4 tab-separated fields, got {len(fields)}")
            try:
                values = [int(f) for f in fields]
            except ValueError:
                raise ParseError(path, line_no, f"non-integer field in {line!r}") from None
            for col, v in zip(cols, values):
                col.append(v)
    if not cols[0]:
        raise DataError(f"{path}: empty rating file")
    return build_dataset(*cols)


def parse_netflix(path) -> RatingDataset:
    """Parse the Netflix prize per-movie format (``<movie>:`` headers followed
    by ``user,rating,YYYY-MM-DD`` lines)."""
    path = Path(path)
    cols: List[List[int]] = [[], [], [], []]
    movie = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.endswith(":"):
                try:
                    movie = int(line[:-1])
                except ValueError:
                    raise ParseError(path, line_no, f"bad movie header {line!r}") from None
                continue
            if movie is None:
                raise ParseError(path, line_no, "rating line before any movie header")
            fields = line.split(",")
            if len(fields) != 3:
                raise ParseError(path, line_no, f"expected user,rating,date; got {line!r}")
            try:
                user, rating = int(fields[0]), int(fields[1])
                day = _dt.date.fromisoformat(fields[2])
            except ValueError:
                raise ParseError(path, line_no, f"malformed rating line {line!r}") from None
            cols[0].append(user)
            cols[1].append(movie)
            cols[2].append(rating)
            cols[3].append(calendar.timegm(day.timetuple()))
    if not cols[0]:
        raise DataError(f"{path}: empty rating file")
    return build_dataset(*cols)


def write_movielens(ds: RatingDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, m, r, t in zip(ds.users, ds.movies, ds.ratings, ds.timestamps):
            fh.write(f"{ds.user_ids[u]}\t{ds.movie_ids[m]}\t{int(r)}\t{t}\n")


def label_feedback(ds: RatingDataset, scheme: str) -> RatingDataset:
    try:
        threshold = FEEDBACK_SCHEMES[scheme]
    except KeyError:
        raise ConfigError(
            f"unknown feedback scheme {scheme!r}; expected one of {sorted(FEEDBACK_SCHEMES)}"
        ) from None
    return replace(ds, positive=ds.ratings >= threshold)


# --- splits ---------------------------------------------------------------

TRAIN, VALIDATION, TEST, COLD, OUT_OF_RANGE = 0, 1, 2, 3, 4
PARTITION_NAMES = ("train", "validation", "test", "cold", "out_of_range")


@dataclass(frozen=True)
class SplitSpec:
    train_end: int
    test_end: int
    validation_fraction: float = 0.5
    session_length_days: int = 30

    def __post_init__(self):
        if not self.train_end < self.test_end:
            raise SplitError("train_end must precede test_end")
        if not 0.0 < self.validation_fraction < 1.0:
            raise SplitError("validation_fraction must lie in (0, 1)")
        if self.session_length_days < 1:
            raise SplitError("session_length_days must be >= 1")


@dataclass(frozen=True, eq=False)
class Split:
    train: RatingDataset
    validation: RatingDataset
    test: RatingDataset
    assignment: np.ndarray  # partition code per input event

    def summary(self) -> Dict[str, int]:
        return {name: int((self.assignment == code).sum()) for code, name in enumerate(PARTITION_NAMES)}


def time_split(ds: RatingDataset, spec: SplitSpec, rng_seed: int) -> Split:
    """Train on events up to ``train_end``; randomly split the following
    interval into validation/test and drop entities unseen in training."""
    if len(ds) == 0:
        raise SplitError("cannot split an empty dataset")
    ts = ds.timestamps
    assignment = np.full(len(ds), OUT_OF_RANGE, dtype=np.int8)
    train_mask = ts <= spec.train_end
    later = (ts > spec.train_end) & (ts <= spec.test_end)
    if not train_mask.any():
        raise SplitError("training partition is empty")
    assignment[train_mask] = TRAIN
    later_idx = np.flatnonzero(later)
    draws = make_rng(rng_seed).random(len(later_idx))
    assignment[later_idx] = np.where(draws < spec.validation_fraction, VALIDATION, TEST)

    known_users = np.zeros(ds.num_users, dtype=bool)
    known_movies = np.zeros(ds.num_movies, dtype=bool)
    known_users[ds.users[train_mask]] = True
    known_movies[ds.movies[train_mask]] = True
    cold = later & ~(known_users[ds.users] & known_movies[ds.movies])
    assignment[cold] = COLD

    if not (assignment == TEST).any():
        raise SplitError("test partition is empty")
    return Split(
        train=ds.subset(assignment == TRAIN),
        validation=ds.subset(assignment == VALIDATION),
        test=ds.subset(assignment == TEST),
        assignment=assignment,
    )


def write_split_manifest(ds: RatingDataset, split: Split, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\tmovie\ttimestamp\tpartition\n")
        for u, m, t, a in zip(ds.users, ds.movies, ds.timestamps, split.assignment):
            fh.write(f"{ds.user_ids[u]}\t{ds.movie_ids[m]}\t{t}\t{PARTITION_NAMES[a]}\n")


def resolve_time(value, ds: RatingDataset) -> int:
    """Accept epoch seconds, an ISO date, ``max`` or ``auto:<q>`` (the
    timestamp at event quantile q)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    text = str(value).strip()
    if text == "max":
        return int(ds.timestamps[-1])
    if text.startswith("auto:"):
        q = float(text[5:])
        if not 0 < q < 1:
            raise ConfigError(f"quantile out of range in {text!r}")
        k = min(len(ds) - 1, max(0, int(math.floor(q * len(ds))) - 1))
        return int(ds.timestamps[k])
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        day = _dt.date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"cannot interpret time value {text!r}") from None
    return calendar.timegm(day.timetuple())


# --- sessions -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SessionizedDataset:
    """Per-session sparse rating vectors for both sides.

    ``user_sessions[t]`` is a U x M CSR matrix of ratings in session t and
    ``movie_sessions[t]`` its M x U transpose.
    """

    train: RatingDataset
    start: int
    session_seconds: int
    session_index: np.ndarray
    user_sessions: Tuple[sp.csr_matrix, ...]
    movie_sessions: Tuple[sp.csr_matrix, ...]

    @property
    def num_sessions(self) -> int:
        return len(self.user_sessions)

    @property
    def positive(self) -> Optional[np.ndarray]:
        return self.train.positive

    def session_of(self, timestamp) -> np.ndarray:
        return (np.asarray(timestamp, dtype=np.int64) - self.start) // self.session_seconds

    def to_events(self) -> List[Tuple[int, int, float, int]]:
        """(user, movie, rating, session) tuples recovered from the vectors."""
        out = []
        for t, mat in enumerate(self.user_sessions):
            coo = mat.tocoo()
            out.extend(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist(), [t] * coo.nnz))
        return sorted(out)


def sessionize(train: RatingDataset, session_length_days: int = 30,
               start: Optional[int] = None) -> SessionizedDataset:
    if session_length_days < 1:
        raise DataError("session_length_days must be >= 1")
    if len(train) == 0:
        raise DataError("cannot sessionize an empty dataset")
    seconds = int(session_length_days) * DAY_SECONDS
    start = int(train.timestamps[0]) if start is None else int(start)
    index = (train.timestamps - start) // seconds
    if index.min() < 0:
        raise DataError("event precedes the session origin")
    T = int(index.max()) + 1
    U, M = train.num_users, train.num_movies
    user_sessions, movie_sessions = [], []
    for t in range(T):
        sel = np.flatnonzero(index == t)
        # a repeated (user, movie) pair inside one session keeps its latest rating
        keys = train.users[sel] * M + train.movies[sel]
        _, last = np.unique(keys[::-1], return_index=True)
        sel = sel[len(sel) - 1 - last]
        mat = sp.csr_matrix((train.ratings[sel], (train.users[sel], train.movies[sel])), shape=(U, M))
        mat.sort_indices()
        user_sessions.append(mat)
        tmat = mat.T.tocsr()
        tmat.sort_indices()
        movie_sessions.append(tmat)
    return SessionizedDataset(train, start, seconds, index.astype(np.int64),
                              tuple(user_sessions), tuple(movie_sessions))


# --- poster features ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ContentFeatures:
    matrix: np.ndarray        # M x F, zero rows for movies without features
    has_features: np.ndarray  # M booleans

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def without_content(self) -> "ContentFeatures":
        return ContentFeatures(np.zeros_like(self.matrix), np.zeros_like(self.has_features))


def load_content_features(path, ds: RatingDataset) -> ContentFeatures:
    """Read ``raw_movie_id f_1 ... f_F`` lines; ids unknown to ``ds`` are ignored."""
    path = Path(path)
    rows: Dict[int, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                raw = int(parts[0])
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError(path, line_no, "malformed feature record") from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise FormatError(f"{path}:{line_no}: feature vector is empty")
            elif len(vec) != dim:
                raise FormatError(f"{path}:{line_no}: vector length {len(vec)} != {dim}")
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{line_no}: non-finite feature value")
            if ds.has_movie(raw):
                rows[ds.movie_index(raw)] = vec
    if dim is None:
        raise FormatError(f"{path}: no feature records")
    matrix = np.zeros((ds.num_movies, dim))
    has = np.zeros(ds.num_movies, dtype=bool)
    for j, vec in rows.items():
        matrix[j] = vec
        has[j] = True
    return ContentFeatures(matrix, has)


def write_content_features(ds: RatingDataset, features: ContentFeatures, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in np.flatnonzero(features.has_features):
            vals = " ".join(repr(float(x)) for x in features.matrix[j])
            fh.write(f"{ds.movie_ids[j]} {vals}\n")


def dataset_stats(ds: RatingDataset, split: Optional[Split] = None) -> Dict[str, float]:
    """Counts laid out like the dataset-characteristics table."""
    days = max(1.0, (int(ds.timestamps[-1]) - int(ds.timestamps[0])) / DAY_SECONDS)
    stats = {
        "users": ds.num_users,
        "movies": ds.num_movies,
        "ratings": len(ds),
        "first_day": _dt.datetime.fromtimestamp(int(ds.timestamps[0]), _dt.timezone.utc).date().isoformat(),
        "last_day": _dt.datetime.fromtimestamp(int(ds.timestamps[-1]), _dt.timezone.utc).date().isoformat(),
        "sparsity": len(ds) / float(ds.num_users * ds.num_movies),
    }
    if ds.positive is not None:
        stats["positives"] = int(ds.positive.sum())
        stats["density"] = int(ds.positive.sum()) / ds.num_users / days
    if split is not None:
        stats["train_ratings"] = len(split.train)
        stats["validation_ratings"] = len(split.validation)
        stats["test_ratings"] = len(split.test)
    return stats
