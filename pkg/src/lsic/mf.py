"""Long-term profiles: logistic matrix factorisation trained by clipped SGD,
used both as the candidate generator and as the source of pretrained
factors for the mixture scorers."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import expit

from .data import RatingDataset
from .errors import TrainingAbort
from .nn import OptimizerConfig, ParamTensor, init_uniform, make_rng, sgd_step

log = logging.getLogger(__name__)

FACTOR_NAMES = ("user_factors", "movie_factors", "user_bias", "movie_bias")


@dataclass
class FactorStore:
    user_factors: np.ndarray
    movie_factors: np.ndarray
    user_bias: np.ndarray
    movie_bias: np.ndarray

    def __post_init__(self):
        if self.user_factors.ndim != 2 or self.movie_factors.ndim != 2:
            raise ValueError("factor tables must be 2-d")
        if self.user_factors.shape[1] != self.movie_factors.shape[1] or self.dim < 1:
            raise ValueError("user and movie factors must share a dimension d >= 1")
        if self.user_bias.shape != (self.num_users,) or self.movie_bias.shape != (self.num_movies,):
            raise ValueError("bias shapes do not match factor tables")

    @property
    def dim(self) -> int:
        return self.user_factors.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def num_movies(self) -> int:
        return self.movie_factors.shape[0]

    @classmethod
    def zeros(cls, num_users: int, num_movies: int, d: int) -> "FactorStore":
        return cls(np.zeros((num_users, d)), np.zeros((num_movies, d)),
                   np.zeros(num_users), np.zeros(num_movies))

    def to_tensors(self, prefix: str = "mf.") -> Dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in FACTOR_NAMES}

    @classmethod
    def from_tensors(cls, tensors, prefix: str = "mf.") -> "FactorStore":
        return cls(*(np.array(tensors[prefix + k]) for k in FACTOR_NAMES))

    def copy(self) -> "FactorStore":
        return FactorStore(*(getattr(self, k).copy() for k in FACTOR_NAMES))


def rating_targets(ratings: np.ndarray) -> np.ndarray:
    """Map 1..5 stars into (0.1, 0.9) so the logistic output can reach them."""
    return (np.asarray(ratings, dtype=np.float64) - 0.5) / 5.0


def mf_logits(fs: FactorStore, i: int) -> np.ndarray:
    return fs.movie_factors @ fs.user_factors[i]


def mf_predict(fs: FactorStore, i: int, j: int) -> float:
    if not (0 <= i < fs.num_users and 0 <= j < fs.num_movies):
        raise IndexError(f"(user {i}, movie {j}) outside {fs.num_users} x {fs.num_movies}")
    return float(expit(fs.user_factors[i] @ fs.movie_factors[j]))


def mf_objective(user_factors, movie_factors, users, movies, targets, lam: float,
                 reg_weight: float = 1.0) -> Tuple[float, Dict[str, np.ndarray]]:
    """Squared error of logistic predictions plus ``reg_weight * lam`` times
    the squared Frobenius norms; returns the value and its gradients."""
    eu = user_factors[users]
    em = movie_factors[movies]
    pred = expit(np.einsum("nd,nd->n", eu, em))
    resid = targets - pred
    value = float(resid @ resid)
    value += reg_weight * lam * (float(np.sum(user_factors ** 2)) + float(np.sum(movie_factors ** 2)))
    coef = (-2.0 * resid * pred * (1.0 - pred))[:, None]
    gu = 2.0 * reg_weight * lam * user_factors
    gm = 2.0 * reg_weight * lam * movie_factors
    np.add.at(gu, users, coef * em)
    np.add.at(gm, movies, coef * eu)
    return value, {"user_factors": gu, "movie_factors": gm}


class MFTrainResult(NamedTuple):
    factors: FactorStore
    objective: List[float]  # entry 0 is the objective before training


def mf_train(train: RatingDataset, d: int, cfg: OptimizerConfig, epochs: int,
             rng: np.random.Generator, batch_size: int = 128, init_range: float = 0.05,
             lam: Optional[float] = None) -> MFTrainResult:
    """Minibatch SGD on the regularised logistic MF objective.

    Each minibatch carries ``|batch| / N`` of the regulariser so that one
    epoch applies it once. The optimizer's own L2 term is not used here.
    """
    if d < 1:
        raise ValueError("factor dimension must be >= 1")
    lam = cfg.l2_lambda if lam is None else lam
    U, M = train.num_users, train.num_movies
    params = {
        "user_factors": init_uniform("user_factors", (U, d), -init_range, init_range, rng),
        "movie_factors": init_uniform("movie_factors", (M, d), -init_range, init_range, rng),
    }
    step_cfg = OptimizerConfig(cfg.learning_rate, cfg.clip, 0.0)
    users, movies = train.users, train.movies
    targets = rating_targets(train.ratings)
    n = len(train)

    def full_objective() -> float:
        return mf_objective(params["user_factors"].values, params["movie_factors"].values,
                            users, movies, targets, lam)[0]

    history = [full_objective()]
    for epoch in range(epochs):
        if n == 0:
            _, grads = mf_objective(params["user_factors"].values, params["movie_factors"].values,
                                    users, movies, targets, lam)
            _apply(params, grads, step_cfg)
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                b = order[start:start + batch_size]
                _, grads = mf_objective(params["user_factors"].values, params["movie_factors"].values,
                                        users[b], movies[b], targets[b], lam, reg_weight=len(b) / n)
                _apply(params, grads, step_cfg)
        obj = full_objective()
        history.append(obj)
        log.debug("mf epoch %d objective %.6f", epoch + 1, obj)
        if not np.isfinite(obj) or obj > 10.0 * history[0]:
            raise TrainingAbort(f"MF diverged at epoch {epoch + 1}: objective {obj:.4g} "
                                f"(initial {history[0]:.4g})")
    fs = FactorStore(params["user_factors"].values.copy(), params["movie_factors"].values.copy(),
                     np.zeros(U), np.zeros(M))
    return MFTrainResult(fs, history)


def _apply(params: Dict[str, ParamTensor], grads, cfg: OptimizerConfig) -> None:
    for k, g in grads.items():
        params[k].grad += g
    sgd_step(params, cfg)


def training_rmse(fs: FactorStore, train: RatingDataset) -> float:
    pred = expit(np.einsum("nd,nd->n", fs.user_factors[train.users], fs.movie_factors[train.movies]))
    return float(np.sqrt(np.mean((rating_targets(train.ratings) - pred) ** 2)))


def rank_descending(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Order ``ids`` by score descending, ties by ascending id."""
    order = np.lexsort((ids, -np.asarray(scores)))
    return np.asarray(ids)[order]


class Candidates(NamedTuple):
    movies: np.ndarray
    truncated: bool  # fewer than n movies were available


def mf_top_candidates(fs: FactorStore, i: int, exclude, n: int) -> Candidates:
    if n < 1:
        raise ValueError("n must be >= 1")
    mask = np.ones(fs.num_movies, dtype=bool)
    exclude = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    mask[exclude.astype(np.int64)] = False
    avail = np.flatnonzero(mask)
    scores = mf_logits(fs, i)[avail]
    ranked = rank_descending(scores, avail)
    return Candidates(ranked[:n], len(avail) < n)


def random_factor_store(num_users: int, num_movies: int, d: int, seed: int = 0,
                        scale: float = 0.05) -> FactorStore:
    rng = make_rng(seed)
    return FactorStore(rng.uniform(-scale, scale, (num_users, d)),
                       rng.uniform(-scale, scale, (num_movies, d)),
                       np.zeros(num_users), np.zeros(num_movies))
