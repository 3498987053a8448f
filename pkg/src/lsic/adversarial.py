"""Adversarial training of two mixture scorers.

The discriminator D scores (user, movie, session) triples and judges a
candidate against a known positive through a margin hinge. The generator G is
a softmax policy over candidate movies, trained by REINFORCE with the
discriminator's log-probability as reward. Both start from pairwise-hinge
pretraining.

Compression used throughout: ``D~ = clip(hinge / margin, 0, 1)``, i.e. 1 when
the candidate scores at least as high as the positive and 0 once the
positive leads by the full margin. The generator's reward is
``log(max(D~, delta))``, highest for movies the discriminator cannot tell
apart from the positive; the discriminator maximises
``log(max(1 - D~, delta))`` on both true and generated negatives.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax

from .data import SessionizedDataset
from .errors import TrainingAbort
from .mixture import MixtureScorer, ScorerConfig
from .nn import (NonFiniteError, OptimizerConfig, load_checkpoint, rng_from_state, rng_state,
                 save_checkpoint, sgd_step, zero_grads)
from .rnn import SessionInputs

log = logging.getLogger(__name__)

MARGIN = 0.2
REWARD_FLOOR = 1e-8
STD_FLOOR = 1e-8
CURVE_COLUMNS = ("epoch", "precision_at_5", "ndcg_at_5", "mean_reward", "d_loss", "d_accuracy")


# --- training data ----------------------------------------------------------

@dataclass(eq=False)
class TrainingData:
    """Positive training events with the session they fall in, plus lookups
    for negative sampling. A positive in session t is scored with the states
    at t, which have only seen sessions before t."""

    inputs: SessionInputs
    content: Optional[np.ndarray]
    num_users: int
    num_movies: int
    pos_users: np.ndarray
    pos_movies: np.ndarray
    pos_times: np.ndarray
    user_positives: List[np.ndarray]
    _session_pos: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_sessions(cls, sessions: SessionizedDataset, content: Optional[np.ndarray] = None) -> "TrainingData":
        train = sessions.train
        if train.positive is None:
            raise ValueError("training data must be labeled with a feedback scheme")
        mask = train.positive
        users, movies = train.users[mask], train.movies[mask]
        times = sessions.session_index[mask]
        # one event per (user, movie, session)
        key = np.unique(np.stack([users, movies, times], axis=1), axis=0)
        users, movies, times = key[:, 0], key[:, 1], key[:, 2]
        per_user = [np.unique(movies[users == u]) for u in range(train.num_users)]
        groups: Dict[Tuple[int, int], List[int]] = {}
        for u, m, t in zip(users.tolist(), movies.tolist(), times.tolist()):
            groups.setdefault((u, t), []).append(m)
        session_pos = {k: np.array(sorted(v), dtype=np.int64) for k, v in groups.items()}
        return cls(SessionInputs.from_sessions(sessions), content, train.num_users, train.num_movies,
                   users, movies, times, per_user, session_pos)

    @property
    def num_positive(self) -> int:
        return len(self.pos_users)

    def session_positives(self, u: int, t: int) -> np.ndarray:
        return self._session_pos.get((int(u), int(t)), np.zeros(0, dtype=np.int64))

    def is_positive(self, u: int, m: int) -> bool:
        pos = self.user_positives[u]
        k = np.searchsorted(pos, m)
        return bool(k < len(pos) and pos[k] == m)

    def sample_negatives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One movie per user drawn uniformly from that user's non-positives."""
        out = np.empty(len(users), dtype=np.int64)
        for k, u in enumerate(users):
            pos = self.user_positives[u]
            if len(pos) >= self.num_movies:
                raise ValueError(f"user {u} has no non-positive movie to sample")
            # map a uniform draw over the complement onto movie ids
            r = int(rng.integers(self.num_movies - len(pos)))
            for p in pos:
                if p <= r:
                    r += 1
                else:
                    break
            out[k] = r
        return out


# --- scalar pieces ------------------------------------------------------------

def d_hinge(g_pos, g_neg, margin: float = MARGIN):
    """max(0, margin - g(pos) + g(neg)) on probability-scale scores."""
    return np.maximum(0.0, margin - np.asarray(g_pos) + np.asarray(g_neg))


def compress(hinge, margin: float = MARGIN):
    return np.clip(np.asarray(hinge) / margin, 0.0, 1.0)


def reward_from_compressed(d_tilde, floor: float = REWARD_FLOOR):
    return np.log(np.maximum(d_tilde, floor))


def normalize_rewards(rewards) -> np.ndarray:
    """Standardise a batch (population std, floored); one reward maps to 0."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("empty reward batch")
    if r.size == 1:
        return np.zeros(1)
    return (r - r.mean()) / max(float(r.std()), STD_FLOOR)


def policy_log_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; ``-inf`` logits mark movies outside the candidate set."""
    return log_softmax(logits, axis=-1)


def g_sample(logits, K: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """K draws with replacement from softmax(logits); returns (indices, log-probs).

    ``logits`` may be 1-d (one policy) or 2-d (one row per policy).
    """
    if K <= 0:
        raise ValueError("K must be >= 1")
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lp = policy_log_probs(np.atleast_2d(logits))
    if lp.shape[1] == 0:
        raise ValueError("empty candidate set")
    cdf = np.cumsum(np.exp(lp), axis=1)
    u = rng.random((lp.shape[0], K)) * cdf[:, -1:]
    idx = np.empty(u.shape, dtype=np.int64)
    for b in range(lp.shape[0]):
        idx[b] = np.minimum(np.searchsorted(cdf[b], u[b], side="right"), lp.shape[1] - 1)
        # never land on a zero-probability entry through rounding at the edges
        bad = ~np.isfinite(lp[b, idx[b]])
        if bad.any():
            ok = np.flatnonzero(np.isfinite(lp[b]))
            idx[b, bad] = ok[np.minimum(np.searchsorted(ok, idx[b, bad]), len(ok) - 1)]
    logp = np.take_along_axis(lp, idx, axis=1)
    return (idx[0], logp[0]) if single else (idx, logp)


def reinforce_logit_grad(logits, samples, rewards) -> np.ndarray:
    """Gradient w.r.t. the logits of ``(1/K) sum_k r_k log G(m_k)``.

    Equals ``(1/K) sum_k r_k (onehot(m_k) - p)``. Works row-wise on 2-d input.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lg = np.atleast_2d(logits)
    samples = np.atleast_2d(samples)
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    K = samples.shape[1]
    p = np.exp(policy_log_probs(lg))
    grad = -p * rewards.sum(axis=1, keepdims=True)
    for b in range(lg.shape[0]):
        np.add.at(grad[b], samples[b], rewards[b])
    grad /= K
    return grad[0] if single else grad


# --- players --------------------------------------------------------------------

class Discriminator:
    """Siamese pairwise judge: both arms are the same scorer call."""

    def __init__(self, scorer: MixtureScorer, margin: float = MARGIN):
        if not margin > 0:
            raise ValueError("margin must be > 0")
        self.scorer = scorer
        self.margin = margin

    def arm(self, users, movies, times, data: TrainingData) -> np.ndarray:
        s, _ = self.scorer.forward_pairs(users, movies, times, data.inputs, data.content, keep_cache=False)
        return expit(s)

    def hinge(self, u: int, m_neg: int, m_pos: int, t: int, data: TrainingData) -> float:
        if not data.is_positive(u, m_pos):
            raise ValueError(f"movie {m_pos} is not a training positive of user {u}")
        g = self.arm([u, u], [m_pos, m_neg], [t, t], data)
        return float(d_hinge(g[0], g[1], self.margin))

    def compressed(self, users, m_cand, m_pos, times, data: TrainingData) -> np.ndarray:
        n = len(users)
        g = self.arm(np.concatenate([users, users]), np.concatenate([m_pos, m_cand]),
                     np.concatenate([times, times]), data)
        return compress(d_hinge(g[:n], g[n:], self.margin), self.margin)

    def reward(self, users, m_cand, m_pos, times, data: TrainingData) -> np.ndarray:
        return reward_from_compressed(self.compressed(users, m_cand, m_pos, times, data))


class Generator:
    """Softmax policy over candidate movies."""

    def __init__(self, scorer: MixtureScorer, samples: int = 64,
                 candidates: Optional[Sequence[np.ndarray]] = None):
        if samples < 1:
            raise ValueError("sample count K must be >= 1")
        self.scorer = scorer
        self.samples = samples
        self.candidates = candidates  # per-user candidate arrays, None = whole catalogue

    def candidate_mask(self, users: np.ndarray) -> Optional[np.ndarray]:
        if self.candidates is None:
            return None
        mask = np.zeros((len(users), self.scorer.num_movies), dtype=bool)
        for b, u in enumerate(users):
            mask[b, self.candidates[u]] = True
        return mask

    def logits(self, users, times, data: TrainingData, keep_cache: bool = False):
        users = np.asarray(users, dtype=np.int64)
        S, batch = self.scorer.forward_matrix(users, times, np.arange(self.scorer.num_movies),
                                              data.inputs, data.content, keep_cache=keep_cache)
        mask = self.candidate_mask(users)
        logits = S if mask is None else np.where(mask, S, -np.inf)
        return logits, batch

    def distribution(self, u: int, t: int, data: TrainingData) -> np.ndarray:
        logits, _ = self.logits([u], [t], data)
        return np.exp(policy_log_probs(logits[0]))


# --- updates ----------------------------------------------------------------------

@dataclass
class DStepResult:
    loss: float
    accuracy: float


def d_objective_grads(g_pos, g_neg, margin: float, floor: float = REWARD_FLOOR):
    """Per-triple value of -log(max(1 - D~, floor)) and its derivatives
    w.r.t. g(pos) and g(neg)."""
    h = d_hinge(g_pos, g_neg, margin)
    x = 1.0 - compress(h, margin)
    value = -np.log(np.maximum(x, floor))
    live = (h > 0.0) & (h < margin) & (x > floor)
    coef = np.where(live, 1.0 / (margin * np.where(live, x, 1.0)), 0.0)
    return value, -coef, coef


def d_update(disc: Discriminator, users, m_pos, m_neg, m_gen, times, data: TrainingData,
             cfg: OptimizerConfig, truncate: int = 0, apply: bool = True) -> DStepResult:
    """One SGD step descending ``-sum[log(1 - D~(m_neg)) + log(1 - D~(m_gen))]``."""
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    if n == 0:
        raise ValueError("empty discriminator batch")
    times = np.asarray(times, dtype=np.int64)
    sc = disc.scorer
    s, batch = sc.forward_pairs(np.tile(users, 3), np.concatenate([m_pos, m_neg, m_gen]),
                                np.tile(times, 3), data.inputs, data.content)
    g = expit(s)
    gp, gn, gg = g[:n], g[n:2 * n], g[2 * n:]
    v1, dp1, dn = d_objective_grads(gp, gn, disc.margin)
    v2, dp2, dg = d_objective_grads(gp, gg, disc.margin)
    dgs = np.concatenate([dp1 + dp2, dn, dg])
    loss = float(np.sum(v1) + np.sum(v2))
    accuracy = float(np.mean(gp > gg))
    if apply:
        zero_grads(sc.params)
        sc.backward(batch, dgs * g * (1.0 - g), truncate=truncate)
        _step(sc, cfg, "discriminator")
    return DStepResult(loss / n, accuracy)


@dataclass
class GStepResult:
    mean_reward: float
    samples: np.ndarray
    rewards: np.ndarray


def g_policy_gradient_step(gen: Generator, batch, logits: np.ndarray, samples: np.ndarray,
                           normalized: np.ndarray, cfg: OptimizerConfig, truncate: int = 0) -> None:
    """Ascend the REINFORCE estimator given a forward batch with cache."""
    grad = reinforce_logit_grad(logits, samples, normalized)
    if not np.all(np.isfinite(grad)):
        raise TrainingAbort("non-finite policy-gradient estimator")
    zero_grads(gen.scorer.params)
    gen.scorer.backward(batch, -grad, truncate=truncate)
    _step(gen.scorer, cfg, "generator")


def g_step(gen: Generator, disc: Discriminator, users, times, data: TrainingData,
           rng: np.random.Generator, cfg: OptimizerConfig, truncate: int = 0) -> GStepResult:
    users = np.asarray(users, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    logits, batch = gen.logits(users, times, data, keep_cache=True)
    samples, _ = g_sample(logits, gen.samples, rng)
    K = gen.samples
    m_pos = np.empty_like(samples)
    for b, (u, t) in enumerate(zip(users, times)):
        pos = data.session_positives(u, t)
        m_pos[b] = pos[rng.integers(len(pos), size=K)]
    raw = disc.reward(np.repeat(users, K), samples.ravel(), m_pos.ravel(), np.repeat(times, K), data)
    normalized = normalize_rewards(raw).reshape(samples.shape)
    g_policy_gradient_step(gen, batch, logits, samples, normalized, cfg, truncate)
    return GStepResult(float(raw.mean()), samples, raw.reshape(samples.shape))


def _step(scorer: MixtureScorer, cfg: OptimizerConfig, who: str) -> None:
    try:
        sgd_step(scorer.params, cfg)
    except NonFiniteError as exc:
        raise TrainingAbort(f"{who} update: {exc}") from exc


# --- pretraining ------------------------------------------------------------------

def pairwise_hinge_step(scorer: MixtureScorer, users, m_pos, m_neg, times, data: TrainingData,
                        margin: float, cfg: OptimizerConfig, truncate: int = 0) -> float:
    n = len(users)
    s, batch = scorer.forward_pairs(np.tile(users, 2), np.concatenate([m_pos, m_neg]),
                                    np.tile(times, 2), data.inputs, data.content)
    g = expit(s)
    h = d_hinge(g[:n], g[n:], margin)
    active = (h > 0).astype(np.float64)
    dg = np.concatenate([-active, active])
    zero_grads(scorer.params)
    scorer.backward(batch, dg * g * (1.0 - g), truncate=truncate)
    _step(scorer, cfg, "pretraining")
    return float(h.sum())


def pretrain_pairwise(scorer: MixtureScorer, data: TrainingData, epochs: int, cfg: OptimizerConfig,
                      rng: np.random.Generator, batch_size: int = 128, margin: float = MARGIN,
                      truncate: int = 0) -> List[float]:
    """Pairwise hinge on (positive, sampled non-positive) pairs; returns the
    mean hinge per epoch."""
    history = []
    n = data.num_positive
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            users = data.pos_users[b]
            negs = data.sample_negatives(users, rng)
            total += pairwise_hinge_step(scorer, users, data.pos_movies[b], negs, data.pos_times[b],
                                         data, margin, cfg, truncate)
        history.append(total / max(n, 1))
        log.info("pretrain epoch %d mean hinge %.5f", epoch + 1, history[-1])
        if not math.isfinite(history[-1]):
            raise TrainingAbort(f"pretraining diverged at epoch {epoch + 1}")
    return history


# --- the alternating loop -----------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    epochs: int = 10
    g_steps: int = 1
    d_steps: int = 1
    batch_size: int = 128
    samples: int = 64
    margin: float = MARGIN
    optimizer: OptimizerConfig = OptimizerConfig(learning_rate=1e-4)
    truncate: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.g_steps < 0 or self.d_steps < 0:
            raise ValueError("epoch and step counts must be >= 0")
        if self.batch_size < 1 or self.samples < 1:
            raise ValueError("batch_size and samples must be >= 1")


@dataclass
class TrainerState:
    epoch: int
    generator: MixtureScorer
    discriminator: MixtureScorer
    best_generator: MixtureScorer
    best_epoch: int
    best_ndcg: float
    rng: np.random.Generator
    log: List[Dict[str, float]] = field(default_factory=list)
    reward_count: int = 0
    reward_sum: float = 0.0
    reward_sumsq: float = 0.0

    @property
    def reward_mean(self) -> float:
        return self.reward_sum / self.reward_count if self.reward_count else 0.0

    @property
    def reward_std(self) -> float:
        if not self.reward_count:
            return 0.0
        return math.sqrt(max(self.reward_sumsq / self.reward_count - self.reward_mean ** 2, 0.0))

    def curve_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*CURVE_COLUMNS, "config_hash"])
        for row in self.log:
            w.writerow([int(row["epoch"]), *(f"{row[k]:.10f}" for k in CURVE_COLUMNS[1:]), config_hash])
        return buf.getvalue()

    def save(self, path, meta: Optional[dict] = None) -> None:
        tensors = {}
        tensors.update(self.generator.to_tensors("G."))
        tensors.update(self.discriminator.to_tensors("D."))
        tensors.update(self.best_generator.to_tensors("best."))
        info = {"epoch": self.epoch, "best_epoch": self.best_epoch, "best_ndcg": self.best_ndcg,
                "log": self.log, "rng": rng_state(self.rng), "reward_count": self.reward_count,
                "reward_sum": self.reward_sum, "reward_sumsq": self.reward_sumsq,
                "scorer": asdict(self.generator.cfg)}
        info.update(meta or {})
        save_checkpoint(path, tensors, info)

    @classmethod
    def load(cls, path) -> "TrainerState":
        tensors, meta = load_checkpoint(path)
        cfg = ScorerConfig(**meta["scorer"])
        return cls(meta["epoch"], MixtureScorer.from_tensors(cfg, tensors, "G."),
                   MixtureScorer.from_tensors(cfg, tensors, "D."),
                   MixtureScorer.from_tensors(cfg, tensors, "best."),
                   meta["best_epoch"], meta["best_ndcg"], rng_from_state(meta["rng"]), meta["log"],
                   meta["reward_count"], meta["reward_sum"], meta["reward_sumsq"])


Validator = Callable[[MixtureScorer], Tuple[float, float]]  # -> (precision@5, ndcg@5)


def _sample_rows(data: TrainingData, size: int, rng: np.random.Generator):
    idx = rng.integers(data.num_positive, size=size)
    return data.pos_users[idx], data.pos_movies[idx], data.pos_times[idx]


def _check_metrics(p5: float, n5: float, epoch: int) -> None:
    if not (math.isfinite(p5) and math.isfinite(n5)):
        raise TrainingAbort(f"validation metric is NaN at epoch {epoch}")


def _d_batch(gen: Generator, disc: Discriminator, data: TrainingData, schedule: Schedule,
             rng: np.random.Generator):
    users, m_pos, times = _sample_rows(data, schedule.batch_size, rng)
    m_neg = data.sample_negatives(users, rng)
    logits, _ = gen.logits(users, times, data)
    m_gen, _ = g_sample(logits, 1, rng)
    return users, m_pos, m_neg, m_gen[:, 0], times


def init_trainer(generator: MixtureScorer, discriminator: MixtureScorer, data: TrainingData,
                 schedule: Schedule, validate: Validator, rng: np.random.Generator,
                 candidates=None) -> TrainerState:
    """Epoch-0 row: the pretrained generator's validation metrics and a probe
    of rewards and discriminator loss without any update."""
    p5, n5 = validate(generator)
    _check_metrics(p5, n5, 0)
    gen = Generator(generator, schedule.samples, candidates)
    disc = Discriminator(discriminator, schedule.margin)
    users, _, times = _sample_rows(data, schedule.batch_size, rng)
    logits, _ = gen.logits(users, times, data)
    samples, _ = g_sample(logits, schedule.samples, rng)
    m_pos = np.array([data.session_positives(u, t)[rng.integers(len(data.session_positives(u, t)))]
                      for u, t in zip(users, times)])
    K = schedule.samples
    raw = disc.reward(np.repeat(users, K), samples.ravel(), np.repeat(m_pos, K), np.repeat(times, K), data)
    d = d_update(disc, *_d_batch(gen, disc, data, schedule, rng), data, schedule.optimizer, apply=False)
    row = {"epoch": 0, "precision_at_5": p5, "ndcg_at_5": n5, "mean_reward": float(raw.mean()),
           "d_loss": d.loss, "d_accuracy": d.accuracy}
    return TrainerState(0, generator, discriminator, generator.copy(), 0, n5, rng, [row])


def train_adversarial(state: TrainerState, data: TrainingData, schedule: Schedule, validate: Validator,
                      candidates=None, checkpoint_path=None, checkpoint_meta: Optional[dict] = None,
                      stop_after: Optional[int] = None) -> TrainerState:
    """Alternate g-steps and d-steps until ``schedule.epochs``.

    ``state`` comes from ``init_trainer`` or ``TrainerState.load``; the loop
    resumes at ``state.epoch + 1``. ``stop_after`` ends the call early after
    that epoch (used to simulate interruption).
    """
    gen = Generator(state.generator, schedule.samples, candidates)
    disc = Discriminator(state.discriminator, schedule.margin)
    rng = state.rng
    for epoch in range(state.epoch + 1, schedule.epochs + 1):
        rewards = []
        for _ in range(schedule.g_steps):
            users, _, times = _sample_rows(data, schedule.batch_size, rng)
            res = g_step(gen, disc, users, times, data, rng, schedule.optimizer, schedule.truncate)
            rewards.append(res.rewards.ravel())
        d_losses, d_accs = [], []
        for _ in range(schedule.d_steps):
            d = d_update(disc, *_d_batch(gen, disc, data, schedule, rng), data, schedule.optimizer,
                         schedule.truncate)
            d_losses.append(d.loss)
            d_accs.append(d.accuracy)
        p5, n5 = validate(state.generator)
        _check_metrics(p5, n5, epoch)
        r = np.concatenate(rewards) if rewards else np.zeros(0)
        state.reward_count += r.size
        state.reward_sum += float(r.sum())
        state.reward_sumsq += float((r * r).sum())
        row = {"epoch": epoch, "precision_at_5": p5, "ndcg_at_5": n5,
               "mean_reward": float(r.mean()) if r.size else 0.0,
               "d_loss": float(np.mean(d_losses)) if d_losses else 0.0,
               "d_accuracy": float(np.mean(d_accs)) if d_accs else 0.0}
        state.log.append(row)
        state.epoch = epoch
        if n5 > state.best_ndcg:
            state.best_ndcg = n5
            state.best_epoch = epoch
            state.best_generator = state.generator.copy()
        log.info("epoch %d P@5 %.4f NDCG@5 %.4f reward %.3f d_loss %.4f d_acc %.3f", epoch, p5, n5,
                 row["mean_reward"], row["d_loss"], row["d_accuracy"])
        if checkpoint_path is not None:
            state.save(checkpoint_path, checkpoint_meta)
        if stop_after is not None and epoch >= stop_after:
            break
    return state
