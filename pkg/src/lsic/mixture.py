"""Mixture scorers combining long-term factors with session states.

s = e_u . e_m + h_u[t] . h_m[t] + b_u + b_m, score = sigmoid(s). Variants
differ only in how the factors reach the LSTMs:

* v1: not at all (hard sum of the two models),
* v2: initial hidden states are a learned linear map of the factors,
* v3: v2 plus the factor fed as a static context at every step,
* v4: an attention-weighted mixture of all factors fed as a dynamic context.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from .mf import FactorStore
from .nn import ParamSet, ParamTensor, copy_params, init_uniform, init_zeros, make_rng
from .rnn import LstmCell, SessionEncoder, SessionInputs, Trajectory

VARIANTS = ("v1", "v2", "v3", "v4")
SIDES = ("user", "movie")


@dataclass(frozen=True)
class ScorerConfig:
    variant: str = "v4"
    hidden: int = 10
    input_dim: int = 15
    content_dim: int = 0
    attention_hidden: int = 8
    attention_pool_size: int = 0  # 0 = every entity of that side
    init_range: float = 0.05
    identity_init_map: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown mixture variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden < 1 or self.input_dim < 1 or self.attention_hidden < 1:
            raise ValueError("hidden, input_dim and attention_hidden must be >= 1")
        if self.content_dim < 0 or self.attention_pool_size < 0:
            raise ValueError("content_dim and attention_pool_size must be >= 0")

    @property
    def uses_init_map(self) -> bool:
        return self.variant in ("v2", "v3")

    @property
    def context_kind(self) -> Optional[str]:
        return {"v3": "static", "v4": "attention"}.get(self.variant)


# --- attention ------------------------------------------------------------

def attention_scores(h_prev: np.ndarray, pool_factors: np.ndarray, Wh, We, b, v) -> np.ndarray:
    """sigma(h, e_k) = v . tanh(Wh h + We e_k + b) for every row and pool member."""
    pre = (h_prev @ Wh.T + b)[:, None, :] + (pool_factors @ We.T)[None, :, :]
    return np.tanh(pre) @ v


def attention_context(factors: np.ndarray, h_prev: np.ndarray, Wh, We, b, v,
                      pool: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted mixture of pool factors. Returns (context, weights)."""
    pool = np.arange(len(factors)) if pool is None else np.asarray(pool, dtype=np.int64)
    if len(pool) == 0:
        raise ValueError("attention pool is empty")
    single = np.ndim(h_prev) == 1
    h = np.atleast_2d(h_prev)
    Ep = factors[pool]
    alpha = softmax(attention_scores(h, Ep, Wh, We, b, v), axis=1)
    ctx = alpha @ Ep
    return (ctx[0], alpha[0]) if single else (ctx, alpha)


class StaticContext:
    """The entity's own factor, unchanged at every step."""

    def __init__(self, factors: ParamTensor):
        self.factors = factors

    def forward(self, ids, h_prev):
        return self.factors.values[ids], None

    def backward(self, ids, cache, dctx):
        np.add.at(self.factors.grad, ids, dctx)
        return None


class AttentionContext:
    """Dynamic context from attention over a pool of factors, conditioned on
    the previous hidden state. Only the weights are cached; the tanh layer is
    recomputed in the backward pass, one attention unit at a time, so memory
    stays at O(rows x pool)."""

    def __init__(self, factors: ParamTensor, Wh: ParamTensor, We: ParamTensor, b: ParamTensor,
                 v: ParamTensor, pool: np.ndarray):
        if len(pool) == 0:
            raise ValueError("attention pool is empty")
        self.factors, self.Wh, self.We, self.b, self.v = factors, Wh, We, b, v
        self.pool = np.asarray(pool, dtype=np.int64)

    def _unit(self, Ah, Be, a, buf):
        np.add.outer(Ah[:, a], Be[:, a], out=buf)
        return np.tanh(buf, out=buf)

    def forward(self, ids, h_prev):
        Ep = self.factors.values[self.pool]
        Be = Ep @ self.We.values.T
        Ah = h_prev @ self.Wh.values.T + self.b.values
        v = self.v.values
        score = np.zeros((len(h_prev), len(self.pool)))
        buf = np.empty_like(score)
        for a in range(len(v)):
            z = self._unit(Ah, Be, a, buf)
            z *= v[a]
            score += z
        score -= score.max(axis=1, keepdims=True)
        alpha = np.exp(score, out=score)
        alpha /= alpha.sum(axis=1, keepdims=True)
        return alpha @ Ep, (h_prev, alpha)

    def backward(self, ids, cache, dctx):
        h_prev, alpha = cache
        Ep = self.factors.values[self.pool]
        Be = Ep @ self.We.values.T
        Ah = h_prev @ self.Wh.values.T + self.b.values
        v = self.v.values
        dEp = alpha.T @ dctx
        dscore = dctx @ Ep.T
        dscore *= alpha
        dscore -= alpha * dscore.sum(axis=1, keepdims=True)
        ones_n = np.ones(len(h_prev))
        ones_p = np.ones(len(self.pool))
        dAh = np.empty_like(Ah)
        dBe = np.empty_like(Be)
        buf = np.empty_like(dscore)
        for a in range(len(v)):
            z = self._unit(Ah, Be, a, buf)
            self.v.grad[a] += np.vdot(dscore, z)
            np.multiply(z, z, out=z)
            np.subtract(1.0, z, out=z)
            z *= dscore
            dAh[:, a] = v[a] * (z @ ones_p)
            dBe[:, a] = v[a] * (ones_n @ z)
        self.Wh.grad += dAh.T @ h_prev
        self.b.grad += dAh.sum(axis=0)
        self.We.grad += dBe.T @ Ep
        dEp += dBe @ self.We.values
        np.add.at(self.factors.grad, self.pool, dEp)
        return dAh @ self.Wh.values


# --- scorer ---------------------------------------------------------------

@dataclass
class SideBatch:
    ids: np.ndarray
    traj: Trajectory
    h0_rows: Optional[np.ndarray] = None  # factor rows fed to the init map


@dataclass
class ScoreBatch:
    kind: str  # "pairs" or "matrix"
    users: np.ndarray
    movies: np.ndarray
    times: np.ndarray
    user_side: SideBatch
    movie_side: SideBatch
    user_pos: np.ndarray
    movie_pos: np.ndarray


class MixtureScorer:
    """One variant's full parameter set: factors, biases, both session
    encoders and the variant-specific wiring."""

    def __init__(self, cfg: ScorerConfig, params: ParamSet, pools: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.pools = {k: np.asarray(v, dtype=np.int64) for k, v in pools.items()}
        p = params
        self.num_users, self.dim = p["user_factors"].shape
        self.num_movies = p["movie_factors"].shape[0]
        self.encoders = {}
        for side in SIDES:
            cell = LstmCell(p[f"{side}_rnn.W"], p[f"{side}_rnn.bW"], p[f"{side}_rnn.V"], p[f"{side}_rnn.bV"],
                            p.get(f"{side}_rnn.Wc"), p.get(f"{side}_rnn.Vc"))
            proj = p.get("movie_rnn.content") if side == "movie" else None
            self.encoders[side] = SessionEncoder(cell, p[f"{side}_rnn.input"], proj)

    # construction -------------------------------------------------------

    @classmethod
    def create(cls, cfg: ScorerConfig, factors: FactorStore, rng: np.random.Generator) -> "MixtureScorer":
        U, M, d = factors.num_users, factors.num_movies, factors.dim
        H, D, r = cfg.hidden, cfg.input_dim, cfg.init_range
        ctx_dim = d if cfg.context_kind else 0
        params: ParamSet = {
            "user_factors": ParamTensor("user_factors", factors.user_factors.copy()),
            "movie_factors": ParamTensor("movie_factors", factors.movie_factors.copy()),
            "user_bias": ParamTensor("user_bias", factors.user_bias.copy()),
            "movie_bias": ParamTensor("movie_bias", factors.movie_bias.copy()),
        }
        counterpart = {"user": M, "movie": U}
        for side in SIDES:
            cell = LstmCell.create(f"{side}_rnn.", H, D, ctx_dim, rng, r)
            params.update(cell.tensors())
            params[f"{side}_rnn.input"] = init_uniform(f"{side}_rnn.input", (counterpart[side], D), -r, r, rng)
        if cfg.content_dim:
            params["movie_rnn.content"] = init_uniform("movie_rnn.content", (D, cfg.content_dim), -r, r, rng)
        if cfg.uses_init_map:
            for side in SIDES:
                W = init_zeros(f"{side}_init.W", (H, d))
                if cfg.identity_init_map:
                    if d != H:
                        raise ValueError(f"identity initial-state map needs d == H (got {d} != {H})")
                    W.values[...] = np.eye(H)
                params[W.name] = W
                params[f"{side}_init.b"] = init_zeros(f"{side}_init.b", (H,))
        pools = {}
        if cfg.context_kind == "attention":
            A = cfg.attention_hidden
            for side, n in (("user", U), ("movie", M)):
                params[f"{side}_att.Wh"] = init_uniform(f"{side}_att.Wh", (A, H), -r, r, rng)
                params[f"{side}_att.We"] = init_uniform(f"{side}_att.We", (A, d), -r, r, rng)
                params[f"{side}_att.b"] = init_uniform(f"{side}_att.b", (A,), -r, r, rng)
                params[f"{side}_att.v"] = init_uniform(f"{side}_att.v", (A,), -r, r, rng)
                size = cfg.attention_pool_size
                pools[side] = (np.sort(rng.choice(n, size=size, replace=False))
                               if 0 < size < n else np.arange(n))
        return cls(cfg, params, pools)

    def copy(self) -> "MixtureScorer":
        return MixtureScorer(self.cfg, copy_params(self.params), dict(self.pools))

    def factor_store(self) -> FactorStore:
        p = self.params
        return FactorStore(p["user_factors"].values.copy(), p["movie_factors"].values.copy(),
                           p["user_bias"].values.copy(), p["movie_bias"].values.copy())

    def to_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {prefix + k: t.values for k, t in self.params.items()}
        for side, pool in self.pools.items():
            out[f"{prefix}pool.{side}"] = pool.astype(np.float64)
        return out

    @classmethod
    def from_tensors(cls, cfg: ScorerConfig, tensors, prefix: str) -> "MixtureScorer":
        params, pools = {}, {}
        for key, arr in tensors.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name.startswith("pool."):
                pools[name[5:]] = np.asarray(arr).astype(np.int64)
            else:
                params[name] = ParamTensor(name, np.array(arr))
        return cls(cfg, params, pools)

    def load_values(self, other: "MixtureScorer") -> None:
        for k, t in other.params.items():
            self.params[k].values[...] = t.values

    # variant wiring -----------------------------------------------------

    def initial_states(self, side: str, ids: np.ndarray) -> Optional[np.ndarray]:
        """Initial hidden states (None means zeros)."""
        if not self.cfg.uses_init_map:
            return None
        F = self.params[f"{side}_factors"].values[ids]
        return F @ self.params[f"{side}_init.W"].values.T + self.params[f"{side}_init.b"].values

    def context_provider(self, side: str):
        kind = self.cfg.context_kind
        if kind == "static":
            return StaticContext(self.params[f"{side}_factors"])
        if kind == "attention":
            p = self.params
            return AttentionContext(p[f"{side}_factors"], p[f"{side}_att.Wh"], p[f"{side}_att.We"],
                                    p[f"{side}_att.b"], p[f"{side}_att.v"], self.pools[side])
        return None

    # encoding -----------------------------------------------------------

    def encode(self, side: str, ids, inputs: SessionInputs, num_steps: Optional[int] = None,
               content: Optional[np.ndarray] = None, keep_cache: bool = True) -> Trajectory:
        ids = np.asarray(ids, dtype=np.int64)
        steps = inputs.num_sessions if num_steps is None else num_steps
        return self.encoders[side].encode(ids, inputs.side(side), steps,
                                          content=content if side == "movie" else None,
                                          h0=self.initial_states(side, ids),
                                          context=self.context_provider(side), keep_cache=keep_cache)

    def _side(self, side, ids, inputs, steps, content, keep_cache) -> SideBatch:
        traj = self.encode(side, ids, inputs, steps, content, keep_cache)
        return SideBatch(ids, traj)

    def _check_times(self, times, inputs: SessionInputs):
        times = np.asarray(times, dtype=np.int64)
        if times.size and (times.min() < 0 or times.max() > inputs.num_sessions):
            raise IndexError(f"session index outside 0..{inputs.num_sessions}")
        return times

    def forward_pairs(self, users, movies, times, inputs: SessionInputs,
                      content: Optional[np.ndarray] = None, keep_cache: bool = True):
        """Pre-activations s for aligned (user, movie, time) arrays."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        times = self._check_times(times, inputs)
        steps = int(times.max()) if times.size else 0
        uu, upos = np.unique(users, return_inverse=True)
        mm, mpos = np.unique(movies, return_inverse=True)
        ub = self._side("user", uu, inputs, steps, content, keep_cache)
        mb = self._side("movie", mm, inputs, steps, content, keep_cache)
        Hu = ub.traj.hs[times + ub.traj.offset, upos]
        Hm = mb.traj.hs[times + mb.traj.offset, mpos]
        p = self.params
        s = (np.einsum("nd,nd->n", p["user_factors"].values[users], p["movie_factors"].values[movies])
             + np.einsum("nh,nh->n", Hu, Hm) + p["user_bias"].values[users] + p["movie_bias"].values[movies])
        return s, ScoreBatch("pairs", users, movies, times, ub, mb, upos, mpos)

    def forward_matrix(self, users, times, movies, inputs: SessionInputs,
                       content: Optional[np.ndarray] = None, keep_cache: bool = True):
        """Pre-activations for every (row user at its time) x (movie column)."""
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        times = self._check_times(times, inputs)
        steps = int(times.max()) if times.size else 0
        uu, upos = np.unique(users, return_inverse=True)
        ub = self._side("user", uu, inputs, steps, content, keep_cache)
        mb = self._side("movie", movies, inputs, steps, content, keep_cache)
        Hu = ub.traj.hs[times + ub.traj.offset, upos]          # B x H
        Hm = mb.traj.hs[times + mb.traj.offset]                 # B x C x H
        p = self.params
        S = (p["user_factors"].values[users] @ p["movie_factors"].values[movies].T
             + np.einsum("bh,bch->bc", Hu, Hm)
             + p["user_bias"].values[users][:, None] + p["movie_bias"].values[movies][None, :])
        return S, ScoreBatch("matrix", users, movies, times, ub, mb, upos, np.arange(len(movies)))

    # backward -----------------------------------------------------------

    def backward(self, batch: ScoreBatch, ds: np.ndarray, truncate: int = 0) -> None:
        """Accumulate dL/dparams given dL/ds for the batch's pre-activations."""
        p = self.params
        ut, mt = batch.user_side.traj, batch.movie_side.traj
        users, movies, times = batch.users, batch.movies, batch.times
        Eu, Em = p["user_factors"].values, p["movie_factors"].values
        dHu = np.zeros_like(ut.hs)
        dHm = np.zeros_like(mt.hs)
        if batch.kind == "pairs":
            Hu = ut.hs[times + ut.offset, batch.user_pos]
            Hm = mt.hs[times + mt.offset, batch.movie_pos]
            np.add.at(p["user_factors"].grad, users, ds[:, None] * Em[movies])
            np.add.at(p["movie_factors"].grad, movies, ds[:, None] * Eu[users])
            np.add.at(p["user_bias"].grad, users, ds)
            np.add.at(p["movie_bias"].grad, movies, ds)
            np.add.at(dHu, (times + ut.offset, batch.user_pos), ds[:, None] * Hm)
            np.add.at(dHm, (times + mt.offset, batch.movie_pos), ds[:, None] * Hu)
        else:
            Hu = ut.hs[times + ut.offset, batch.user_pos]
            Hm = mt.hs[times + mt.offset]
            np.add.at(p["user_factors"].grad, users, ds @ Em[movies])
            np.add.at(p["movie_factors"].grad, movies, ds.T @ Eu[users])
            np.add.at(p["user_bias"].grad, users, ds.sum(axis=1))
            np.add.at(p["movie_bias"].grad, movies, ds.sum(axis=0))
            np.add.at(dHu, (times + ut.offset, batch.user_pos), np.einsum("bc,bch->bh", ds, Hm))
            np.add.at(dHm, times + mt.offset, ds[:, :, None] * Hu[:, None, :])
        for side, sb, dH in (("user", batch.user_side, dHu), ("movie", batch.movie_side, dHm)):
            dh0, _ = self.encoders[side].backward(sb.traj, dH, truncate=truncate)
            if self.cfg.uses_init_map:
                F = p[f"{side}_factors"]
                W = p[f"{side}_init.W"]
                W.grad += dh0.T @ F.values[sb.ids]
                p[f"{side}_init.b"].grad += dh0.sum(axis=0)
                np.add.at(F.grad, sb.ids, dh0 @ W.values)

    # convenience ---------------------------------------------------------

    def score(self, i: int, j: int, t: int, inputs: SessionInputs, content=None) -> float:
        s, _ = self.forward_pairs([i], [j], [t], inputs, content, keep_cache=False)
        return float(expit(s[0]))

    def score_matrix(self, users, t, movies, inputs: SessionInputs, content=None,
                     chunk: int = 512) -> np.ndarray:
        """Inference pre-activations for users x movies at one session time.

        Movie trajectories are encoded once and reused across user chunks.
        """
        users = np.asarray(users, dtype=np.int64)
        movies = np.asarray(movies, dtype=np.int64)
        self._check_times([t], inputs)
        Hm = self.encode("movie", movies, inputs, t, content, keep_cache=False).state(t)
        p = self.params
        out = np.empty((len(users), len(movies)))
        Em, bm = p["movie_factors"].values[movies], p["movie_bias"].values[movies]
        for s in range(0, len(users), chunk):
            ub = users[s:s + chunk]
            Hu = self.encode("user", ub, inputs, t, keep_cache=False).state(t)
            out[s:s + chunk] = (p["user_factors"].values[ub] @ Em.T + Hu @ Hm.T
                                + p["user_bias"].values[ub][:, None] + bm[None, :])
        return out


def build_scorer(variant: str, factors: FactorStore, seed: int = 0, **kwargs) -> MixtureScorer:
    return MixtureScorer.create(ScorerConfig(variant=variant, **kwargs), factors, make_rng(seed))


def with_variant(cfg: ScorerConfig, variant: str) -> ScorerConfig:
    return replace(cfg, variant=variant)
