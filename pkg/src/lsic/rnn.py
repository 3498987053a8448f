"""Session encoders: an LSTM cell with an optional context slot, sparse
session-input embedding, trajectory encoding and exact BPTT.

Every batched routine works on a block of entities at once (rows = entities)
so a full catalogue can be rolled forward with a handful of matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import SessionizedDataset
from .nn import ParamTensor, init_uniform, init_zeros

MAX_RATING = 5.0


class LstmCell:
    """Gates ``[f, i, o] = sigmoid(W [h, x] + b_W (+ W_c ctx))`` and candidate
    ``l = tanh(V [h, x] + b_V (+ V_c ctx))``."""

    def __init__(self, W: ParamTensor, bW: ParamTensor, V: ParamTensor, bV: ParamTensor,
                 Wc: Optional[ParamTensor] = None, Vc: Optional[ParamTensor] = None):
        self.W, self.bW, self.V, self.bV, self.Wc, self.Vc = W, bW, V, bV, Wc, Vc
        H = bV.shape[0]
        if W.shape[0] != 3 * H or bW.shape != (3 * H,) or V.shape != (H, W.shape[1]):
            raise ValueError("inconsistent LSTM weight shapes")
        if (Wc is None) != (Vc is None):
            raise ValueError("context weights must be given for both W and V")
        if Wc is not None and (Wc.shape[0] != 3 * H or Vc.shape != (H, Wc.shape[1])):
            raise ValueError("inconsistent context weight shapes")

    @property
    def hidden(self) -> int:
        return self.bV.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden

    @property
    def context_dim(self) -> int:
        return 0 if self.Wc is None else self.Wc.shape[1]

    def tensors(self) -> Dict[str, ParamTensor]:
        out = {t.name: t for t in (self.W, self.bW, self.V, self.bV)}
        if self.Wc is not None:
            out[self.Wc.name] = self.Wc
            out[self.Vc.name] = self.Vc
        return out

    @classmethod
    def create(cls, prefix: str, hidden: int, input_dim: int, context_dim: int,
               rng: np.random.Generator, init_range: float = 0.05) -> "LstmCell":
        H, D = hidden, input_dim
        lo, hi = -init_range, init_range
        W = init_uniform(prefix + "W", (3 * H, H + D), lo, hi, rng)
        bW = init_uniform(prefix + "bW", (3 * H,), lo, hi, rng)
        V = init_uniform(prefix + "V", (H, H + D), lo, hi, rng)
        bV = init_uniform(prefix + "bV", (H,), lo, hi, rng)
        Wc = Vc = None
        if context_dim:
            Wc = init_uniform(prefix + "Wc", (3 * H, context_dim), lo, hi, rng)
            Vc = init_uniform(prefix + "Vc", (H, context_dim), lo, hi, rng)
        return cls(W, bW, V, bV, Wc, Vc)

    @classmethod
    def zeros(cls, prefix: str, hidden: int, input_dim: int, context_dim: int = 0) -> "LstmCell":
        H, D = hidden, input_dim
        Wc = init_zeros(prefix + "Wc", (3 * H, context_dim)) if context_dim else None
        Vc = init_zeros(prefix + "Vc", (H, context_dim)) if context_dim else None
        return cls(init_zeros(prefix + "W", (3 * H, H + D)), init_zeros(prefix + "bW", (3 * H,)),
                   init_zeros(prefix + "V", (H, H + D)), init_zeros(prefix + "bV", (H,)), Wc, Vc)


def _step_forward(cell: LstmCell, h_prev, c_prev, x, ctx):
    H = cell.hidden
    if x.shape[1] != cell.input_dim or h_prev.shape[1] != H or c_prev.shape != h_prev.shape:
        raise ValueError(
            f"shape mismatch: h {h_prev.shape}, c {c_prev.shape}, x {x.shape} for H={H}, D={cell.input_dim}")
    if (ctx is None) != (cell.Wc is None):
        raise ValueError("context must be given exactly when the cell has a context slot")
    a = np.concatenate([h_prev, x], axis=1)
    zg = a @ cell.W.values.T + cell.bW.values
    zl = a @ cell.V.values.T + cell.bV.values
    if ctx is not None:
        if ctx.shape[1] != cell.context_dim:
            raise ValueError(f"context has {ctx.shape[1]} columns, cell expects {cell.context_dim}")
        zg = zg + ctx @ cell.Wc.values.T
        zl = zl + ctx @ cell.Vc.values.T
    gates = expit(zg)
    f, i, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:]
    l = np.tanh(zl)
    c = f * c_prev + i * l
    tc = np.tanh(c)
    h = o * tc
    return h, c, (a, ctx, c_prev, f, i, o, l, tc)


def _step_backward(cell: LstmCell, cache, dh, dc):
    """Accumulate parameter gradients; return (dh_prev, dc_prev, dx, dctx)."""
    a, ctx, c_prev, f, i, o, l, tc = cache
    H = cell.hidden
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    dzg = np.concatenate([dct * c_prev * f * (1.0 - f),
                          dct * l * i * (1.0 - i),
                          do * o * (1.0 - o)], axis=1)
    dzl = dct * i * (1.0 - l * l)
    cell.W.grad += dzg.T @ a
    cell.bW.grad += dzg.sum(axis=0)
    cell.V.grad += dzl.T @ a
    cell.bV.grad += dzl.sum(axis=0)
    da = dzg @ cell.W.values + dzl @ cell.V.values
    dctx = None
    if ctx is not None:
        cell.Wc.grad += dzg.T @ ctx
        cell.Vc.grad += dzl.T @ ctx
        dctx = dzg @ cell.Wc.values + dzl @ cell.Vc.values
    return da[:, :H], dct * f, da[:, H:], dctx


def lstm_step(cell: LstmCell, h_prev, c_prev, x, context=None) -> Tuple[np.ndarray, np.ndarray]:
    """One LSTM update. Accepts a single vector or a block of rows."""
    single = np.ndim(h_prev) == 1
    h_prev, c_prev, x = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (h_prev, c_prev, x))
    ctx = None if context is None else np.atleast_2d(np.asarray(context, dtype=np.float64))
    h, c, _ = _step_forward(cell, h_prev, c_prev, x, ctx)
    return (h[0], c[0]) if single else (h, c)


# --- session inputs -------------------------------------------------------

def session_weights(ratings: sp.csr_matrix) -> sp.csr_matrix:
    """Rows of (rating / 5) / n_rated: multiplying by an embedding table gives
    the rating-weighted mean of the rated counterparts' embeddings."""
    counts = np.diff(ratings.indptr)
    scale = np.repeat(1.0 / np.maximum(counts, 1), counts)
    out = ratings.copy().astype(np.float64)
    out.data = out.data / MAX_RATING * scale
    return out


def embed_session_input(table: np.ndarray, counterparts: Sequence[int], ratings: Sequence[float]) -> np.ndarray:
    """Embedding of one session: mean of ``table[k] * rating_k / 5``."""
    counterparts = np.asarray(counterparts, dtype=np.int64)
    if len(counterparts) == 0:
        return np.zeros(table.shape[1])
    w = np.asarray(ratings, dtype=np.float64) / MAX_RATING
    return (w[:, None] * table[counterparts]).sum(axis=0) / len(counterparts)


@dataclass(frozen=True, eq=False)
class SessionInputs:
    """Per-session weight matrices for both sides (see ``session_weights``)."""

    user: Tuple[sp.csr_matrix, ...]   # U x M each
    movie: Tuple[sp.csr_matrix, ...]  # M x U each

    @property
    def num_sessions(self) -> int:
        return len(self.user)

    @classmethod
    def from_sessions(cls, sessions: SessionizedDataset) -> "SessionInputs":
        return cls(tuple(session_weights(m) for m in sessions.user_sessions),
                   tuple(session_weights(m) for m in sessions.movie_sessions))

    def side(self, name: str) -> Tuple[sp.csr_matrix, ...]:
        return self.user if name == "user" else self.movie


# --- context providers ----------------------------------------------------

class ContextProvider(Protocol):
    def forward(self, ids: np.ndarray, h_prev: np.ndarray): ...
    def backward(self, ids: np.ndarray, cache, dctx: np.ndarray) -> Optional[np.ndarray]: ...


# --- trajectories ---------------------------------------------------------

@dataclass
class Trajectory:
    """States of a block of entities. ``hs[k]`` is the hidden state after k
    steps; ``state(t)`` maps session time t onto that index."""

    ids: np.ndarray
    hs: np.ndarray
    cs: np.ndarray
    offset: int
    steps: List[tuple] = field(default_factory=list)
    caches: Optional[List[tuple]] = None

    @property
    def num_states(self) -> int:
        return self.hs.shape[0] - self.offset

    def state(self, t: int) -> np.ndarray:
        if not 0 <= t < self.num_states:
            raise IndexError(f"session {t} outside encoded range 0..{self.num_states - 1}")
        return self.hs[t + self.offset]


class SessionEncoder:
    """One side's LSTM plus its input embedding table and optional poster
    projection (movie side only)."""

    def __init__(self, cell: LstmCell, table: ParamTensor, content_proj: Optional[ParamTensor] = None):
        self.cell = cell
        self.table = table
        self.content_proj = content_proj

    def encode(self, ids: np.ndarray, inputs: Sequence[sp.csr_matrix], num_steps: Optional[int] = None,
               content: Optional[np.ndarray] = None, h0: Optional[np.ndarray] = None,
               context: Optional[ContextProvider] = None, keep_cache: bool = True) -> Trajectory:
        """Roll the LSTM over sessions ``0..num_steps-1`` for entities ``ids``.

        With a content projection the first step consumes ``proj(content)``
        (zeros when ``content`` is None), so session-time state t sits at
        index t + 1.
        """
        ids = np.asarray(ids, dtype=np.int64)
        n, H = len(ids), self.cell.hidden
        num_steps = len(inputs) if num_steps is None else num_steps
        if num_steps > len(inputs):
            raise IndexError(f"{num_steps} steps requested, only {len(inputs)} sessions available")
        steps: List[tuple] = []
        if self.content_proj is not None:
            steps.append(("content",))
        steps.extend(("session", t) for t in range(num_steps))
        if context is None and self.cell.Wc is not None:
            raise ValueError("cell has a context slot but no context provider was given")

        hs = np.zeros((len(steps) + 1, n, H))
        cs = np.zeros_like(hs)
        if h0 is not None:
            hs[0] = h0
        caches = [] if keep_cache else None
        for k, step in enumerate(steps):
            if step[0] == "content":
                rows = np.zeros((n, self.content_proj.shape[1])) if content is None else content[ids]
                x = rows @ self.content_proj.values.T
                step_in = rows
            else:
                w = inputs[step[1]][ids]
                x = np.asarray(w @ self.table.values)
                step_in = w
            ctx = ctx_cache = None
            if context is not None:
                ctx, ctx_cache = context.forward(ids, hs[k])
            hs[k + 1], cs[k + 1], cache = _step_forward(self.cell, hs[k], cs[k], x, ctx)
            if keep_cache:
                caches.append((step_in, cache, ctx_cache))
        traj = Trajectory(ids, hs, cs, 1 if self.content_proj is not None else 0, steps, caches)
        traj.context = context  # type: ignore[attr-defined]
        return traj

    def backward(self, traj: Trajectory, dH: np.ndarray, dC: Optional[np.ndarray] = None,
                 truncate: int = 0):
        """Reverse-mode pass; ``dH[k]`` is dL/d hs[k]. Returns (dh0, dc0).

        ``truncate > 0`` cuts the carried gradient at every multiple of that
        many steps (chunked truncated BPTT); 0 keeps the exact gradient.
        """
        if traj.caches is None:
            raise RuntimeError("trajectory was encoded without a cache")
        if dH.shape != traj.hs.shape:
            raise ValueError(f"gradient shape {dH.shape} != state shape {traj.hs.shape}")
        context = getattr(traj, "context", None)
        dh = dH[-1].copy()
        dc = np.zeros_like(dh) if dC is None else dC[-1].copy()
        for k in range(len(traj.steps) - 1, -1, -1):
            step_in, cache, ctx_cache = traj.caches[k]
            dh_prev, dc_prev, dx, dctx = _step_backward(self.cell, cache, dh, dc)
            if traj.steps[k][0] == "content":
                self.content_proj.grad += dx.T @ step_in
            else:
                self.table.grad += np.asarray(step_in.T @ dx)
            if dctx is not None:
                extra = context.backward(traj.ids, ctx_cache, dctx)
                if extra is not None:
                    dh_prev = dh_prev + extra
            if truncate and k % truncate == 0 and k > 0:
                dh_prev = np.zeros_like(dh_prev)
                dc_prev = np.zeros_like(dc_prev)
            dh = dh_prev + dH[k]
            dc = dc_prev if dC is None else dc_prev + dC[k]
        return dh, dc


def encode_trajectory(encoder: SessionEncoder, sessions: Sequence[sp.csr_matrix], entity: int,
                      content: Optional[np.ndarray] = None, contexts: Optional[Sequence[np.ndarray]] = None,
                      h0: Optional[np.ndarray] = None) -> Trajectory:
    """Single-entity convenience wrapper. ``contexts`` (one vector per step,
    content step included) feeds the cell's context slot."""
    provider = None
    if contexts is not None:
        n_steps = len(sessions) + (1 if encoder.content_proj is not None else 0)
        if len(contexts) != n_steps:
            raise ValueError(f"{len(contexts)} context vectors for {n_steps} steps")
        provider = _FixedContexts(contexts)
    ids = np.array([entity])
    return encoder.encode(ids, sessions, content=content,
                          h0=None if h0 is None else np.atleast_2d(h0), context=provider)


class _FixedContexts:
    """Replays precomputed context vectors, one per step."""

    def __init__(self, contexts):
        self.contexts = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in contexts]
        self.k = 0

    def forward(self, ids, h_prev):
        ctx = self.contexts[self.k % len(self.contexts)]
        self.k += 1
        return ctx, None

    def backward(self, ids, cache, dctx):
        return None


def bptt_backward(encoder: SessionEncoder, traj: Trajectory, state_grads: Dict[int, np.ndarray],
                  truncate: int = 0):
    """Backpropagate losses attached to session-time states.

    ``state_grads`` maps a session time t to dL/dh_t for the trajectory's
    block of entities. Parameter gradients accumulate into the encoder's
    tensors; the gradient w.r.t. the initial state is returned.
    """
    dH = np.zeros_like(traj.hs)
    for t, g in state_grads.items():
        if not 0 <= t < traj.num_states:
            raise IndexError(f"no state for session {t}")
        dH[t + traj.offset] += np.reshape(g, dH.shape[1:])
    return encoder.backward(traj, dH, truncate=truncate)
