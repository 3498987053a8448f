"""Parameter storage, SGD with clipping + L2, seeded RNG, gradient checking and
the binary checkpoint container shared by every trainable component."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "PCG64"

CHECKPOINT_MAGIC = b"LSICCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or parameter stops being finite."""


class GradientCheckError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != {self.values.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.name, self.values.copy(), self.grad.copy())


ParamSet = Dict[str, ParamTensor]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    clip: float = 0.2
    l2_lambda: float = 0.05

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != RNG_ALGORITHM:
        raise CheckpointError(f"unsupported RNG {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def init_uniform(name: str, shape, low: float, high: float, rng: np.random.Generator) -> ParamTensor:
    """Draw every entry uniformly from ``[low, high)``."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"{name}: empty shape {shape}")
    if not low < high:
        raise ValueError(f"{name}: empty interval [{low}, {high})")
    return ParamTensor(name, rng.uniform(low, high, size=shape))


def init_zeros(name: str, shape) -> ParamTensor:
    return ParamTensor(name, np.zeros(shape, dtype=DTYPE))


def zero_grads(params: Mapping[str, ParamTensor]) -> None:
    for p in params.values():
        p.zero_grad()


def sgd_step(params: Mapping[str, ParamTensor], cfg: OptimizerConfig,
             names: Optional[Iterable[str]] = None) -> None:
    """v <- v - lr * clip(g + l2 * v, -c, c), then zero the gradient.

    All gradients are validated before any value is touched, so a bad
    gradient leaves the parameter set unchanged.
    """
    selected = [params[n] for n in names] if names is not None else list(params.values())
    for p in selected:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in tensor {p.name!r}")
    for p in selected:
        direction = p.grad + cfg.l2_lambda * p.values if cfg.l2_lambda else p.grad
        p.values -= cfg.learning_rate * np.clip(direction, -cfg.clip, cfg.clip)
        if not np.all(np.isfinite(p.values)):
            raise NonFiniteError(f"tensor {p.name!r} became non-finite")
        p.zero_grad()


def copy_params(params: Mapping[str, ParamTensor]) -> ParamSet:
    return {k: p.copy() for k, p in params.items()}


def finite_diff_check(
    f: Callable[[], Tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, ParamTensor],
    epsilon: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients with central differences.

    ``f`` evaluates the loss at the current parameter values and returns
    ``(loss, grads)`` where ``grads`` maps parameter names to arrays. Returns
    the maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    loss0, grads = f()
    loss1, _ = f()
    if loss0 != loss1:
        raise GradientCheckError(f"f is not deterministic ({loss0!r} != {loss1!r})")
    grads = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in grads.items()}

    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else make_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in coords:
        p = params[name]
        orig = p.values[idx]
        p.values[idx] = orig + epsilon
        plus, _ = f()
        p.values[idx] = orig - epsilon
        minus, _ = f()
        p.values[idx] = orig
        numeric = (plus - minus) / (2.0 * epsilon)
        analytic = grads[name][idx] if name in grads else 0.0
        err = abs(analytic - numeric) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst


# --- checkpoint container -------------------------------------------------
#
# layout: MAGIC(8) | version u32 | header_len u64 | header JSON (utf-8) | payload
# Every tensor is stored as little-endian float64 at header["tensors"][i]["offset"].

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(DTYPE)
    return tensors, header["meta"]
