"""Run configuration: a flat ``key = value`` file with typed defaults."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

from .errors import ConfigError
from .mixture import VARIANTS

# keys that only say where things go, not what is computed
UNHASHED = ("out_dir",)


@dataclass(frozen=True)
class RunConfig:
    # data
    data_path: str = "data/ml-100k/u.data"
    data_format: str = "movielens"
    content_path: str = ""
    feedback: str = "movielens"
    train_end: str = "auto:0.8"
    test_end: str = "max"
    validation_fraction: float = 0.5
    session_days: int = 30
    split_seed: int = 0
    # model
    mixture: str = "v4"
    factor_dim: int = 5
    hidden: int = 10
    input_dim: int = 15
    attention_hidden: int = 8
    attention_pool_size: int = 0
    init_range: float = 0.05
    identity_init_map: bool = False
    # optimisation
    clip: float = 0.2
    l2_lambda: float = 0.05
    batch_size: int = 128
    mf_epochs: int = 30
    mf_learning_rate: float = 0.05
    pretrain_epochs: int = 3
    pretrain_learning_rate: float = 0.01
    d_pretrain_epochs: int = 0
    gan_epochs: int = 10
    learning_rate: float = 1e-4
    g_steps: int = 1
    d_steps: int = 1
    samples: int = 64
    margin: float = 0.2
    truncate: int = 0
    generator_candidates: str = "all"
    # evaluation
    candidate_n: int = 100
    sweep_candidates: str = "20,50,100,200,500"
    sweep_periods: str = "7,14,30,60"
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.mixture not in VARIANTS:
            raise ConfigError(f"mixture must be one of {', '.join(VARIANTS)}; got {self.mixture!r}")
        if self.data_format not in ("movielens", "netflix"):
            raise ConfigError(f"data_format must be movielens or netflix; got {self.data_format!r}")
        if self.generator_candidates not in ("all", "mf"):
            raise ConfigError("generator_candidates must be 'all' or 'mf'")
        for name in ("factor_dim", "hidden", "input_dim", "attention_hidden", "batch_size", "samples",
                     "candidate_n", "session_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("mf_epochs", "pretrain_epochs", "d_pretrain_epochs", "gan_epochs", "g_steps", "d_steps", "truncate",
                     "attention_pool_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("clip", "mf_learning_rate", "pretrain_learning_rate", "learning_rate", "margin",
                     "init_range"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be >= 0")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        self.int_list("sweep_candidates")
        self.int_list("sweep_periods")

    def int_list(self, key: str) -> List[int]:
        text = getattr(self, key)
        try:
            return [int(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers; got {text!r}") from None

    def items(self) -> List[Tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def dump(self, hashed_only: bool = False) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items() if not (hashed_only and k in UNHASHED))

    @property
    def hash(self) -> str:
        text = "".join(f"{k}={_format(v)}\n" for k, v in self.items() if k not in UNHASHED)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, object]) -> "RunConfig":
        return replace(self, **_coerce_all(overrides))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {kind}") from None
    return text


def _coerce_all(values: Mapping[str, object]) -> Dict[str, object]:
    return {k: _coerce(k, v) for k, v in values.items()}


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{line_no}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: Mapping[str, object] = ()) -> RunConfig:
    values: Dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        values.update(parse_config(text, str(path)))
    values.update(dict(overrides))
    try:
        return RunConfig(**_coerce_all(values))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
