"""Binary-relevance ranking metrics and the report that aggregates them.

The per-list metrics are plain Python loops over ranks so that results are
reproducible to the last bit regardless of array backends.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

CUTOFFS = (3, 5, 10)
METRIC_NAMES = tuple(f"precision_at_{n}" for n in CUTOFFS) + tuple(f"ndcg_at_{n}" for n in CUTOFFS) + ("map", "mrr")


@dataclass(frozen=True)
class RankedList:
    """Movies in descending score order plus the user's held-out positives.

    ``relevant`` may contain movies that are absent from ``movies`` (for
    example outside the candidate set); they still count towards the ideal.
    """

    user: int
    movies: tuple
    relevant: frozenset

    def __post_init__(self):
        object.__setattr__(self, "movies", tuple(int(m) for m in self.movies))
        object.__setattr__(self, "relevant", frozenset(int(m) for m in self.relevant))
        if len(set(self.movies)) != len(self.movies):
            raise ValueError(f"user {self.user}: ranked list has duplicate movies")

    @property
    def flags(self) -> List[bool]:
        return [m in self.relevant for m in self.movies]

    @property
    def num_relevant(self) -> int:
        return len(self.relevant)


def precision_at_n(rl: RankedList, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return sum(rl.flags[:n]) / n


def dcg_at_n(flags: Sequence[bool], n: int) -> float:
    total = 0.0
    for rank, rel in enumerate(flags[:n], start=1):
        if rel:
            total += 1.0 / math.log2(rank + 1)
    return total


def ndcg_at_n(rl: RankedList, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    ideal = dcg_at_n([True] * min(n, rl.num_relevant), n)
    if ideal == 0.0:
        return 0.0
    return dcg_at_n(rl.flags, n) / ideal


def mean_reciprocal_rank(rl: RankedList) -> float:
    for rank, rel in enumerate(rl.flags, start=1):
        if rel:
            return 1.0 / rank
    return 0.0


def mean_average_precision(rl: RankedList) -> float:
    if rl.num_relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, rel in enumerate(rl.flags, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / rl.num_relevant


def list_metrics(rl: RankedList) -> Dict[str, float]:
    out = {}
    for n in CUTOFFS:
        out[f"precision_at_{n}"] = precision_at_n(rl, n)
    for n in CUTOFFS:
        out[f"ndcg_at_{n}"] = ndcg_at_n(rl, n)
    out["map"] = mean_average_precision(rl)
    out["mrr"] = mean_reciprocal_rank(rl)
    return out


@dataclass
class MetricReport:
    label: str
    per_user: Dict[int, Dict[str, float]]
    config_hash: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    @property
    def user_count(self) -> int:
        return len(self.per_user)

    @property
    def means(self) -> Dict[str, float]:
        if not self.per_user:
            return {k: 0.0 for k in METRIC_NAMES}
        users = sorted(self.per_user)
        return {k: math.fsum(self.per_user[u][k] for u in users) / len(users) for k in METRIC_NAMES}

    def __getitem__(self, key: str) -> float:
        return self.means[key]

    def to_csv(self, per_user: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "user", *METRIC_NAMES, "user_count", "config_hash"])
        m = self.means
        w.writerow([self.label, "mean", *(f"{m[k]:.10f}" for k in METRIC_NAMES), self.user_count, self.config_hash])
        if per_user:
            for u in sorted(self.per_user):
                row = self.per_user[u]
                w.writerow([self.label, u, *(f"{row[k]:.10f}" for k in METRIC_NAMES), 1, self.config_hash])
        return buf.getvalue()

    def to_table(self) -> str:
        m = self.means
        head = " ".join(f"{k:>14}" for k in METRIC_NAMES)
        vals = " ".join(f"{m[k]:>14.4f}" for k in METRIC_NAMES)
        return f"{self.label} ({self.user_count} users)\n{head}\n{vals}"


def build_report(label: str, lists: Iterable[RankedList], config_hash: str = "") -> MetricReport:
    """Users without any held-out positive are left out of the means."""
    per_user = {rl.user: list_metrics(rl) for rl in lists if rl.num_relevant > 0}
    return MetricReport(label, per_user, config_hash)


def reports_to_csv(reports: Sequence[MetricReport], key_columns: Optional[Mapping[str, Sequence]] = None) -> str:
    """Mean rows of several reports in one table; ``key_columns`` adds leading
    columns (one value per report), e.g. the sweep parameter."""
    key_columns = dict(key_columns or {})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*key_columns, "label", *METRIC_NAMES, "user_count", "config_hash"])
    for i, r in enumerate(reports):
        m = r.means
        w.writerow([*(v[i] for v in key_columns.values()), r.label,
                    *(f"{m[k]:.10f}" for k in METRIC_NAMES), r.user_count, r.config_hash])
    return buf.getvalue()
