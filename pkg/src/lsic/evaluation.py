"""Evaluation protocol: held-out targets, MF candidate generation, re-ranking
by a mixture scorer and the candidate-count sweep."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import RatingDataset
from .metrics import MetricReport, RankedList, build_report
from .mf import FactorStore, mf_logits, mf_top_candidates, rank_descending
from .mixture import MixtureScorer
from .rnn import SessionInputs


@dataclass(eq=False)
class EvalTargets:
    """Who is evaluated, against which held-out positives, at which session."""

    t: int
    users: np.ndarray
    relevant: Dict[int, frozenset]
    exclude: List[np.ndarray]  # per user: movies rated in training

    def __len__(self) -> int:
        return len(self.users)


def build_targets(heldout: RatingDataset, train: RatingDataset, t: int) -> EvalTargets:
    if heldout.positive is None:
        raise ValueError("held-out data must be labeled")
    rel: Dict[int, set] = {}
    for u, m in zip(heldout.users[heldout.positive].tolist(), heldout.movies[heldout.positive].tolist()):
        rel.setdefault(u, set()).add(m)
    exclude = [np.zeros(0, dtype=np.int64)] * train.num_users
    order = np.argsort(train.users, kind="stable")
    su, sm = train.users[order], train.movies[order]
    bounds = np.searchsorted(su, np.arange(train.num_users + 1))
    for u in range(train.num_users):
        exclude[u] = np.unique(sm[bounds[u]:bounds[u + 1]])
    # a held-out positive that was already rated in training cannot be recommended
    relevant = {}
    for u, ms in rel.items():
        keep = frozenset(ms) - frozenset(exclude[u].tolist())
        if keep:
            relevant[u] = keep
    users = np.array(sorted(relevant), dtype=np.int64)
    return EvalTargets(int(t), users, relevant, exclude)


def candidate_lists(fs: FactorStore, targets: EvalTargets, n: int) -> Dict[int, np.ndarray]:
    return {int(u): mf_top_candidates(fs, int(u), targets.exclude[u], n).movies for u in targets.users}


def rerank(candidates: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by ascending movie id."""
    return rank_descending(scores, candidates)


def mixture_scores(scorer: MixtureScorer, users: np.ndarray, t: int, inputs: SessionInputs,
                   content: Optional[np.ndarray] = None) -> np.ndarray:
    """Pre-activation scores of every movie for the given users at time t."""
    return scorer.score_matrix(users, t, np.arange(scorer.num_movies), inputs, content)


def ranked_lists(fs: FactorStore, scorer: Optional[MixtureScorer], targets: EvalTargets, n: int,
                 inputs: Optional[SessionInputs] = None, content: Optional[np.ndarray] = None,
                 score_table: Optional[np.ndarray] = None) -> List[RankedList]:
    """MF top-n candidates per user, re-ordered by the scorer (MF order when
    ``scorer`` is None)."""
    cands = candidate_lists(fs, targets, n)
    if scorer is not None and score_table is None:
        score_table = mixture_scores(scorer, targets.users, targets.t, inputs, content)
    out = []
    for row, u in enumerate(targets.users.tolist()):
        c = cands[u]
        order = c if score_table is None else rerank(c, score_table[row, c])
        out.append(RankedList(u, tuple(order.tolist()), targets.relevant[u]))
    return out


def rerank_pipeline(fs: FactorStore, scorer: Optional[MixtureScorer], u: int, t: int, N: int,
                    inputs: Optional[SessionInputs] = None, content: Optional[np.ndarray] = None,
                    exclude=(), relevant=()) -> RankedList:
    """Single-user form of the re-rank protocol."""
    cands = mf_top_candidates(fs, u, np.asarray(list(exclude), dtype=np.int64), N).movies
    if scorer is not None and len(cands) > 1:
        s = scorer.score_matrix([u], t, cands, inputs, content)[0]
        cands = rerank(cands, s)
    return RankedList(u, tuple(cands.tolist()), frozenset(relevant))


def full_ranking(scorer: MixtureScorer, targets: EvalTargets, inputs: SessionInputs,
                 content: Optional[np.ndarray] = None) -> List[RankedList]:
    """Every unrated movie ordered by the scorer, no candidate stage."""
    table = mixture_scores(scorer, targets.users, targets.t, inputs, content)
    out = []
    for row, u in enumerate(targets.users.tolist()):
        mask = np.ones(scorer.num_movies, dtype=bool)
        mask[targets.exclude[u]] = False
        avail = np.flatnonzero(mask)
        out.append(RankedList(u, tuple(rerank(avail, table[row, avail]).tolist()), targets.relevant[u]))
    return out


def evaluate(fs: FactorStore, scorer: Optional[MixtureScorer], targets: EvalTargets, n: int,
             label: str, inputs: Optional[SessionInputs] = None, content: Optional[np.ndarray] = None,
             config_hash: str = "") -> MetricReport:
    return build_report(label, ranked_lists(fs, scorer, targets, n, inputs, content), config_hash)


def evaluate_pair(fs: FactorStore, scorer: MixtureScorer, targets: EvalTargets, n: int, label: str,
                  inputs: SessionInputs, content: Optional[np.ndarray] = None, config_hash: str = ""):
    """(MF-only report, mixture report) on the same users and candidates."""
    return (evaluate(fs, None, targets, n, "mf", config_hash=config_hash),
            evaluate(fs, scorer, targets, n, label, inputs, content, config_hash))


def candidate_sweep(fs: FactorStore, scorer: MixtureScorer, targets: EvalTargets, sizes: Sequence[int],
                    label: str, inputs: SessionInputs, content: Optional[np.ndarray] = None,
                    config_hash: str = "") -> List[MetricReport]:
    if not sizes or min(sizes) < 1:
        raise ValueError("candidate sizes must be a non-empty list of positive integers")
    table = mixture_scores(scorer, targets.users, targets.t, inputs, content)
    return [build_report(label, ranked_lists(fs, scorer, targets, n, score_table=table), config_hash)
            for n in sizes]


def validation_metrics(fs: FactorStore, targets: EvalTargets, n: int, inputs: SessionInputs,
                       content: Optional[np.ndarray] = None):
    """Callback for the adversarial loop: (precision@5, ndcg@5) of a scorer."""
    def validate(scorer: MixtureScorer):
        if len(targets) == 0:
            return 0.0, 0.0
        m = evaluate(fs, scorer, targets, n, "validation", inputs, content).means
        return m["precision_at_5"], m["ndcg_at_5"]
    return validate


def mf_full_scores(fs: FactorStore, users) -> np.ndarray:
    return np.stack([mf_logits(fs, int(u)) for u in users]) if len(users) else np.zeros((0, fs.num_movies))
