"""Definitional reference implementations used to cross-check the library."""
import itertools

import numpy as np


def precision(flags, n):
    top = np.zeros(n)
    k = min(n, len(flags))
    top[:k] = flags[:k]
    return top.sum() / n


def dcg(flags, n):
    f = np.asarray(flags[:n], dtype=float)
    return float(np.sum(f / np.log2(np.arange(2, len(f) + 2))))


def ndcg(flags, n, total_relevant):
    ideal = dcg([1] * min(n, total_relevant), n)
    return 0.0 if ideal == 0 else dcg(flags, n) / ideal


def mrr(flags):
    hits = np.flatnonzero(flags)
    return 0.0 if len(hits) == 0 else 1.0 / (hits[0] + 1)


def average_precision(flags, total_relevant):
    if total_relevant == 0:
        return 0.0
    f = np.asarray(flags, dtype=float)
    prec_at_rank = np.cumsum(f) / np.arange(1, len(f) + 1)
    return float(np.sum(prec_at_rank[f == 1])) / total_relevant


def all_lists(max_len=6, max_relevant=3):
    """Every binary relevance vector up to ``max_len`` with at most
    ``max_relevant`` relevant items in total, with each admissible count of
    relevant items that fall outside the list."""
    for length in range(1, max_len + 1):
        for flags in itertools.product((0, 1), repeat=length):
            inside = sum(flags)
            if inside > max_relevant:
                continue
            for total in range(inside, max_relevant + 1):
                yield list(flags), total


def enumerate_gradient(logits, rewards):
    """Exact gradient of E_{m~softmax}[r_m] w.r.t. the logits."""
    p = np.exp(logits - logits.max())
    p /= p.sum()
    mean = p @ rewards
    return p * (rewards - mean)
