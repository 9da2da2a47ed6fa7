"""Ranking evaluation: HR@K, MRR@K, NDCG@K over next-item prediction.

Protocol: every prefix of each test session (length >= 1) predicts its next
item against the full catalog. Ties rank by smaller item index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model


def rank_target(scores: np.ndarray, target: int) -> int:
    """1-based rank: strictly better scores, plus equal scores at smaller
    index, count ahead of the target."""
    scores = np.asarray(scores).reshape(-1)
    t = scores[target]
    better = int((scores > t).sum())
    tied_before = int((scores[:target] == t).sum())
    return 1 + better + tied_before


def metrics(ranks, k: int):
    """(hr, mrr, ndcg) at cutoff k for single-relevant-item ranking."""
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    hr = mrr = ndcg = 0.0
    for r in ranks:
        if r <= k:
            hr += 1.0
            mrr += 1.0 / r
            ndcg += 1.0 / np.log2(r + 1.0)
    n = len(ranks)
    return hr / n, mrr / n, ndcg / n


def oracle_metrics(score_vectors, targets, k: int):
    """Independent route: ranks from a full sort with index tie-break instead
    of counting, then the same closed-form per-rank contributions."""
    hits, rrs, gains = [], [], []
    for scores, target in zip(score_vectors, targets):
        n = len(scores)
        order = np.lexsort((np.arange(n), -np.asarray(scores)))
        rank = int(np.where(order == target)[0][0]) + 1
        hits.append(1.0 if rank <= k else 0.0)
        rrs.append(1.0 / rank if rank <= k else 0.0)
        gains.append(1.0 / np.log2(rank + 1.0) if rank <= k else 0.0)
    return sum(hits) / len(hits), sum(rrs) / len(rrs), sum(gains) / len(gains)


@dataclass
class RankingResult:
    ranks: list
    aggregates: dict = field(default_factory=dict)   # (metric, k) -> value

    def csv_rows(self):
        rows = ["metric,K,value"]
        for (name, k) in sorted(self.aggregates, key=lambda mk: (mk[0], mk[1])):
            rows.append(f"{name},{k},{self.aggregates[(name, k)]:.12g}")
        return rows


def session_scores(items, enc: model.EncodedItems, pvals: dict,
                   config) -> np.ndarray:
    """Candidate probabilities for one session prefix (forward only)."""
    sess = model.encode_session_all(items, enc, pvals,
                                    config.normalize_session_attention,
                                    use_preference=not config.disable_preference)
    parts = model.score(sess, enc, pvals,
                        use_causality=not config.disable_causality,
                        use_correlation=not config.disable_correlation,
                        use_preference=not config.disable_preference)
    return parts.probabilities.data[:, 0]


def _rank_chunk(prefixes, targets, enc, pvals, config) -> list:
    sess = model.encode_sessions_batch(prefixes, enc, pvals,
                                       config.normalize_session_attention,
                                       use_preference=not config.disable_preference)
    probs = model.score_batch(sess, enc, pvals,
                              use_causality=not config.disable_causality,
                              use_correlation=not config.disable_correlation,
                              use_preference=not config.disable_preference)
    n = probs.data.shape[0] // len(prefixes)
    table = probs.data.reshape(len(prefixes), n)
    return [rank_target(table[i], targets[i]) for i in range(len(prefixes))]


def evaluate_model(params: model.Parameters, ginputs: dict, config, sessions,
                   ks=(5, 10, 20), threads: int = 1, chunk: int = 512) -> RankingResult:
    """Rank every (prefix, next-item) pair of the given sessions."""
    pvals = params.to_values()
    enc = model.encode_items(ginputs, pvals, config.heads, config.wgat_layers)
    samples = [(s.items[:k], s.items[k]) for s in sessions for k in range(1, len(s.items))]
    chunks = [samples[lo: lo + chunk] for lo in range(0, len(samples), chunk)]

    def rank_many(part):
        return _rank_chunk([p for p, _ in part], [t for _, t in part], enc, pvals, config)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = [r for part in pool.map(rank_many, chunks) for r in part]
    else:
        ranks = [r for part in chunks for r in rank_many(part)]

    result = RankingResult(ranks=ranks)
    for k in ks:
        hr, mrr, ndcg = metrics(ranks, k)
        result.aggregates[("hr", k)] = hr
        result.aggregates[("mrr", k)] = mrr
        result.aggregates[("ndcg", k)] = ndcg
    return result
