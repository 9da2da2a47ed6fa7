"""Item-transition graphs built from training sessions.

Three derived graphs feed the encoder:

* effect graph: directed transition frequencies with every common-cause
  contribution subtracted, normalized by the source's outgoing total;
* cause graph: the effect graph with every edge reversed;
* correlation graph: undirected, one first-order component plus three raw
  second-order components (chain / fork / collider) kept separate so the
  trainable channel weights can be composed at model time.

Counting is exact integer frequency counting; derived weights are plain
float64 ratios. All iteration is in sorted key order, so identical session
multisets produce bit-identical graphs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SessionGraph:
    """Directed transition multigraph: pair counts, contiguous-triple counts,
    per-node outgoing/incoming totals and neighbor sets."""

    n_items: int
    pair_count: dict = field(default_factory=dict)        # (i, j) -> int
    triple_count: dict = field(default_factory=dict)      # (i, j) -> {k: int}
    out_total: np.ndarray = None
    in_total: np.ndarray = None
    out_nbrs: dict = field(default_factory=dict)          # i -> sorted tuple
    in_nbrs: dict = field(default_factory=dict)

    def w(self, i: int, j: int) -> int:
        return self.pair_count.get((i, j), 0)


@dataclass
class WeightedDigraph:
    n_items: int
    edges: dict = field(default_factory=dict)             # (src, dst) -> float

    def sorted_edges(self):
        return [(i, j, self.edges[(i, j)]) for i, j in sorted(self.edges)]


@dataclass
class CorrelationGraph:
    """Undirected graph keyed by (a, b) with a < b; each edge carries the
    component vector (first_order, chain, fork, collider), all >= 0."""

    n_items: int
    edges: dict = field(default_factory=dict)             # (a, b) -> (w1, ch, fo, co)

    def sorted_edges(self):
        return [(a, b) + tuple(self.edges[(a, b)]) for a, b in sorted(self.edges)]


def build_session_graph(sessions, n_items: int) -> SessionGraph:
    """Count contiguous pairs and triples across item-index sequences."""
    pair = defaultdict(int)
    triple = defaultdict(lambda: defaultdict(int))
    out_nbrs = defaultdict(set)
    in_nbrs = defaultdict(set)
    for s in sessions:
        items = list(s)
        for v in items:
            if not 0 <= v < n_items:
                raise ValueError(f"item index {v} out of range [0, {n_items})")
        for i, j in zip(items, items[1:]):
            pair[(i, j)] += 1
            out_nbrs[i].add(j)
            in_nbrs[j].add(i)
        for k, i, j in zip(items, items[1:], items[2:]):
            triple[(i, j)][k] += 1

    out_total = np.zeros(n_items, dtype=np.int64)
    in_total = np.zeros(n_items, dtype=np.int64)
    for (i, j), c in pair.items():
        out_total[i] += c
        in_total[j] += c
    return SessionGraph(
        n_items=n_items,
        pair_count=dict(pair),
        triple_count={k: dict(v) for k, v in triple.items()},
        out_total=out_total,
        in_total=in_total,
        out_nbrs={i: tuple(sorted(v)) for i, v in out_nbrs.items()},
        in_nbrs={i: tuple(sorted(v)) for i, v in in_nbrs.items()},
    )


def effect_graph(g: SessionGraph, subtract_common_cause: bool = True,
                 unit_weights: bool = False) -> WeightedDigraph:
    """Directed causality strengths. For each observed edge (i, j):

        (count(i, j) - sum over common predecessors k of count(k, i, j))
        / total outgoing count of i

    Zero-weight edges are kept: the weight is an input feature downstream,
    not a mask. ``subtract_common_cause=False`` skips the correction;
    ``unit_weights=True`` sets every retained edge to 1.0.
    """
    out = {}
    for (i, j), c in sorted(g.pair_count.items()):
        if unit_weights:
            out[(i, j)] = 1.0
            continue
        sub = 0
        if subtract_common_cause:
            trip = g.triple_count.get((i, j), {})
            common = set(g.in_nbrs.get(i, ())) & set(g.in_nbrs.get(j, ()))
            sub = sum(trip.get(k, 0) for k in sorted(common))
        denom = int(g.out_total[i])
        if denom <= 0:
            raise AssertionError(f"edge ({i},{j}) with zero outgoing total")
        out[(i, j)] = (c - sub) / denom
    return WeightedDigraph(g.n_items, out)


def cause_graph(e: WeightedDigraph) -> WeightedDigraph:
    """Reverse every edge, weights unchanged."""
    return WeightedDigraph(e.n_items, {(j, i): w for (i, j), w in e.edges.items()})


def add_second_order_effect_edges(e: WeightedDigraph) -> WeightedDigraph:
    """Variant hook: add chain compositions i->k->j with weight
    sum_k w(i,k)*w(k,j) onto the effect graph (new edges or added to
    existing weights)."""
    succ = defaultdict(list)
    for (i, k), w in e.edges.items():
        succ[i].append((k, w))
    out = dict(e.edges)
    for i in sorted(succ):
        for k, w_ik in sorted(succ[i]):
            for j, w_kj in sorted(succ.get(k, [])):
                if i == j:
                    continue
                out[(i, j)] = out.get((i, j), 0.0) + w_ik * w_kj
    return WeightedDigraph(e.n_items, out)


def _frac(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def correlation_graph(g: SessionGraph) -> CorrelationGraph:
    """Undirected correlation components per unordered item pair.

    first_order: both direction terms 2*w(i,j)/(out_i + in_j), each present
    only when that direction was observed. chain / fork / collider: the raw
    second-order fractions over shared neighbors, stored without their
    trainable channel weights. Pairs with all four components zero are
    omitted; empty-denominator fractions are zero.
    """
    out_t = g.out_total
    in_t = g.in_total
    pairs = set()
    for (i, j) in g.pair_count:
        if i != j:
            pairs.add((min(i, j), max(i, j)))
    # second-order candidates: any two distinct neighbors of a shared node
    for k in sorted(set(g.out_nbrs) | set(g.in_nbrs)):
        around = sorted(set(g.out_nbrs.get(k, ())) | set(g.in_nbrs.get(k, ())))
        for x in range(len(around)):
            for y in range(x + 1, len(around)):
                if around[x] != k and around[y] != k:
                    pairs.add((around[x], around[y]))

    edges = {}
    for a, b in sorted(pairs):
        w_ab, w_ba = g.w(a, b), g.w(b, a)
        w1 = 0.0
        if w_ab > 0:
            w1 += _frac(2.0 * w_ab, float(out_t[a] + in_t[b]))
        if w_ba > 0:
            w1 += _frac(2.0 * w_ba, float(out_t[b] + in_t[a]))

        out_a = set(g.out_nbrs.get(a, ()))
        in_a = set(g.in_nbrs.get(a, ()))
        out_b = set(g.out_nbrs.get(b, ()))
        in_b = set(g.in_nbrs.get(b, ()))

        chain = _frac(sum(g.w(a, k) + g.w(k, b) for k in sorted(out_a & in_b) if k not in (a, b)),
                      float(out_t[a] + in_t[b]))
        chain += _frac(sum(g.w(b, k) + g.w(k, a) for k in sorted(out_b & in_a) if k not in (a, b)),
                       float(out_t[b] + in_t[a]))
        fork = _frac(sum(g.w(k, a) + g.w(k, b) for k in sorted(in_a & in_b) if k not in (a, b)),
                     float(in_t[a] + in_t[b]))
        collider = _frac(sum(g.w(a, k) + g.w(b, k) for k in sorted(out_a & out_b) if k not in (a, b)),
                         float(out_t[a] + out_t[b]))

        if w1 > 0 or chain > 0 or fork > 0 or collider > 0:
            edges[(a, b)] = (w1, chain, fork, collider)
    return CorrelationGraph(g.n_items, edges)


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_digraph_csv(g: WeightedDigraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,dst,weight\n")
        for i, j, w in g.sorted_edges():
            fh.write(f"{i},{j},{_fmt(w)}\n")


def write_session_graph_csv(g: SessionGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,dst,count\n")
        for i, j in sorted(g.pair_count):
            fh.write(f"{i},{j},{g.pair_count[(i, j)]}\n")


def write_correlation_csv(g: CorrelationGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("a,b,w1,chain,fork,collider\n")
        for a, b, w1, ch, fo, co in g.sorted_edges():
            fh.write(f"{a},{b},{_fmt(w1)},{_fmt(ch)},{_fmt(fo)},{_fmt(co)}\n")
