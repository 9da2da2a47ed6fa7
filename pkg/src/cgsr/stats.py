"""Transition-asymmetry statistics over the session graph.

For qualifying unordered item pairs {a, b} (at least one observed transition,
both nodes with outgoing transitions) the two conditional transition
probabilities p(a|b) and p(b|a) are each ranked into ten equal-size groups;
the 10x10 grid counts pairs per group combination. Off-diagonal mass signals
asymmetric (direction-like) relationships.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import SessionGraph


class StatsError(ValueError):
    pass


def pab(g: SessionGraph, a: int, b: int) -> float:
    """Probability that ``a`` follows ``b``: count(b -> a) / outgoing(b)."""
    out_b = int(g.out_total[b])
    if out_b <= 0:
        raise StatsError(f"no outgoing transitions from item {b}")
    return g.w(b, a) / out_b


@dataclass
class AsymmetryGrid:
    grid: np.ndarray                  # 10x10 int counts
    pab_boundaries: list              # per-group max of p(a|b), ascending
    pba_boundaries: list
    n_pairs: int
    eps: float = None
    asymmetric_fraction: float = None  # share of pairs with |p(a|b)-p(b|a)| >= eps

    def save(self, grid_path, boundaries_path) -> None:
        with open(grid_path, "w", encoding="utf-8") as fh:
            for row in self.grid:
                fh.write(",".join(str(int(c)) for c in row) + "\n")
        with open(boundaries_path, "w", encoding="utf-8") as fh:
            fh.write("group,pab_upper,pba_upper\n")
            for i, (x, y) in enumerate(zip(self.pab_boundaries, self.pba_boundaries), start=1):
                fh.write(f"{i},{x:.12g},{y:.12g}\n")
            if self.eps is not None:
                fh.write(f"# eps={self.eps:.12g} asymmetric_fraction={self.asymmetric_fraction:.12g}\n")


def _decile_groups(keyed):
    """keyed: list of (value, tiebreak...) sorted ascending. Returns group id
    per original position and the per-group max value. Sizes differ by at
    most one (the first remainder groups take the extra pair)."""
    n = len(keyed)
    order = sorted(range(n), key=lambda i: keyed[i])
    base, extra = divmod(n, 10)
    groups = [0] * n
    boundaries = []
    pos = 0
    for gi in range(10):
        size = base + (1 if gi < extra else 0)
        chunk = order[pos: pos + size]
        for i in chunk:
            groups[i] = gi
        boundaries.append(keyed[chunk[-1]][0] if chunk else float("nan"))
        pos += size
    return groups, boundaries


def build_grid(g: SessionGraph, eps: float = None) -> AsymmetryGrid:
    """Pair orientation is fixed by index order (a < b) before grouping."""
    candidates = sorted({(min(i, j), max(i, j)) for (i, j) in g.pair_count if i != j})
    unique = []
    for a, b in candidates:
        if g.out_total[a] <= 0 or g.out_total[b] <= 0:
            continue
        unique.append((a, b, pab(g, a, b), pab(g, b, a)))
    if len(unique) < 10:
        raise StatsError(f"need at least 10 qualifying pairs, have {len(unique)}")

    ab_groups, ab_bounds = _decile_groups([(p_ab, a, b) for a, b, p_ab, _ in unique])
    ba_groups, ba_bounds = _decile_groups([(p_ba, a, b) for a, b, _, p_ba in unique])
    grid = np.zeros((10, 10), dtype=np.int64)
    for idx in range(len(unique)):
        grid[ab_groups[idx], ba_groups[idx]] += 1

    frac = None
    if eps is not None:
        frac = sum(1 for _, _, p_ab, p_ba in unique if abs(p_ab - p_ba) >= eps) / len(unique)
    return AsymmetryGrid(grid, ab_bounds, ba_bounds, len(unique), eps, frac)
