"""Per-recommendation explanation scores.

Session level: the three score components (causality / correlation /
preference) for the recommended item, recomputed through the same scoring
path the model uses. Item level: each session item's contribution to the
recommendation under the causality and correlation channels, obtained by
feeding the item's own embedding through the session readout (duplicated
concatenation) and dotting against the candidate's embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model


@dataclass
class ItemAttribution:
    position: int
    item_index: int
    causality: float
    correlation: float
    causality_rank: int = 0
    correlation_rank: int = 0


@dataclass
class ExplanationReport:
    session_id: str
    item_index: int
    score_causality: float
    score_correlation: float
    score_preference: float
    rows: list

    def to_text(self, item_label=None, row_labels=None) -> str:
        label = item_label if item_label is not None else str(self.item_index)
        lines = [
            f"session: {self.session_id}",
            f"recommended_item: {label}",
            f"score_causality: {self.score_causality:.12g}",
            f"score_correlation: {self.score_correlation:.12g}",
            f"score_preference: {self.score_preference:.12g}",
            "items:",
            "position\titem\tcausality\tcorrelation\tcausality_rank\tcorrelation_rank",
        ]
        for i, row in enumerate(self.rows):
            item = row_labels[i] if row_labels is not None else str(row.item_index)
            lines.append(f"{row.position}\t{item}\t{row.causality:.12g}\t"
                         f"{row.correlation:.12g}\t{row.causality_rank}\t{row.correlation_rank}")
        return "\n".join(lines) + "\n"


def _ranks_desc(values) -> list:
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    ranks = [0] * len(values)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def explain(session, item_index: int, params: model.Parameters,
            enc: model.EncodedItems, config) -> ExplanationReport:
    """Explanation scores for recommending ``item_index`` after ``session``.

    Requires the full model (both causality and correlation graphs encoded).
    """
    if not 0 <= item_index < params.n_items:
        raise IndexError(f"item {item_index} not in vocabulary of {params.n_items}")
    if enc.cause is None or enc.effect is None or enc.corr is None:
        raise ValueError("explanations need causality and correlation encodings")

    pvals = params.to_values()
    sess = model.encode_session_all(session.items, enc, pvals,
                                    config.normalize_session_attention,
                                    use_preference=True)
    parts = model.score(sess, enc, pvals)
    j = item_index
    score_ca = float(parts.causality.data[j, 0])
    score_r = float(parts.correlation.data[j, 0])
    score_p = float(parts.preference.data[j, 0])

    w_c = params["cause.sess_readout"]
    w_e = params["effect.sess_readout"]
    w_r = params["corr.sess_readout"]
    gamma = float(params["reverse_penalty"][0, 0])
    x_c, x_e, x_r = enc.cause.data, enc.effect.data, enc.corr.data

    rows = []
    for pos, i in enumerate(session.items, start=1):
        proj_c = w_c @ np.concatenate([x_c[i], x_c[i]])
        proj_e = w_e @ np.concatenate([x_e[i], x_e[i]])
        proj_r = w_r @ np.concatenate([x_r[i], x_r[i]])
        ca = float(proj_c @ x_e[j]) - gamma * float(proj_e @ x_c[j])
        rr = float(proj_r @ x_r[j])
        rows.append(ItemAttribution(pos, i, ca, rr))
    for row, rank in zip(rows, _ranks_desc([r.causality for r in rows])):
        row.causality_rank = rank
    for row, rank in zip(rows, _ranks_desc([r.correlation for r in rows])):
        row.correlation_rank = rank
    return ExplanationReport(session.id, j, score_ca, score_r, score_p, rows)


def write_reports(reports, out_dir, vocab=None) -> list:
    """One file per (session, item) pair: <session_id>__<item_id>.txt."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for report in reports:
        label = vocab.item_of[report.item_index] if vocab else str(report.item_index)
        row_labels = [vocab.item_of[r.item_index] for r in report.rows] if vocab else None
        path = os.path.join(out_dir, f"{report.session_id}__{label}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_text(item_label=label, row_labels=row_labels))
        paths.append(path)
    return paths
