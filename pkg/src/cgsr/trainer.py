"""Mini-batch Adam training with seeded shuffling, a chronological validation
split for early stopping, and variant switches for every ablation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import evaluate, graphs, model, numcore as nc
from .ingest import augment_prefixes


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    l2_penalty: float = 1e-6
    batch_size: int = 100
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    early_stop_patience: int = 3
    val_fraction: float = 0.1          # last fraction of train sessions, by time
    dim: int = 64
    heads: int = 4
    wgat_layers: int = 1
    augment: bool = True
    self_loops: bool = True
    normalize_session_attention: bool = False
    categorical_ce: bool = False
    disable_causality: bool = False     # drop cause+effect graphs
    disable_correlation: bool = False   # drop correlation graph
    disable_preference: bool = False    # drop the fused preference score
    unit_causal_weights: bool = False   # causal edge features all 1
    keep_common_cause: bool = False     # skip the common-cause subtraction
    second_order_causality: bool = False
    drop_chain: bool = False
    drop_fork: bool = False
    drop_collider: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction outside [0, 1)")
        if self.disable_causality and self.disable_correlation:
            raise ValueError("no graphs left: causality and correlation both disabled")
        if self.disable_causality and self.disable_correlation and self.disable_preference:
            raise ValueError("nothing left to score")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat ``key = value`` text; '#' starts a comment."""
        values = {}
        casts = {f.name: f.type for f in fields(cls)}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected key = value")
                key, val = (part.strip() for part in line.split("=", 1))
                if key not in casts:
                    raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
                kind = casts[key]
                if kind in ("bool", bool):
                    values[key] = val.lower() in ("1", "true", "yes", "on")
                elif kind in ("int", int):
                    values[key] = int(val)
                else:
                    values[key] = float(val)
        return cls(**values)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: model.Parameters, grads: dict, state: AdamState,
              config: TrainConfig):
    """Standard Adam with bias correction; the L2 penalty enters as an added
    gradient term (no decoupled decay). Mutates params/state in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in params.names:
        g = grads[name]
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainError(f"non-finite gradient for {name!r} at step {state.t} ({bad} entries)")
        g = g + config.l2_penalty * params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] = params[name] - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return params, state


def build_model_inputs(session_graph: graphs.SessionGraph, config: TrainConfig) -> dict:
    """Derive the per-graph edge arrays the encoder consumes, honoring every
    variant switch."""
    ginputs = {}
    if not config.disable_causality:
        eff = graphs.effect_graph(session_graph,
                                  subtract_common_cause=not config.keep_common_cause,
                                  unit_weights=config.unit_causal_weights)
        if config.second_order_causality:
            eff = graphs.add_second_order_effect_edges(eff)
        ginputs["effect"] = model.causal_graph_inputs(eff, self_loops=config.self_loops)
        ginputs["cause"] = model.causal_graph_inputs(graphs.cause_graph(eff),
                                                     self_loops=config.self_loops)
    if not config.disable_correlation:
        corr = graphs.correlation_graph(session_graph)
        ginputs["corr"] = model.correlation_graph_inputs(
            corr, self_loops=config.self_loops, drop_chain=config.drop_chain,
            drop_fork=config.drop_fork, drop_collider=config.drop_collider)
    return ginputs


def batch_loss(samples, ginputs: dict, pvals: dict, config: TrainConfig) -> nc.Value:
    """Mean loss over a batch; items are encoded once, sessions as one block."""
    enc = model.encode_items(ginputs, pvals, config.heads, config.wgat_layers)
    sess = model.encode_sessions_batch([s.session.items for s in samples], enc, pvals,
                                       config.normalize_session_attention,
                                       use_preference=not config.disable_preference)
    probs = model.score_batch(sess, enc, pvals,
                              use_causality=not config.disable_causality,
                              use_correlation=not config.disable_correlation,
                              use_preference=not config.disable_preference)
    targets = [s.target for s in samples]
    loss = model.categorical_ce_loss_batch if config.categorical_ce else model.bce_loss_batch
    return loss(probs, targets, enc.pref.data.shape[0])


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_hr20: float
    val_mrr20: float
    val_ndcg20: float


@dataclass
class TrainResult:
    params: model.Parameters
    history: list
    best_epoch: int
    checkpoint_meta: dict


def checkpoint_meta(config: TrainConfig) -> dict:
    """Structural flags eval/explain need to rebuild the forward pass."""
    return {
        "heads": config.heads,
        "wgat_layers": config.wgat_layers,
        "self_loops": int(config.self_loops),
        "normalize_session_attention": int(config.normalize_session_attention),
        "disable_causality": int(config.disable_causality),
        "disable_correlation": int(config.disable_correlation),
        "disable_preference": int(config.disable_preference),
    }


def train(train_sessions, session_graph: graphs.SessionGraph,
          config: TrainConfig) -> TrainResult:
    """Train on prefix samples from the chronologically earlier part of the
    sessions; the last ``val_fraction`` never contributes gradients and only
    drives early stopping (best-validation parameters are returned)."""
    config.validate()
    if not train_sessions:
        raise TrainError("empty sample set")
    ginputs = build_model_inputs(session_graph, config)
    n_val = int(len(train_sessions) * config.val_fraction)
    fit_sessions = train_sessions[: len(train_sessions) - n_val]
    val_sessions = train_sessions[len(train_sessions) - n_val:]
    if not fit_sessions:
        raise TrainError("empty sample set")
    if config.augment:
        samples = augment_prefixes(fit_sessions)
    else:
        samples = [augment_prefixes([s])[-1] for s in fit_sessions]
    if not samples:
        raise TrainError("empty sample set")

    params = model.init_params(session_graph.n_items, config.dim, config.heads, config.seed)
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    history = []
    best = None  # (mrr, epoch, params copy)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        total, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo: lo + config.batch_size]]
            pvals = params.to_values()
            loss = batch_loss(batch, ginputs, pvals, config)
            nc.backward(loss)
            grads = {name: pvals[name].grad for name in params.names}
            adam_step(params, grads, state, config)
            total += loss.item() * len(batch)
            seen += len(batch)
        train_loss = total / seen

        if val_sessions:
            agg = evaluate.evaluate_model(params, ginputs, config, val_sessions, ks=(20,)).aggregates
            row = HistoryRow(epoch, train_loss, agg[("hr", 20)], agg[("mrr", 20)], agg[("ndcg", 20)])
            history.append(row)
            if best is None or row.val_mrr20 > best[0]:
                best = (row.val_mrr20, epoch, params.copy())
                stale = 0
            else:
                stale += 1
                if config.early_stop_patience and stale >= config.early_stop_patience:
                    break
        else:
            history.append(HistoryRow(epoch, train_loss, float("nan"), float("nan"), float("nan")))

    if best is not None:
        _, best_epoch, best_params = best
    else:
        best_epoch, best_params = len(history), params
    return TrainResult(best_params, history, best_epoch, checkpoint_meta(config))


def write_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_hr20,val_mrr20,val_ndcg20\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss:.12g},{row.val_hr20:.12g},"
                     f"{row.val_mrr20:.12g},{row.val_ndcg20:.12g}\n")
