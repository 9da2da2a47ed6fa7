"""The recommendation network.

One shared item embedding table feeds three weighted-graph-attention encoders
(cause / effect / correlation graphs). Per graph, a gated attention layer over
the session summarizes the encoded items into a session vector; a fourth
"preference" vector is the projected mean of the per-graph ones. Candidates
are scored by a causality term (cause-session against effect-embedding minus a
penalized reverse direction), a correlation term and a preference term, summed
with trainable weights and softmaxed.

Everything here builds `numcore` Values so one backward pass reaches every
parameter, including the scalar channel weights composed into correlation edge
features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .graphs import CorrelationGraph, WeightedDigraph

GRAPH_TAGS = ("cause", "effect", "corr")
LEAKY_SLOPE = 0.2  # fixed negative slope for all Leaky ReLUs
CHECKPOINT_MAGIC = "CGSR1"

# (suffix, rows, cols) templates; {d} is the embedding width
_HEAD_SHAPES = (("att_proj", "d", "d"), ("att_vec", "2d+1", "1"), ("msg_proj", "d", "d"))
_SESS_SHAPES = (("sess_query", "d", "1"), ("sess_last_proj", "d", "d"),
                ("sess_item_proj", "d", "d"), ("sess_bias", "1", "d"),
                ("sess_readout", "d", "2d"))
SCALAR_NAMES = ("reverse_penalty", "causality_weight", "correlation_weight",
                "chain_weight", "fork_weight", "collider_weight")


def _dim(token: str, d: int) -> int:
    return {"1": 1, "d": d, "2d": 2 * d, "2d+1": 2 * d + 1}[token]


def param_shapes(n_items: int, d: int, heads: int) -> list:
    """Ordered (name, rows, cols) for every trainable tensor."""
    shapes = [("item_embed", n_items, d)]
    for tag in GRAPH_TAGS:
        for h in range(heads):
            for suffix, r, c in _HEAD_SHAPES:
                shapes.append((f"{tag}.head{h}.{suffix}", _dim(r, d), _dim(c, d)))
        for suffix, r, c in _SESS_SHAPES:
            shapes.append((f"{tag}.{suffix}", _dim(r, d), _dim(c, d)))
    shapes.append(("fuse_proj", d, d))
    shapes.extend((name, 1, 1) for name in SCALAR_NAMES)
    return shapes


class Parameters:
    """Ordered name -> float64 matrix store for every trainable tensor."""

    def __init__(self, arrays: dict, n_items: int, d: int, heads: int):
        self._arrays = dict(arrays)
        self._order = list(arrays)
        self.n_items = n_items
        self.d = d
        self.heads = heads

    @property
    def names(self):
        return list(self._order)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        assert name in self._arrays and self._arrays[name].shape == arr.shape
        self._arrays[name] = np.ascontiguousarray(arr, dtype=np.float64)

    def items(self):
        return [(name, self._arrays[name]) for name in self._order]

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.items()},
                          self.n_items, self.d, self.heads)

    def to_values(self) -> dict:
        return {name: nc.value(arr) for name, arr in self.items()}

    def save(self, path, meta: dict = None) -> None:
        """Checkpoint: magic line, text manifest (meta + name/shape per
        tensor), then the raw row-major little-endian float64 payload."""
        meta = dict(meta or {})
        meta.setdefault("n_items", self.n_items)
        meta.setdefault("d", self.d)
        meta.setdefault("heads", self.heads)
        lines = [CHECKPOINT_MAGIC]
        for key in sorted(meta):
            lines.append(f"meta {key} {meta[key]}")
        for name, arr in self.items():
            lines.append(f"param {name} {arr.shape[0]} {arr.shape[1]}")
        lines.append("DATA")
        with open(path, "wb") as fh:
            fh.write("\n".join(lines).encode("utf-8") + b"\n")
            for _, arr in self.items():
                fh.write(arr.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path):
        """Returns (Parameters, meta dict with string values)."""
        with open(path, "rb") as fh:
            blob = fh.read()
        header, _, payload = blob.partition(b"\nDATA\n")
        lines = header.decode("utf-8").split("\n")
        if lines[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {lines[0]!r})")
        meta, shapes = {}, []
        for line in lines[1:]:
            kind, rest = line.split(" ", 1)
            if kind == "meta":
                key, val = rest.split(" ", 1)
                meta[key] = val
            elif kind == "param":
                name, r, c = rest.rsplit(" ", 2)
                shapes.append((name, int(r), int(c)))
            else:
                raise ValueError(f"bad manifest line {line!r}")
        arrays, offset = {}, 0
        for name, r, c in shapes:
            size = r * c * 8
            arrays[name] = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(r, c).copy()
            offset += size
        if offset != len(payload):
            raise ValueError("checkpoint payload length mismatch")
        return cls(arrays, int(meta["n_items"]), int(meta["d"]), int(meta["heads"])), meta


def init_params(n_items: int, d: int, heads: int, seed: int) -> Parameters:
    """Gaussian(0, 0.1) weights from one seeded generator, in fixed tensor
    order; the six scalar score/channel weights start at 1.0 (neutral
    composition). Every tensor is drawn regardless of variant flags so the
    same seed gives the same initial state across ablations."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, r, c in param_shapes(n_items, d, heads):
        if name in SCALAR_NAMES:
            arrays[name] = np.ones((1, 1))
        else:
            arrays[name] = rng.normal(0.0, 0.1, size=(r, c))
    return Parameters(arrays, n_items, d, heads)


@dataclass
class GraphInputs:
    """Model-ready edge arrays, self-loops included, sorted by (dst, src).

    Exactly one of `weight` (E,1 constant feature) and `components` (E,4
    first-order/chain/fork/collider columns, composed with the trainable
    channel weights at forward time) is set.
    """

    n_items: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray = None
    components: np.ndarray = None

    @property
    def n_edges(self) -> int:
        return len(self.src)


def _sorted_edge_arrays(n_items, triples, width, self_loop_row):
    """triples: (src, dst, feature-row) tuples. Appends self-loops, sorts by
    (dst, src), returns (src, dst, features)."""
    rows = {(s, d): f for s, d, f in triples}
    if self_loop_row is not None:
        for i in range(n_items):
            rows[(i, i)] = self_loop_row
    order = sorted(rows, key=lambda e: (e[1], e[0]))
    src = np.array([e[0] for e in order], dtype=np.int64)
    dst = np.array([e[1] for e in order], dtype=np.int64)
    feats = np.array([rows[e] for e in order], dtype=np.float64).reshape(len(order), width)
    return src, dst, feats


def causal_graph_inputs(g: WeightedDigraph, self_loops: bool = True) -> GraphInputs:
    triples = [(i, j, (w,)) for i, j, w in g.sorted_edges()]
    src, dst, feats = _sorted_edge_arrays(g.n_items, triples, 1, (1.0,) if self_loops else None)
    return GraphInputs(g.n_items, src, dst, weight=feats)


def correlation_graph_inputs(g: CorrelationGraph, self_loops: bool = True,
                             drop_chain: bool = False, drop_fork: bool = False,
                             drop_collider: bool = False) -> GraphInputs:
    """Undirected edges become two directed edges carrying the same component
    row; dropped channels are zeroed so their trainable weights get no
    gradient. Self-loops carry (1, 0, 0, 0)."""
    mask = np.array([1.0, 0.0 if drop_chain else 1.0,
                     0.0 if drop_fork else 1.0, 0.0 if drop_collider else 1.0])
    triples = []
    for a, b, w1, ch, fo, co in g.sorted_edges():
        row = tuple(np.array([w1, ch, fo, co]) * mask)
        triples.append((a, b, row))
        triples.append((b, a, row))
    src, dst, feats = _sorted_edge_arrays(g.n_items, triples, 4,
                                          (1.0, 0.0, 0.0, 0.0) if self_loops else None)
    return GraphInputs(g.n_items, src, dst, components=feats)


def edge_weight_values(inputs: GraphInputs, pvals: dict) -> nc.Value:
    """Edge feature column; correlation components composed as
    w1 + chain_weight*chain + fork_weight*fork + collider_weight*collider."""
    if inputs.weight is not None:
        return nc.value(inputs.weight)
    comps = inputs.components
    w = nc.value(comps[:, 0:1])
    for col, name in ((1, "chain_weight"), (2, "fork_weight"), (3, "collider_weight")):
        w = nc.add(w, nc.smul(pvals[name], nc.value(comps[:, col:col + 1])))
    return w


def wgat_encode(inputs: GraphInputs, x0: nc.Value, pvals: dict, tag: str,
                heads: int, layers: int = 1) -> nc.Value:
    """Weighted graph attention over incoming edges (head outputs averaged).

    Per edge j->i the attention logit is a LeakyReLU of the scoring vector
    applied to [proj(x_i); proj(x_j); w_ji], softmax-normalized over each
    node's incoming set, then used to mix projected source embeddings.
    """
    n = inputs.n_items
    w = edge_weight_values(inputs, pvals)
    x = x0
    for _ in range(layers):
        outs = []
        for h in range(heads):
            proj = nc.matmul(x, nc.transpose(pvals[f"{tag}.head{h}.att_proj"]))
            feats = nc.concat_cols([nc.gather_rows(proj, inputs.dst),
                                    nc.gather_rows(proj, inputs.src), w])
            logits = nc.leaky_relu(nc.matmul(feats, pvals[f"{tag}.head{h}.att_vec"]), LEAKY_SLOPE)
            att = nc.segment_softmax(logits, inputs.dst, num_segments=n)
            msgs = nc.matmul(x, nc.transpose(pvals[f"{tag}.head{h}.msg_proj"]))
            mixed = nc.segment_weighted_sum(nc.gather_rows(msgs, inputs.src), att,
                                            inputs.dst, num_segments=n)
            outs.append(nc.leaky_relu(mixed, LEAKY_SLOPE))
        x = nc.mean_of(outs)
    return x


@dataclass
class EncodedItems:
    """Per-graph encoded item matrices plus their elementwise mean."""

    cause: nc.Value = None
    effect: nc.Value = None
    corr: nc.Value = None
    pref: nc.Value = None

    def present(self):
        return [v for v in (self.cause, self.effect, self.corr) if v is not None]


def encode_items(ginputs: dict, pvals: dict, heads: int, layers: int = 1) -> EncodedItems:
    x0 = pvals["item_embed"]
    enc = EncodedItems()
    for tag in GRAPH_TAGS:
        if tag in ginputs:
            setattr(enc, tag, wgat_encode(ginputs[tag], x0, pvals, tag, heads, layers))
    enc.pref = nc.mean_of(enc.present())
    return enc


def encode_session(items, xg: nc.Value, pvals: dict, tag: str,
                   normalize_attention: bool = False):
    """Session vector for one graph: gated attention of each item on the last
    one (unnormalized factors unless the flag is set), weighted sum, then a
    readout of [last; sum]. Returns (1 x d vector, l x 1 attention column)."""
    if len(items) == 0:
        raise ValueError("empty session")
    idx = np.asarray(items, dtype=np.int64)
    l = len(idx)
    xs = nc.gather_rows(xg, idx)
    xlast = nc.gather_rows(xg, idx[-1:])
    gate = nc.sigmoid(nc.add(
        nc.add(nc.matmul(nc.tile_rows(xlast, l), nc.transpose(pvals[f"{tag}.sess_last_proj"])),
               nc.matmul(xs, nc.transpose(pvals[f"{tag}.sess_item_proj"]))),
        nc.tile_rows(pvals[f"{tag}.sess_bias"], l)))
    att = nc.matmul(gate, pvals[f"{tag}.sess_query"])
    if normalize_attention:
        att = nc.softmax(att)
    agg = nc.matmul(nc.transpose(att), xs)
    sess = nc.matmul(nc.concat_cols([xlast, agg]), nc.transpose(pvals[f"{tag}.sess_readout"]))
    return sess, att


@dataclass
class SessionEncoding:
    cause: nc.Value = None
    effect: nc.Value = None
    corr: nc.Value = None
    pref: nc.Value = None
    attention: dict = None            # tag -> l x 1 attention column

    def present(self):
        return [v for v in (self.cause, self.effect, self.corr) if v is not None]


def encode_session_all(items, enc: EncodedItems, pvals: dict,
                       normalize_attention: bool = False,
                       use_preference: bool = True) -> SessionEncoding:
    out = SessionEncoding(attention={})
    for tag in GRAPH_TAGS:
        xg = getattr(enc, tag)
        if xg is not None:
            vec, att = encode_session(items, xg, pvals, tag, normalize_attention)
            setattr(out, tag, vec)
            out.attention[tag] = att
    if use_preference:
        out.pref = nc.matmul(nc.mean_of(out.present()), nc.transpose(pvals["fuse_proj"]))
    return out


@dataclass
class ScoreParts:
    causality: nc.Value = None
    correlation: nc.Value = None
    preference: nc.Value = None
    total: nc.Value = None
    probabilities: nc.Value = None


def score(sess: SessionEncoding, enc: EncodedItems, pvals: dict,
          use_causality: bool = True, use_correlation: bool = True,
          use_preference: bool = True) -> ScoreParts:
    """Candidate scores over all items and their softmax.

    causality: cause-session against effect embeddings minus the penalized
    reverse direction; correlation and preference are plain dot products.
    """
    parts = ScoreParts()
    terms = []
    if use_preference:
        parts.preference = nc.matmul(enc.pref, nc.transpose(sess.pref))
        terms.append(parts.preference)
    if use_causality:
        forward_ = nc.matmul(enc.effect, nc.transpose(sess.cause))
        reverse_ = nc.matmul(enc.cause, nc.transpose(sess.effect))
        parts.causality = nc.sub(forward_, nc.smul(pvals["reverse_penalty"], reverse_))
        terms.append(nc.smul(pvals["causality_weight"], parts.causality))
    if use_correlation:
        parts.correlation = nc.matmul(enc.corr, nc.transpose(sess.corr))
        terms.append(nc.smul(pvals["correlation_weight"], parts.correlation))
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    parts.total = total
    parts.probabilities = nc.softmax(total)
    return parts


@dataclass
class SessionBatch:
    """Per-graph session vectors for a whole batch (one row per sample).

    Numerically this follows the same formulas as encode_session, evaluated
    with batch-level segment ops; use one path consistently when comparing
    outputs bit-for-bit.
    """

    cause: nc.Value = None
    effect: nc.Value = None
    corr: nc.Value = None
    pref: nc.Value = None
    n_sessions: int = 0

    def present(self):
        return [v for v in (self.cause, self.effect, self.corr) if v is not None]


def encode_sessions_batch(item_lists, enc: EncodedItems, pvals: dict,
                          normalize_attention: bool = False,
                          use_preference: bool = True) -> SessionBatch:
    """Encode many sessions at once: positions of all sessions are flattened
    into one row block with a sorted session-id segment column."""
    if not item_lists:
        raise ValueError("empty batch")
    if any(len(items) == 0 for items in item_lists):
        raise ValueError("empty session")
    b = len(item_lists)
    idx_all = np.concatenate([np.asarray(items, dtype=np.int64) for items in item_lists])
    seg = np.repeat(np.arange(b, dtype=np.int64), [len(items) for items in item_lists])
    last_idx = np.array([items[-1] for items in item_lists], dtype=np.int64)

    out = SessionBatch(n_sessions=b)
    for tag in GRAPH_TAGS:
        xg = getattr(enc, tag)
        if xg is None:
            continue
        xs = nc.gather_rows(xg, idx_all)
        xlast = nc.gather_rows(xg, last_idx)
        base = nc.add(nc.matmul(xlast, nc.transpose(pvals[f"{tag}.sess_last_proj"])),
                      nc.tile_rows(pvals[f"{tag}.sess_bias"], b))
        gate = nc.sigmoid(nc.add(nc.gather_rows(base, seg),
                                 nc.matmul(xs, nc.transpose(pvals[f"{tag}.sess_item_proj"]))))
        att = nc.matmul(gate, pvals[f"{tag}.sess_query"])
        if normalize_attention:
            att = nc.segment_softmax(att, seg, num_segments=b)
        agg = nc.segment_weighted_sum(xs, att, seg, num_segments=b)
        sess = nc.matmul(nc.concat_cols([xlast, agg]),
                         nc.transpose(pvals[f"{tag}.sess_readout"]))
        setattr(out, tag, sess)
    if use_preference:
        out.pref = nc.matmul(nc.mean_of(out.present()), nc.transpose(pvals["fuse_proj"]))
    return out


def score_batch(sess: SessionBatch, enc: EncodedItems, pvals: dict,
                use_causality: bool = True, use_correlation: bool = True,
                use_preference: bool = True) -> nc.Value:
    """Softmax probabilities for every sample, flattened to (B*N, 1) with each
    sample's candidate block contiguous."""
    terms = []
    if use_preference:
        terms.append(nc.matmul(sess.pref, nc.transpose(enc.pref)))
    if use_causality:
        forward_ = nc.matmul(sess.cause, nc.transpose(enc.effect))
        reverse_ = nc.matmul(sess.effect, nc.transpose(enc.cause))
        terms.append(nc.smul(pvals["causality_weight"],
                             nc.sub(forward_, nc.smul(pvals["reverse_penalty"], reverse_))))
    if use_correlation:
        terms.append(nc.smul(pvals["correlation_weight"],
                             nc.matmul(sess.corr, nc.transpose(enc.corr))))
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    b, n = total.data.shape
    flat = nc.reshape(total, b * n, 1)
    return nc.segment_softmax(flat, np.repeat(np.arange(b, dtype=np.int64), n), b)


def bce_loss_batch(probs_flat: nc.Value, targets, n_items: int) -> nc.Value:
    """Mean over samples of the full binary cross-entropy of each candidate
    block (same clamping as bce_loss)."""
    targets = np.asarray(targets, dtype=np.int64)
    b = len(targets)
    if probs_flat.data.shape != (b * n_items, 1):
        raise nc.ShapeError(f"bce_loss_batch: {probs_flat.data.shape} for {b} x {n_items}")
    if targets.min() < 0 or targets.max() >= n_items:
        raise IndexError("target out of range")
    y = np.zeros((b * n_items, 1))
    y[np.arange(b) * n_items + targets, 0] = 1.0
    p = nc.clamp(probs_flat, 1e-12, 1.0 - 1e-12)
    hit = nc.hadamard(nc.value(y), nc.log(p))
    miss = nc.hadamard(nc.value(1.0 - y), nc.log(nc.add_const(nc.scale(p, -1.0), 1.0)))
    return nc.scale(nc.sum_all(nc.add(hit, miss)), -1.0 / b)


def categorical_ce_loss_batch(probs_flat: nc.Value, targets, n_items: int) -> nc.Value:
    targets = np.asarray(targets, dtype=np.int64)
    b = len(targets)
    if targets.min() < 0 or targets.max() >= n_items:
        raise IndexError("target out of range")
    picked = nc.gather_rows(nc.clamp(probs_flat, 1e-12, 1.0 - 1e-12),
                            np.arange(b) * n_items + targets)
    return nc.scale(nc.sum_all(nc.log(picked)), -1.0 / b)


def bce_loss(probabilities: nc.Value, target: int) -> nc.Value:
    """Full binary cross-entropy over the softmax outputs, both terms, with
    log arguments clamped to [1e-12, 1 - 1e-12]."""
    n = probabilities.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range [0, {n})")
    y = np.zeros((n, 1))
    y[target, 0] = 1.0
    p = nc.clamp(probabilities, 1e-12, 1.0 - 1e-12)
    hit = nc.hadamard(nc.value(y), nc.log(p))
    miss = nc.hadamard(nc.value(1.0 - y), nc.log(nc.add_const(nc.scale(p, -1.0), 1.0)))
    return nc.scale(nc.sum_all(nc.add(hit, miss)), -1.0)


def categorical_ce_loss(probabilities: nc.Value, target: int) -> nc.Value:
    n = probabilities.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range [0, {n})")
    p = nc.clamp(probabilities, 1e-12, 1.0 - 1e-12)
    return nc.scale(nc.log(nc.gather_rows(p, np.array([target]))), -1.0)
