import math

import numpy as np
import pytest

from cgsr import graphs, model, numcore as nc
from cgsr.ingest import Session
from conftest import toy_sessions


def leaky(x, s=0.2):
    return x if x > 0 else s * x


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# --- init_params --------------------------------------------------------------

def test_init_deterministic():
    a = model.init_params(7, 4, 2, seed=5)
    b = model.init_params(7, 4, 2, seed=5)
    for name, arr in a.items():
        assert np.array_equal(arr, b[name]), name
    c = model.init_params(7, 4, 2, seed=6)
    assert not np.array_equal(a["item_embed"], c["item_embed"])


def test_init_moments():
    p = model.init_params(10000, 100, 1, seed=0)   # one million embedding entries
    emb = p["item_embed"]
    assert emb.shape == (10000, 100)
    assert -0.001 < emb.mean() < 0.001
    assert 0.099 < emb.std() < 0.101
    for name in model.SCALAR_NAMES:
        assert p[name][0, 0] == 1.0


def test_init_minimal_shapes():
    p = model.init_params(1, 1, 1, seed=0)
    assert p["item_embed"].shape == (1, 1)
    assert p["cause.head0.att_vec"].shape == (3, 1)
    assert p["corr.sess_readout"].shape == (1, 2)


# --- WGAT ----------------------------------------------------------------------

def wgat_params(tag, arrays):
    return {f"{tag}.head0.att_proj": nc.value(arrays["W1"]),
            f"{tag}.head0.att_vec": nc.value(arrays["W2"]),
            f"{tag}.head0.msg_proj": nc.value(arrays["W3"])}


def test_wgat_two_node_hand_computation():
    u0, u1, p1, m, w = 0.3, -0.5, 0.7, 1.1, 0.6
    a1, a2, a3 = 0.2, -0.4, 0.9
    g = graphs.WeightedDigraph(2, {(0, 1): w})
    inputs = model.causal_graph_inputs(g, self_loops=True)
    pvals = wgat_params("cause", {"W1": [[p1]], "W2": [[a1], [a2], [a3]], "W3": [[m]]})
    x0 = nc.value([[u0], [u1]])
    out = model.wgat_encode(inputs, x0, pvals, "cause", heads=1)

    # independent scalar evaluation
    logit_self1 = leaky(a1 * p1 * u1 + a2 * p1 * u1 + a3 * 1.0)
    logit_edge = leaky(a1 * p1 * u1 + a2 * p1 * u0 + a3 * w)
    e_edge, e_self = math.exp(logit_edge), math.exp(logit_self1)
    att_edge = e_edge / (e_edge + e_self)
    att_self = e_self / (e_edge + e_self)
    want0 = leaky(1.0 * m * u0)                       # self-loop only
    want1 = leaky(att_edge * m * u0 + att_self * m * u1)
    np.testing.assert_allclose(out.data[:, 0], [want0, want1], rtol=1e-12)


def test_wgat_isolated_node_reduces_to_self_message():
    g = graphs.WeightedDigraph(3, {(0, 1): 0.4})
    inputs = model.causal_graph_inputs(g, self_loops=True)
    rng = np.random.default_rng(0)
    arrays = {"W1": rng.normal(size=(2, 2)), "W2": rng.normal(size=(5, 1)),
              "W3": rng.normal(size=(2, 2))}
    pvals = wgat_params("effect", arrays)
    x0v = rng.normal(size=(3, 2))
    out = model.wgat_encode(inputs, nc.value(x0v), pvals, "effect", heads=1)
    want = np.where(arrays["W3"] @ x0v[2] > 0, arrays["W3"] @ x0v[2], 0.2 * (arrays["W3"] @ x0v[2]))
    np.testing.assert_allclose(out.data[2], want, rtol=1e-12)


def test_wgat_duplicated_heads_match_single_head():
    g = graphs.WeightedDigraph(3, {(0, 1): 0.4, (1, 2): 0.7})
    inputs = model.causal_graph_inputs(g, self_loops=True)
    rng = np.random.default_rng(1)
    arrays = {"W1": rng.normal(size=(2, 2)), "W2": rng.normal(size=(5, 1)),
              "W3": rng.normal(size=(2, 2))}
    x0v = rng.normal(size=(3, 2))
    single = model.wgat_encode(inputs, nc.value(x0v), wgat_params("corr", arrays), "corr", heads=1)
    doubled = {f"corr.head{h}.{k}": nc.value(arrays[w]) for h in (0, 1)
               for k, w in (("att_proj", "W1"), ("att_vec", "W2"), ("msg_proj", "W3"))}
    two = model.wgat_encode(inputs, nc.value(x0v), doubled, "corr", heads=2)
    np.testing.assert_allclose(two.data, single.data, rtol=1e-15)


def test_head_permutation_invariance():
    sessions = toy_sessions()
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    eff = graphs.effect_graph(sg)
    inputs = model.causal_graph_inputs(eff, self_loops=True)
    params = model.init_params(5, 3, heads=3, seed=2)
    out1 = model.wgat_encode(inputs, nc.value(params["item_embed"]), params.to_values(),
                             "cause", heads=3)
    swapped = params.copy()
    for suffix in ("att_proj", "att_vec", "msg_proj"):
        a = swapped[f"cause.head0.{suffix}"].copy()
        swapped[f"cause.head0.{suffix}"] = swapped[f"cause.head2.{suffix}"]
        swapped[f"cause.head2.{suffix}"] = a
    out2 = model.wgat_encode(inputs, nc.value(swapped["item_embed"]), swapped.to_values(),
                             "cause", heads=3)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


# --- session encoder ------------------------------------------------------------

def sess_params(tag, q, w4, w5, b, w6):
    return {f"{tag}.sess_query": nc.value(q), f"{tag}.sess_last_proj": nc.value(w4),
            f"{tag}.sess_item_proj": nc.value(w5), f"{tag}.sess_bias": nc.value(b),
            f"{tag}.sess_readout": nc.value(w6)}


def test_session_encoder_hand_computation_l2():
    x0v, x1v = 0.8, -0.3
    q, w4, w5, bb, r1, r2 = 1.3, 0.5, -0.7, 0.1, 0.9, -1.2
    pvals = sess_params("cause", [[q]], [[w4]], [[w5]], [[bb]], [[r1, r2]])
    xg = nc.value([[x0v], [x1v]])
    vec, att = model.encode_session([0, 1], xg, pvals, "cause")

    a0 = q * sig(w4 * x1v + w5 * x0v + bb)
    a1 = q * sig(w4 * x1v + w5 * x1v + bb)
    s_g = a0 * x0v + a1 * x1v
    want = r1 * x1v + r2 * s_g
    np.testing.assert_allclose(att.data[:, 0], [a0, a1], rtol=1e-12)
    assert vec.data[0, 0] == pytest.approx(want, rel=1e-12)


def test_session_encoder_single_item():
    rng = np.random.default_rng(3)
    q, w4, w5, b, w6 = (rng.normal(size=s) for s in ((2, 1), (2, 2), (2, 2), (1, 2), (2, 4)))
    pvals = sess_params("corr", q, w4, w5, b, w6)
    xg = rng.normal(size=(4, 2))
    vec, att = model.encode_session([1], nc.value(xg), pvals, "corr")
    x1 = xg[1]
    a1 = float(q[:, 0] @ (1 / (1 + np.exp(-(w4 @ x1 + w5 @ x1 + b[0])))))
    want = w6 @ np.concatenate([x1, a1 * x1])
    assert att.data.shape == (1, 1)
    np.testing.assert_allclose(vec.data[0], want, rtol=1e-12)


def test_session_encoder_zero_query_zeroes_aggregate():
    rng = np.random.default_rng(4)
    pvals = sess_params("effect", np.zeros((2, 1)), rng.normal(size=(2, 2)),
                        rng.normal(size=(2, 2)), rng.normal(size=(1, 2)), rng.normal(size=(2, 4)))
    xg = rng.normal(size=(3, 2))
    vec, att = model.encode_session([0, 2], nc.value(xg), pvals, "effect")
    assert np.array_equal(att.data, np.zeros((2, 1)))
    want = pvals["effect.sess_readout"].data @ np.concatenate([xg[2], np.zeros(2)])
    np.testing.assert_allclose(vec.data[0], want, rtol=1e-12)


def test_session_encoder_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        model.encode_session([], nc.value(np.ones((2, 2))), {}, "cause")


# --- scoring and loss -----------------------------------------------------------

def scalar_encodings(xc, xe, xr, sc, se, sr, w7=1.0):
    enc = model.EncodedItems(cause=nc.value(xc), effect=nc.value(xe), corr=nc.value(xr))
    enc.pref = nc.mean_of([enc.cause, enc.effect, enc.corr])
    sess = model.SessionEncoding(cause=nc.value([[sc]]), effect=nc.value([[se]]),
                                 corr=nc.value([[sr]]), attention={})
    sess.pref = nc.matmul(nc.mean_of([sess.cause, sess.effect, sess.corr]),
                          nc.transpose(nc.value([[w7]])))
    return enc, sess


def score_pvals(g1=0.5, g2=0.7, g3=0.9):
    return {"reverse_penalty": nc.value([[g1]]), "causality_weight": nc.value([[g2]]),
            "correlation_weight": nc.value([[g3]])}


def test_score_hand_computation_n3():
    xc = [[0.2], [-0.4], [0.9]]
    xe = [[-0.1], [0.6], [0.3]]
    xr = [[0.5], [0.5], [-0.2]]
    sc, se, sr = 0.7, -0.3, 1.1
    g1, g2, g3, w7 = 0.5, 0.7, 0.9, 1.4
    enc, sess = scalar_encodings(xc, xe, xr, sc, se, sr, w7)
    parts = model.score(sess, enc, score_pvals(g1, g2, g3))

    sp = w7 * (sc + se + sr) / 3
    want = []
    for j in range(3):
        xp = (xc[j][0] + xe[j][0] + xr[j][0]) / 3
        ca = sc * xe[j][0] - g1 * se * xc[j][0]
        want.append(sp * xp + g2 * ca + g3 * sr * xr[j][0])
    np.testing.assert_allclose(parts.total.data[:, 0], want, rtol=1e-12)
    e = [math.exp(v - max(want)) for v in want]
    np.testing.assert_allclose(parts.probabilities.data[:, 0],
                               [v / sum(e) for v in e], rtol=1e-12)


def test_score_gamma_degenerate():
    enc, sess = scalar_encodings([[0.2], [-0.4]], [[0.1], [0.6]], [[0.5], [0.3]], 0.7, -0.3, 1.1)
    parts = model.score(sess, enc, score_pvals(g1=1.0, g2=0.0, g3=0.0))
    np.testing.assert_allclose(parts.total.data, parts.preference.data, rtol=1e-15)


def test_score_uniform_when_encodings_zero():
    enc, sess = scalar_encodings([[0.0]] * 4, [[0.0]] * 4, [[0.0]] * 4, 0.0, 0.0, 0.0)
    parts = model.score(sess, enc, score_pvals())
    np.testing.assert_allclose(parts.probabilities.data[:, 0], 0.25, atol=1e-15)


def test_probabilities_sum_to_one_random():
    rng = np.random.default_rng(8)
    for _ in range(5):
        enc, sess = scalar_encodings(rng.normal(size=(6, 1)), rng.normal(size=(6, 1)),
                                     rng.normal(size=(6, 1)), rng.normal(), rng.normal(),
                                     rng.normal(), rng.normal())
        parts = model.score(sess, enc, score_pvals(*rng.normal(size=3)))
        assert abs(parts.probabilities.data.sum() - 1.0) < 1e-9


def test_bce_loss_uniform_two_items():
    loss = model.bce_loss(nc.value([[0.5], [0.5]]), target=0)
    assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)


def test_bce_loss_perfect_prediction_near_zero():
    loss = model.bce_loss(nc.value([[1.0], [0.0], [0.0]]), target=0)
    assert 0.0 <= loss.item() < 1e-10


def test_bce_loss_nonnegative_random():
    rng = np.random.default_rng(9)
    for _ in range(10):
        raw = rng.normal(size=(5, 1))
        p = np.exp(raw) / np.exp(raw).sum()
        assert model.bce_loss(nc.value(p), target=int(rng.integers(5))).item() >= 0.0


def test_loss_target_out_of_range():
    with pytest.raises(IndexError):
        model.bce_loss(nc.value([[0.5], [0.5]]), target=2)
    with pytest.raises(IndexError):
        model.categorical_ce_loss(nc.value([[0.5], [0.5]]), target=-1)


def test_categorical_ce():
    loss = model.categorical_ce_loss(nc.value([[0.25], [0.75]]), target=1)
    assert loss.item() == pytest.approx(-math.log(0.75), rel=1e-12)


def test_normalized_attention_flag_sums_to_one():
    rng = np.random.default_rng(5)
    pvals = sess_params("cause", rng.normal(size=(2, 1)), rng.normal(size=(2, 2)),
                        rng.normal(size=(2, 2)), rng.normal(size=(1, 2)), rng.normal(size=(2, 4)))
    xg = nc.value(rng.normal(size=(5, 2)))
    _, raw = model.encode_session([0, 3, 2], xg, pvals, "cause", normalize_attention=False)
    _, normed = model.encode_session([0, 3, 2], xg, pvals, "cause", normalize_attention=True)
    assert abs(raw.data.sum() - 1.0) > 1e-6        # unnormalized by default
    assert normed.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_self_loops_flag_removable():
    g = graphs.WeightedDigraph(3, {(0, 1): 0.4})
    with_loops = model.causal_graph_inputs(g, self_loops=True)
    without = model.causal_graph_inputs(g, self_loops=False)
    assert with_loops.n_edges == 4 and without.n_edges == 1
    rng = np.random.default_rng(6)
    arrays = {"W1": rng.normal(size=(2, 2)), "W2": rng.normal(size=(5, 1)),
              "W3": rng.normal(size=(2, 2))}
    out = model.wgat_encode(without, nc.value(rng.normal(size=(3, 2))),
                            wgat_params("effect", arrays), "effect", heads=1)
    assert np.array_equal(out.data[2], np.zeros(2))   # no neighborhood, no signal


def test_disable_flags_zero_their_score_terms():
    enc, sess = scalar_encodings([[0.2], [-0.4]], [[0.1], [0.6]], [[0.5], [0.3]], 0.7, -0.3, 1.1)
    no_corr = model.score(sess, enc, score_pvals(), use_correlation=False)
    assert no_corr.correlation is None
    np.testing.assert_array_equal(
        no_corr.total.data,
        no_corr.preference.data + 0.7 * no_corr.causality.data)
    no_pref = model.score(sess, enc, score_pvals(), use_preference=False)
    assert no_pref.preference is None
    np.testing.assert_array_equal(
        no_pref.total.data,
        0.7 * no_pref.causality.data + 0.9 * no_pref.correlation.data)


# --- full forward invariants -----------------------------------------------------

def full_forward(sessions, n, d=3, heads=2, seed=0, perm=None):
    from cgsr.trainer import TrainConfig, build_model_inputs
    config = TrainConfig(dim=d, heads=heads, seed=seed, val_fraction=0.0)
    sg = graphs.build_session_graph([s.items for s in sessions], n)
    ginputs = build_model_inputs(sg, config)
    params = model.init_params(n, d, heads, seed)
    if perm is not None:
        params["item_embed"] = params["item_embed"][np.argsort(perm)]
    pvals = params.to_values()
    enc = model.encode_items(ginputs, pvals, heads)
    sess = model.encode_session_all(sessions[0].items, enc, pvals)
    return model.score(sess, enc, pvals)


def test_item_relabeling_equivariance():
    sessions = toy_sessions()
    base = full_forward(sessions, 5)
    perm = np.array([3, 0, 4, 1, 2])      # new index of each old item
    relabeled = [Session(s.id, [int(perm[v]) for v in s.items], s.start_ts) for s in sessions]
    moved = full_forward(relabeled, 5, perm=perm)
    np.testing.assert_allclose(moved.probabilities.data[perm, 0],
                               base.probabilities.data[:, 0], atol=1e-12)


def test_batched_sessions_match_per_sample_path():
    sessions = toy_sessions()
    from cgsr.trainer import TrainConfig, build_model_inputs
    config = TrainConfig(dim=3, heads=2, seed=6)
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    pvals = model.init_params(5, 3, 2, 6).to_values()
    enc = model.encode_items(build_model_inputs(sg, config), pvals, 2)

    lists = [s.items for s in sessions]
    batch = model.encode_sessions_batch(lists, enc, pvals)
    probs = model.score_batch(batch, enc, pvals).data.reshape(len(lists), 5)
    for i, items in enumerate(lists):
        sess = model.encode_session_all(items, enc, pvals)
        np.testing.assert_allclose(batch.corr.data[i], sess.corr.data[0], atol=1e-12)
        np.testing.assert_allclose(batch.pref.data[i], sess.pref.data[0], atol=1e-12)
        parts = model.score(sess, enc, pvals)
        np.testing.assert_allclose(probs[i], parts.probabilities.data[:, 0], atol=1e-12)


def test_batched_loss_matches_per_sample_mean():
    sessions = toy_sessions()
    from cgsr.trainer import TrainConfig, build_model_inputs
    config = TrainConfig(dim=2, heads=1, seed=7)
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    pvals = model.init_params(5, 2, 1, 7).to_values()
    enc = model.encode_items(build_model_inputs(sg, config), pvals, 1)
    lists = [s.items for s in sessions]
    targets = [1, 4, 0]
    batch = model.encode_sessions_batch(lists, enc, pvals)
    for batched_fn, single_fn in ((model.bce_loss_batch, model.bce_loss),
                                  (model.categorical_ce_loss_batch, model.categorical_ce_loss)):
        flat = model.score_batch(batch, enc, pvals)
        batched = batched_fn(flat, targets, 5).item()
        singles = []
        for items, target in zip(lists, targets):
            sess = model.encode_session_all(items, enc, pvals)
            parts = model.score(sess, enc, pvals)
            singles.append(single_fn(parts.probabilities, target).item())
        assert batched == pytest.approx(sum(singles) / 3, rel=1e-12)


def test_pref_mean_is_exact():
    sessions = toy_sessions()
    from cgsr.trainer import TrainConfig, build_model_inputs
    config = TrainConfig(dim=3, heads=1, seed=1)
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    enc = model.encode_items(build_model_inputs(sg, config),
                             model.init_params(5, 3, 1, 1).to_values(), 1)
    want = (enc.cause.data + enc.effect.data + enc.corr.data) / 3
    assert np.array_equal(enc.pref.data, want)


def test_end_to_end_gradient_check_small():
    sessions = toy_sessions()
    from cgsr.trainer import TrainConfig, batch_loss, build_model_inputs
    from cgsr.ingest import augment_prefixes
    config = TrainConfig(dim=2, heads=1, seed=3, val_fraction=0.0)
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    ginputs = build_model_inputs(sg, config)
    params = model.init_params(5, 2, 1, 3)
    samples = augment_prefixes(sessions)[:3]

    def f(pvals):
        return batch_loss(samples, ginputs, pvals, config)

    report = nc.grad_check(f, dict(params.items()), step=1e-5, tol=1e-4)
    assert report.passed, report.failures[:3]


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = model.init_params(4, 3, 2, seed=11)
    path = tmp_path / "model.cgsr"
    params.save(path, meta={"self_loops": 1})
    with open(path, "rb") as fh:
        assert fh.read(6) == b"CGSR1\n"
    back, meta = model.Parameters.load(path)
    assert meta["self_loops"] == "1"
    assert back.n_items == 4 and back.d == 3 and back.heads == 2
    for name, arr in params.items():
        assert np.array_equal(arr, back[name]), name


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    params = model.init_params(6, 2, 1, seed=3)
    a, b = tmp_path / "a.cgsr", tmp_path / "b.cgsr"
    params.save(a, meta={"self_loops": 1})
    loaded, meta = model.Parameters.load(a)
    loaded.save(b, meta={"self_loops": meta["self_loops"]})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTCGSR\nDATA\n")
    with pytest.raises(ValueError, match="magic"):
        model.Parameters.load(path)
