import numpy as np
import pytest

from cgsr import explain, graphs, model, trainer
from cgsr.ingest import Session
from conftest import toy_sessions


def fitted(seed=5, d=3):
    sessions = toy_sessions()
    sg = graphs.build_session_graph([s.items for s in sessions], 5)
    config = trainer.TrainConfig(dim=d, heads=1, seed=seed, val_fraction=0.0)
    ginputs = trainer.build_model_inputs(sg, config)
    params = model.init_params(5, d, 1, seed)
    enc = model.encode_items(ginputs, params.to_values(), config.heads)
    return params, config, enc


def test_single_item_session_one_row():
    params, config, enc = fitted()
    report = explain.explain(Session("s", [2], 0), 4, params, enc, config)
    assert len(report.rows) == 1
    assert report.rows[0].item_index == 2
    assert report.rows[0].causality_rank == 1


def test_item_out_of_vocabulary():
    params, config, enc = fitted()
    with pytest.raises(IndexError, match="not in vocabulary"):
        explain.explain(Session("s", [0], 0), 99, params, enc, config)


def test_requires_full_model():
    params, config, enc = fitted()
    enc_no_corr = model.EncodedItems(cause=enc.cause, effect=enc.effect, corr=None, pref=enc.pref)
    with pytest.raises(ValueError, match="correlation"):
        explain.explain(Session("s", [0], 0), 1, params, enc_no_corr, config)


def test_gamma_zero_reduces_to_forward_dot():
    params, config, enc = fitted()
    params["reverse_penalty"] = np.zeros((1, 1))
    report = explain.explain(Session("s", [0, 1], 0), 3, params, enc, config)
    w_c = params["cause.sess_readout"]
    x_c, x_e = enc.cause.data, enc.effect.data
    for row in report.rows:
        want = float((w_c @ np.concatenate([x_c[row.item_index]] * 2)) @ x_e[3])
        assert row.causality == pytest.approx(want, rel=1e-12)


def test_hand_computation_d1():
    # one-dimensional everything: the attribution formulas become products
    params, config, enc = fitted(d=1)
    j, i = 3, 2
    report = explain.explain(Session("s", [i], 0), j, params, enc, config)
    wc = params["cause.sess_readout"][0]          # (2,)
    we = params["effect.sess_readout"][0]
    wr = params["corr.sess_readout"][0]
    g1 = params["reverse_penalty"][0, 0]
    xc, xe, xr = enc.cause.data, enc.effect.data, enc.corr.data
    want_ca = (wc[0] + wc[1]) * xc[i, 0] * xe[j, 0] - g1 * (we[0] + we[1]) * xe[i, 0] * xc[j, 0]
    want_r = (wr[0] + wr[1]) * xr[i, 0] * xr[j, 0]
    assert report.rows[0].causality == pytest.approx(want_ca, rel=1e-12)
    assert report.rows[0].correlation == pytest.approx(want_r, rel=1e-12)


def test_session_level_scores_match_model_bit_for_bit():
    params, config, enc = fitted()
    session = Session("s", [0, 1, 2], 0)
    report = explain.explain(session, 4, params, enc, config)
    sess = model.encode_session_all(session.items, enc, params.to_values(),
                                    config.normalize_session_attention)
    parts = model.score(sess, enc, params.to_values())
    assert report.score_causality == parts.causality.data[4, 0]
    assert report.score_correlation == parts.correlation.data[4, 0]
    assert report.score_preference == parts.preference.data[4, 0]


def test_candidate_permutation_stability():
    """Attributions for (session, item) depend only on that pair's rows, not
    on how other candidates are arranged."""
    params, config, enc = fitted()
    session = Session("s", [0, 1], 0)
    base = explain.explain(session, 2, params, enc, config)

    perm = np.array([0, 1, 2, 4, 3])     # swap two other candidates
    shuffled = model.EncodedItems(
        cause=type(enc.cause)(enc.cause.data[perm]),
        effect=type(enc.effect)(enc.effect.data[perm]),
        corr=type(enc.corr)(enc.corr.data[perm]),
        pref=type(enc.pref)(enc.pref.data[perm]))
    moved = explain.explain(session, 2, params, shuffled, config)
    assert [(r.causality, r.correlation) for r in moved.rows] == \
           [(r.causality, r.correlation) for r in base.rows]


def test_ranks_and_text_output():
    params, config, enc = fitted()
    report = explain.explain(Session("s9", [0, 1, 2], 0), 4, params, enc, config)
    assert sorted(r.causality_rank for r in report.rows) == [1, 2, 3]
    assert sorted(r.correlation_rank for r in report.rows) == [1, 2, 3]
    top = min(report.rows, key=lambda r: r.causality_rank)
    assert top.causality == max(r.causality for r in report.rows)
    text = report.to_text()
    assert text.startswith("session: s9\n")
    assert "score_causality:" in text and "causality_rank" in text


def test_write_reports_naming(tmp_path):
    params, config, enc = fitted()
    report = explain.explain(Session("sess1", [0], 0), 1, params, enc, config)
    paths = explain.write_reports([report], tmp_path / "out")
    assert paths == [str(tmp_path / "out" / "sess1__1.txt")]
    assert "recommended_item: 1" in open(paths[0]).read()
