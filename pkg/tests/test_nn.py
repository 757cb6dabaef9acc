import numpy as np
import pytest

from ssvae import autodiff as ad
from ssvae.autodiff import RngStream, Tensor
from ssvae.nn import (
    CellState,
    CheckpointError,
    ParamSet,
    ParamSpec,
    clstm1_step,
    clstm2_step,
    dense,
    dense_specs,
    dropout_mask,
    embedding_lookup,
    init_params,
    load_checkpoint,
    lstm_specs,
    lstm_step,
    save_checkpoint,
    unroll,
    word_dropout,
    zero_state,
)


def cell_params(kind, n_in=4, hidden=5, n_classes=3, seed=0, zero=False):
    p = init_params(lstm_specs("c", n_in, hidden, kind, n_classes), RngStream(seed))
    view = p.view("c")
    if zero:
        for t in view.values():
            t.data[...] = 0.0
    return p, view


def rand_state(B, H, seed=1):
    r = RngStream(seed)
    return CellState(Tensor(r.normal((B, H))), Tensor(r.normal((B, H))))


def test_embedding_lookup_rows_and_gradient():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    rows = embedding_lookup(table, [0, 0])
    np.testing.assert_array_equal(rows.data[0], rows.data[1])
    g = ad.backward(ad.sum_(embedding_lookup(table, [2])), {"t": table})
    expect = np.zeros((4, 3))
    expect[2] = 1
    np.testing.assert_array_equal(g["t"], expect)
    with pytest.raises(IndexError):
        embedding_lookup(table, [4])


def test_embedding_lookup_gradient_check():
    table = Tensor(RngStream(2).normal((7, 3)), requires_grad=True)
    w = Tensor(RngStream(3).normal((2, 4, 3)))
    ids = np.array([[1, 6, 6, 0], [3, 1, 2, 2]])
    err = ad.finite_difference_check(lambda: ad.sum_(embedding_lookup(table, ids) * w), {"t": table}, eps=1e-6)
    assert err < 1e-6


def test_dense_zero_and_identity():
    p = {"W": Tensor(np.zeros((3, 2))), "b": Tensor(np.zeros(2))}
    x = Tensor(RngStream(0).normal((4, 3)))
    assert not dense(p, x).data.any()
    p1 = {"W": Tensor(np.ones((1, 1))), "b": Tensor(np.zeros(1))}
    assert dense(p1, Tensor(np.zeros((1, 1))), "tanh").item() == 0.0
    with pytest.raises(ad.ShapeError):
        dense(p, Tensor(np.ones((4, 5))))


@pytest.mark.parametrize("act", ["none", "tanh", "sigmoid"])
def test_dense_gradient_check(act):
    params = init_params(dense_specs("d", 3, 4), RngStream(1))
    params["d.b"].data += 0.1
    x = Tensor(RngStream(2).normal((5, 3)))
    err = ad.finite_difference_check(lambda: ad.sum_(dense(params.view("d"), x, act)), params, eps=1e-6)
    assert err < 1e-6


def test_word_dropout_edges_and_rate():
    ids = np.arange(4, 10_004).reshape(100, 100)
    assert np.array_equal(word_dropout(ids, 0.0, RngStream(0)), ids)
    assert np.all(word_dropout(ids, 1.0, RngStream(0)) == 1)
    frac = np.mean(word_dropout(ids, 0.5, RngStream(0)) == 1)
    assert 0.47 <= frac <= 0.53
    # the input array itself is never modified
    assert ids[0, 0] == 4


def test_dropout_mask_is_inverted_scaling():
    assert dropout_mask((3, 3), 0.0, RngStream(0)) is None
    m = dropout_mask((200, 200), 0.25, RngStream(0))
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert abs(m.mean() - 1.0) < 0.02


def test_lstm_zero_weights_halves_cell():
    _, p = cell_params("lstm", zero=True)
    st = rand_state(2, 5)
    out = lstm_step(p, Tensor(RngStream(3).normal((2, 4))), st)
    np.testing.assert_allclose(out.c.data, 0.5 * st.c.data, atol=1e-15)
    out0 = lstm_step(p, Tensor(np.ones((2, 4))), zero_state(2, 5))
    assert not out0.h.data.any()


def test_forget_bias_and_zero_bias_init():
    p = init_params(lstm_specs("c", 4, 5), RngStream(0))
    b = p["c.b"].data
    assert np.all(b[5:10] == 1.0)
    assert np.all(b[:5] == 0.0) and np.all(b[10:] == 0.0)
    d = init_params(dense_specs("d", 4, 3), RngStream(0))
    assert np.all(d["d.b"].data == 0.0)


def test_glorot_uniform_bounds_and_mean():
    p = init_params([ParamSpec("w", (100, 100))], RngStream(0))
    s = np.sqrt(6 / 200)
    w = p["w"].data
    assert np.abs(w).max() <= s
    assert abs(w.mean()) <= 0.01 * s


def test_clstm1_zero_label_matches_padded_lstm():
    _, p1 = cell_params("clstm1", seed=4)
    w = Tensor(RngStream(5).normal((2, 4)))
    st = rand_state(2, 5)
    a = clstm1_step(p1, w, np.zeros((2, 3)), st)
    b = lstm_step(p1, ad.concat([w, Tensor(np.zeros((2, 3)))], axis=1), st)
    assert np.array_equal(a.h.data, b.h.data) and np.array_equal(a.c.data, b.c.data)


@pytest.mark.parametrize("kind", ["clstm1", "clstm2"])
def test_conditional_cells_depend_on_label(kind):
    _, p = cell_params(kind, seed=6)
    w = Tensor(RngStream(7).normal((1, 4)))
    st = rand_state(1, 5)
    step = clstm1_step if kind == "clstm1" else clstm2_step
    h0 = step(p, w, np.eye(3)[[0]], st).h.data
    h1 = step(p, w, np.eye(3)[[1]], st).h.data
    assert np.max(np.abs(h0 - h1)) > 0


def test_clstm2_without_label_weights_equals_lstm():
    _, p = cell_params("clstm2", seed=8)
    p["W_yc"].data[...] = 0.0
    w = Tensor(RngStream(9).normal((3, 4)))
    st = rand_state(3, 5)
    a = clstm2_step(p, w, np.eye(3), st)
    b = lstm_step(p, w, st)
    assert np.array_equal(a.h.data, b.h.data) and np.array_equal(a.c.data, b.c.data)


def test_clstm2_only_label_weights():
    _, p = cell_params("clstm2", zero=True)
    p["W_yc"].data[...] = RngStream(10).normal((3, 5))
    y = np.eye(3)[[2, 0]]
    out = clstm2_step(p, Tensor(np.ones((2, 4))), y, zero_state(2, 5))
    c = np.tanh(y @ p["W_yc"].data)
    np.testing.assert_allclose(out.c.data, c, atol=1e-15)
    np.testing.assert_allclose(out.h.data, 0.5 * np.tanh(c), atol=1e-15)


@pytest.mark.parametrize("kind", ["lstm", "clstm1", "clstm2"])
def test_three_step_unroll_gradient(kind):
    params, view = cell_params(kind, seed=11)
    view["b"].data += 0.2 * RngStream(12).normal(view["b"].shape)
    x = Tensor(RngStream(13).normal((2, 3, 4)))
    y = np.eye(3)[[0, 2]]
    init = rand_state(2, 5, seed=14)

    def loss():
        outs, st = unroll(kind, view, x, np.ones((2, 3)), None if kind == "lstm" else y, init)
        return ad.sum_(st.h * st.c) + ad.sum_(outs[0])

    assert ad.finite_difference_check(loss, params, eps=1e-6) < 1e-4


def test_unroll_all_masked_keeps_initial_state():
    _, p = cell_params("lstm", seed=1)
    init = rand_state(2, 5)
    x = Tensor(RngStream(2).normal((2, 4, 4)))
    _, st = unroll("lstm", p, x, np.zeros((2, 4)), None, init)
    assert np.array_equal(st.h.data, init.h.data) and np.array_equal(st.c.data, init.c.data)


def test_unroll_length_one_equals_step():
    _, p = cell_params("clstm2", seed=3)
    x = Tensor(RngStream(4).normal((2, 1, 4)))
    y = np.eye(3)[[1, 1]]
    init = rand_state(2, 5)
    _, st = unroll("clstm2", p, x, np.ones((2, 1)), y, init)
    ref = clstm2_step(p, Tensor(x.data[:, 0]), y, init)
    np.testing.assert_allclose(st.h.data, ref.h.data, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["lstm", "clstm1", "clstm2"])
def test_padding_is_a_noop(kind):
    _, p = cell_params(kind, seed=5)
    r = RngStream(6)
    x = r.normal((1, 3, 4))
    padded = np.concatenate([x, r.normal((1, 4, 4))], axis=1)
    y = None if kind == "lstm" else np.eye(3)[[1]]
    outs_a, a = unroll(kind, p, Tensor(x), np.ones((1, 3)), y)
    mask = np.array([[1, 1, 1, 0, 0, 0, 0]])
    outs_b, b = unroll(kind, p, Tensor(padded), mask, y)
    np.testing.assert_allclose(a.h.data, b.h.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(a.c.data, b.c.data, rtol=0, atol=1e-15)
    for t in range(3):
        np.testing.assert_allclose(outs_a[t].data, outs_b[t].data, rtol=0, atol=1e-15)


def test_conditional_unroll_requires_label():
    _, p = cell_params("clstm1")
    with pytest.raises(ValueError):
        unroll("clstm1", p, Tensor(np.ones((1, 2, 4))), np.ones((1, 2)))


def test_paramset_names_unique_and_views_share():
    p = ParamSet({"a.w": Tensor(np.ones(2))})
    with pytest.raises(KeyError):
        p["a.w"] = Tensor(np.zeros(2))
    v = p.view("a")
    v["w"].data[0] = 5.0
    assert p["a.w"].data[0] == 5.0
    with pytest.raises(ad.ShapeError):
        p.load({"a.w": np.zeros(3)})


def test_checkpoint_round_trip(tmp_path):
    p = init_params(lstm_specs("enc", 3, 4, "clstm2", 2) + dense_specs("out", 4, 6), RngStream(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    arrays = load_checkpoint(path)
    assert list(arrays) == list(p)
    for k in p:
        assert np.array_equal(arrays[k], p[k].data)
    raw = path.read_bytes()
    assert raw[:8] == b"SSVAECK\x00"


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    p = init_params(dense_specs("d", 2, 2), RngStream(0))
    good = tmp_path / "g.ckpt"
    save_checkpoint(p, good)
    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)
