import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volt.attention import HeadParams, attn, diview, mh_deatt, mh_view_vol_attn, mh_vol_attn, traces_from_scores
from volt.tensor import ParamStore, ShapeError, Tensor, grad_check, matmul, reshape


def np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_multi_head(queries, keys, wq, wk, wv, h):
    """Reference: loop over heads with explicit per-head weight slices."""
    d_k = wq.shape[1] // h
    outs, scores = [], []
    for i in range(h):
        cols = slice(i * d_k, (i + 1) * d_k)
        q, k, v = queries @ wq[:, cols], keys @ wk[:, cols], keys @ wv[:, cols]
        s = np_softmax(q @ k.T / np.sqrt(d_k))
        outs.append(s @ v)
        scores.append(s)
    return np.concatenate(outs, axis=1), np.stack(scores)


def make_heads(rng, d=6, h=2, d_k=3):
    w = [Tensor(rng.normal(size=(d, h * d_k))) for _ in range(3)]
    return HeadParams(*w, n_heads=h)


# -- attn ---------------------------------------------------------------------

def test_attn_single_key():
    out, s = attn([[1.0, 0.0]], [[5.0, 5.0]], [[7.0, 9.0]])
    np.testing.assert_array_equal(out.value, [[7.0, 9.0]])
    np.testing.assert_array_equal(s.value, [[1.0]])


def test_attn_dominant_key():
    d_k = 4
    q = np.array([[1.0, 0, 0, 0]])
    k = np.array([[0.0, 0, 0, 0], [50 * np.sqrt(d_k) + 1, 0, 0, 0], [-3.0, 0, 0, 0]])
    v = np.arange(12.0).reshape(3, 4)
    out, _ = attn(q, k, v)
    np.testing.assert_allclose(out.value, v[1:2], atol=1e-9)


def test_attn_equal_scores_average():
    out, _ = attn([[0.0]], [[0.0], [0.0]], [[2.0], [4.0]])
    np.testing.assert_allclose(out.value, [[3.0]], atol=1e-15)


def test_attn_shape_errors():
    with pytest.raises(ShapeError):
        attn(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        attn(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


# -- diview -------------------------------------------------------------------

def test_diview_concatenates():
    np.testing.assert_array_equal(diview([[1.0, 2.0]], [[3.0]]).value, [[1.0, 2.0, 3.0]])


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_diview_shape_law_and_skip_identity(m, h, d_k, d):
    rng = np.random.default_rng(m * 1000 + h * 100 + d_k * 10 + d)
    a, x0 = rng.normal(size=(m, h * d_k)), rng.normal(size=(m, d))
    out = diview(a, x0).value
    assert out.shape == (m, h * d_k + d)
    assert out[:, -d:].tobytes() == x0.tobytes()


def test_diview_row_mismatch():
    with pytest.raises(ShapeError):
        diview(np.zeros((2, 3)), np.zeros((3, 1)))


# -- mh_deatt -----------------------------------------------------------------

def test_mh_deatt_single_view_by_hand():
    rng = np.random.default_rng(0)
    heads = make_heads(rng)
    x, x0 = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    w_view = rng.normal(size=(2 * 3 + 6, 6))
    out, scores = mh_deatt(x, x0, heads, w_view)
    # one view: every head's softmax is 1, so the head output is x W_V
    want = np.concatenate([x @ heads.wv.value, x0], axis=1) @ w_view
    np.testing.assert_allclose(out.value, want, atol=1e-13)
    np.testing.assert_array_equal(scores.value, np.ones((2, 1, 1)))


@pytest.mark.parametrize("enhance", [True, False])
def test_mh_deatt_matches_reference(enhance):
    rng = np.random.default_rng(1)
    heads = make_heads(rng)
    x, x0 = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    w_view = rng.normal(size=(12 if enhance else 6, 6))
    out, scores = mh_deatt(x, x0, heads, w_view, enhance=enhance)
    a, s = np_multi_head(x, x, heads.wq.value, heads.wk.value, heads.wv.value, 2)
    if enhance:
        a = np.concatenate([a, x0], axis=1)
    np.testing.assert_allclose(out.value, a @ w_view, atol=1e-12)
    np.testing.assert_allclose(scores.value, s, atol=1e-14)


def test_mh_deatt_keys_come_from_current_input():
    rng = np.random.default_rng(2)
    heads = make_heads(rng)
    x = rng.normal(size=(4, 6))
    w_view = rng.normal(size=(12, 6))
    _, s1 = mh_deatt(x, rng.normal(size=(4, 6)), heads, w_view)
    _, s2 = mh_deatt(x, rng.normal(size=(4, 6)), heads, w_view)
    # x0 only enters after attention, so scores do not depend on it
    np.testing.assert_array_equal(s1.value, s2.value)


def test_mh_deatt_identical_rows():
    rng = np.random.default_rng(3)
    heads = make_heads(rng)
    row = rng.normal(size=(1, 6))
    x = np.repeat(row, 4, axis=0)
    out, _ = mh_deatt(x, x, heads, rng.normal(size=(12, 6)))
    np.testing.assert_allclose(out.value - out.value[0], 0.0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**16), st.booleans())
def test_mh_deatt_permutation_equivariance(m, seed, enhance):
    rng = np.random.default_rng(seed)
    heads = make_heads(rng)
    x, x0 = rng.normal(size=(m, 6)), rng.normal(size=(m, 6))
    w_view = rng.normal(size=(12 if enhance else 6, 6))
    perm = rng.permutation(m)
    out, _ = mh_deatt(x, x0, heads, w_view, enhance)
    out_p, _ = mh_deatt(x[perm], x0[perm], heads, w_view, enhance)
    np.testing.assert_allclose(out_p.value, out.value[perm], atol=1e-9)


def test_mh_deatt_without_enhance_is_standard_multi_head():
    # H * d_k = d: w_view is then a plain (d, d) output projection
    rng = np.random.default_rng(4)
    heads = make_heads(rng, d=6, h=2, d_k=3)
    x = rng.normal(size=(3, 6))
    w_o = rng.normal(size=(6, 6))
    out, _ = mh_deatt(x, x, heads, w_o, enhance=False)
    ref = []
    for h in range(2):
        wq, wk, wv = heads.head(h)
        ref.append(np_softmax((x @ wq) @ (x @ wk).T / np.sqrt(3)) @ (x @ wv))
    np.testing.assert_allclose(out.value, np.concatenate(ref, axis=1) @ w_o, atol=1e-12)


def test_mh_deatt_w_view_shape_checked():
    rng = np.random.default_rng(5)
    heads = make_heads(rng)
    x = rng.normal(size=(3, 6))
    with pytest.raises(ShapeError):
        mh_deatt(x, x, heads, np.zeros((6, 6)), enhance=True)
    with pytest.raises(ShapeError):
        mh_deatt(x, x, heads, np.zeros((12, 6)), enhance=False)


# -- decoder layers -----------------------------------------------------------

def test_mh_vol_attn_single_token():
    rng = np.random.default_rng(6)
    heads = make_heads(rng)
    y, w = rng.normal(size=(1, 6)), rng.normal(size=(6, 6))
    out, _ = mh_vol_attn(y, heads, w)
    np.testing.assert_allclose(out.value, (y @ heads.wv.value) @ w, atol=1e-13)


def test_mh_vol_attn_two_tokens_by_hand():
    rng = np.random.default_rng(7)
    heads = make_heads(rng)
    y, w = rng.normal(size=(2, 6)), rng.normal(size=(6, 6))
    out, scores = mh_vol_attn(y, heads, w)
    a, s = np_multi_head(y, y, heads.wq.value, heads.wk.value, heads.wv.value, 2)
    np.testing.assert_allclose(out.value, a @ w, atol=1e-12)
    np.testing.assert_allclose(scores.value, s, atol=1e-14)


def test_mh_vol_attn_identical_rows():
    rng = np.random.default_rng(8)
    heads = make_heads(rng)
    y = np.repeat(rng.normal(size=(1, 6)), 5, axis=0)
    out, _ = mh_vol_attn(y, heads, rng.normal(size=(6, 6)))
    np.testing.assert_allclose(out.value - out.value[0], 0.0, atol=1e-14)


def test_mh_view_vol_attn_single_view():
    rng = np.random.default_rng(9)
    heads = make_heads(rng)
    y, x_l, w = rng.normal(size=(4, 6)), rng.normal(size=(1, 6)), np.eye(6)
    out, scores = mh_view_vol_attn(y, x_l, heads, w)
    # identity projection exposes the pre-projection values
    np.testing.assert_allclose(out.value, np.repeat(x_l @ heads.wv.value, 4, axis=0), atol=1e-14)
    assert scores.shape == (2, 4, 1)


def test_mh_view_vol_attn_by_hand():
    rng = np.random.default_rng(10)
    heads = make_heads(rng)
    y, x_l, w = rng.normal(size=(2, 6)), rng.normal(size=(2, 6)), rng.normal(size=(6, 6))
    out, scores = mh_view_vol_attn(y, x_l, heads, w)
    a, s = np_multi_head(y, x_l, heads.wq.value, heads.wk.value, heads.wv.value, 2)
    np.testing.assert_allclose(out.value, a @ w, atol=1e-12)
    np.testing.assert_allclose(scores.value, s, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**16))
def test_mh_view_vol_attn_key_permutation_invariance(n, m, seed):
    rng = np.random.default_rng(seed)
    heads = make_heads(rng)
    y, x_l, w = rng.normal(size=(n, 6)), rng.normal(size=(m, 6)), rng.normal(size=(6, 6))
    out, _ = mh_view_vol_attn(y, x_l, heads, w)
    out_p, _ = mh_view_vol_attn(y, x_l[rng.permutation(m)], heads, w)
    np.testing.assert_allclose(out_p.value, out.value, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**16))
def test_mh_vol_attn_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    heads = make_heads(rng)
    y, w = rng.normal(size=(n, 6)), rng.normal(size=(6, 6))
    perm = rng.permutation(n)
    out, _ = mh_vol_attn(y, heads, w)
    out_p, _ = mh_vol_attn(y[perm], heads, w)
    np.testing.assert_allclose(out_p.value, out.value[perm], atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**16), st.floats(0.1, 20))
def test_traces_are_stochastic(n, m, seed, spread):
    rng = np.random.default_rng(seed)
    heads = HeadParams(*(Tensor(rng.normal(scale=spread, size=(6, 6))) for _ in range(3)), n_heads=2)
    for _, s in (mh_deatt(rng.normal(size=(m, 6)), rng.normal(size=(m, 6)), heads, np.eye(12, 6)),
                 mh_vol_attn(rng.normal(size=(n, 6)), heads, np.eye(6)),
                 mh_view_vol_attn(rng.normal(size=(n, 6)), rng.normal(size=(m, 6)), heads, np.eye(6))):
        for trace in traces_from_scores(s, 0, "view-view"):
            assert (trace.scores >= 0).all() and (trace.scores <= 1).all()
            np.testing.assert_allclose(trace.scores.sum(axis=1), 1.0, atol=1e-9)


def test_traces_split_per_head():
    traces = traces_from_scores(np.ones((3, 2, 2)) / 2, layer=4, role="volume-volume")
    assert [t.head for t in traces] == [0, 1, 2]
    assert all(t.layer == 4 and t.role == "volume-volume" for t in traces)


def test_head_params_validation():
    with pytest.raises(ShapeError):
        HeadParams(Tensor(np.zeros((4, 6))), Tensor(np.zeros((4, 6))), Tensor(np.zeros((4, 5))), 2)
    with pytest.raises(ShapeError):
        HeadParams(Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 5))), 2)


# -- gradients on 3-token toys ------------------------------------------------

def _toy_store(seed, out_rows):
    rng = np.random.default_rng(seed)
    ps = ParamStore()
    for name in ("wq", "wk", "wv"):
        ps.add(name, rng.normal(size=(4, 4)))
    ps.add("w", rng.normal(size=(out_rows, 4)))
    ps.add("x", rng.normal(size=(3, 4)))
    ps.add("x0", rng.normal(size=(3, 4)))
    return ps, rng.normal(size=(12, 1))


def _scalar(out, r):
    return reshape(matmul(reshape(out, (1, 12)), r), ())


@pytest.mark.parametrize("layer", ["deatt", "deatt_plain", "vol", "view_vol"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients(layer, seed):
    ps, r = _toy_store(seed, 2 * 2 + 4 if layer == "deatt" else 4)

    def f(p):
        heads = HeadParams(p["wq"], p["wk"], p["wv"], 2)
        if layer == "deatt":
            out, _ = mh_deatt(p["x"], p["x0"], heads, p["w"], enhance=True)
        elif layer == "deatt_plain":
            out, _ = mh_deatt(p["x"], p["x0"], heads, p["w"], enhance=False)
        elif layer == "vol":
            out, _ = mh_vol_attn(p["x"], heads, p["w"])
        else:
            out, _ = mh_view_vol_attn(p["x"], p["x0"], heads, p["w"])
        return _scalar(out, r)

    assert grad_check(f, ps) < 1e-4
