import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqcast import numerics as nx
from uqcast.layers import (
    DenseParams,
    DropoutSpec,
    LayerNormParams,
    LstmParams,
    LstmState,
    SpectralState,
    dense_forward,
    init_params,
    layer_norm,
    lstm_step,
    power_iteration,
    spectral_normalize,
)

OFF = DropoutSpec()


def dense(tape, w, b, activation="linear"):
    return DenseParams(tape.leaf(np.asarray(w, float)), tape.leaf(np.asarray(b, float).reshape(1, -1)),
                       activation)


def lstm_params(tape, H, D, rng):
    ws = {g: tape.leaf(rng.uniform(-1, 1, (H, H + D))) for g in "fioc"}
    bs = {g: tape.leaf(rng.uniform(-1, 1, (1, H))) for g in "fioc"}
    return LstmParams(ws["f"], ws["i"], ws["o"], ws["c"], bs["f"], bs["i"], bs["o"], bs["c"])


# ------------------------------------------------------------------ dense


def test_dense_identity_and_hand_sum():
    t = nx.Tape()
    x = t.constant(np.array([[2.0, 3.0]]))
    out = dense_forward(dense(t, np.eye(2), [0, 0]), x, OFF, None)
    assert np.array_equal(out.value, x.value)
    out = dense_forward(dense(t, [[1.0, 1.0]], [1.0]), x, OFF, None)
    assert out.value[0, 0] == 6.0


def test_dropout_scales_survivors_by_inverse_keep():
    t = nx.Tape()
    x = t.constant(np.ones((4, 50)))
    out = dense_forward(dense(t, np.eye(50), np.zeros(50)), x, DropoutSpec(0.5, "train"), nx.RngStream(3))
    vals = set(np.unique(out.value))
    assert vals <= {0.0, 2.0} and vals == {0.0, 2.0}


def test_dropout_off_ignores_rate():
    t = nx.Tape()
    x = t.constant(np.ones((2, 3)))
    out = dense_forward(dense(t, np.eye(3), np.zeros(3)), x, DropoutSpec(0.5, "off"), nx.RngStream(0))
    assert np.array_equal(out.value, x.value)


def test_dense_shape_mismatch():
    t = nx.Tape()
    with pytest.raises(nx.ShapeError):
        dense_forward(dense(t, np.ones((2, 3)), np.zeros(2)), t.constant(np.ones((1, 2))), OFF, None)


def test_dropout_spec_validation():
    with pytest.raises(ValueError):
        DropoutSpec(1.0, "train")
    with pytest.raises(ValueError):
        DropoutSpec(0.1, "sometimes")


# ------------------------------------------------------------------ layer norm


def ln(t, H, gamma=1.0, beta=0.0, eps=1e-5):
    return LayerNormParams(t.leaf(np.full((1, H), gamma)), t.leaf(np.full((1, H), beta)), eps)


def test_layer_norm_reference_cases():
    t = nx.Tape()
    assert np.allclose(layer_norm(ln(t, 3), t.constant(np.full((1, 3), 7.0))).value, 0.0, atol=1e-12)
    out = layer_norm(ln(t, 2, eps=1e-300), t.constant(np.array([[1.0, -1.0]]))).value
    assert np.allclose(out, [[1.0, -1.0]], rtol=0, atol=1e-15)
    out = layer_norm(ln(t, 4, gamma=0.0, beta=0.25), t.constant(np.random.default_rng(0).normal(size=(3, 4))))
    assert np.array_equal(out.value, np.full((3, 4), 0.25))


def test_layer_norm_needs_two_units():
    t = nx.Tape()
    with pytest.raises(nx.ShapeError):
        layer_norm(ln(t, 1), t.constant(np.ones((2, 1))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), H=st.integers(2, 8))
def test_layer_norm_rows_are_standardized(seed, H):
    x = np.random.default_rng(seed).uniform(-5, 5, (3, H))
    t = nx.Tape()
    out = layer_norm(ln(t, H, eps=1e-12), t.constant(x)).value
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-10)
    assert np.allclose(out.std(axis=1), 1.0, atol=1e-6)


# ------------------------------------------------------------------ lstm


def test_lstm_step_matches_gate_equations():
    rng = np.random.default_rng(4)
    t = nx.Tape()
    p = lstm_params(t, 3, 2, rng)
    h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    x = rng.normal(size=(2, 2))
    out = lstm_step(p, LstmState(t.constant(h0), t.constant(c0)), t.constant(x), OFF, None)
    z = np.concatenate([h0, x], axis=1)
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    f = sig(z @ p.W_f.value.T + p.b_f.value)
    i = sig(z @ p.W_i.value.T + p.b_i.value)
    o = sig(z @ p.W_o.value.T + p.b_o.value)
    cand = np.tanh(z @ p.W_c.value.T + p.b_c.value)
    C = f * c0 + i * cand
    assert np.allclose(out.C.value, C, rtol=0, atol=1e-14)
    assert np.allclose(out.h.value, o * np.tanh(C), rtol=0, atol=1e-14)


def test_recurrent_dropout_masks_only_the_candidate():
    rng = np.random.default_rng(5)
    t = nx.Tape()
    p = lstm_params(t, 4, 1, rng)
    state = LstmState(t.constant(rng.normal(size=(1, 4))), t.constant(rng.normal(size=(1, 4))))
    x = t.constant(np.ones((1, 1)))
    zero = np.zeros((1, 4))
    out = lstm_step(p, state, x, OFF, None, mask=zero)
    z = np.concatenate([state.h.value, x.value], axis=1)
    f = 1.0 / (1.0 + np.exp(-(z @ p.W_f.value.T + p.b_f.value)))
    # the candidate is dropped: memory is only the gated previous cell
    assert np.allclose(out.C.value, f * state.C.value, rtol=0, atol=1e-15)


def test_lstm_input_width_checked():
    t = nx.Tape()
    p = lstm_params(t, 3, 1, np.random.default_rng(0))
    with pytest.raises(nx.ShapeError):
        lstm_step(p, LstmState.zeros(t, 1, 3), t.constant(np.ones((1, 2))), OFF, None)


def test_lstm_bptt_gradient():
    rng = np.random.default_rng(6)
    H, D, T = 3, 2, 4
    xs = rng.uniform(-2, 2, (T, 2, D))
    base = {g: rng.uniform(-1, 1, (H, H + D)) for g in "fioc"}
    bias = {g: rng.uniform(-1, 1, (1, H)) for g in "fioc"}

    def run(Wf):
        t = nx.Tape()
        W = {g: t.leaf(Wf if g == "f" else base[g]) for g in "fioc"}
        B = {g: t.leaf(bias[g]) for g in "fioc"}
        p = LstmParams(W["f"], W["i"], W["o"], W["c"], B["f"], B["i"], B["o"], B["c"])
        s = LstmState.zeros(t, 2, H)
        for k in range(T):
            s = lstm_step(p, s, t.constant(xs[k]), OFF, None)
        return nx.sum_all(nx.square(s.h)), W["f"]

    loss, wf = run(base["f"])
    g = nx.grad(loss, [wf])[0]
    fd = nx.finite_difference_gradient(lambda th: float(run(th)[0].value[0, 0]), base["f"])
    assert np.max(nx.relative_error(g, fd)) < 1e-4


# ------------------------------------------------------------------ spectral


def test_spectral_diag_and_orthogonal():
    st_ = SpectralState(np.array([0.6, 0.8]), 60)
    wn, s = spectral_normalize(np.diag([3.0, 1.0]), st_)
    assert abs(s - 3.0) < 1e-12
    assert np.allclose(wn, np.diag([1.0, 1.0 / 3.0]), atol=1e-12)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    wn, s = spectral_normalize(q, SpectralState(np.ones(5), 1))
    assert abs(s - 1.0) < 1e-12 and np.allclose(wn, q, atol=1e-12)


def test_spectral_random_10x10_against_eigen_oracle():
    # 50 steps from a random start; the oracle is the top eigenvalue of w^T w
    rng = np.random.default_rng(2024)
    w = rng.normal(size=(10, 10))
    sig, _ = power_iteration(w, rng.normal(size=10) / np.sqrt(10), 50)
    oracle = np.sqrt(np.linalg.eigvalsh(w.T @ w).max())
    assert abs(sig - oracle) / oracle < 1e-6


def test_spectral_zero_matrix_is_an_error():
    with pytest.raises(ValueError):
        spectral_normalize(np.zeros((3, 3)), SpectralState(np.ones(3)))


def test_spectral_update_flag():
    w = np.random.default_rng(1).normal(size=(4, 3))
    st_ = SpectralState(np.ones(4))
    u0 = st_.u.copy()
    spectral_normalize(w, st_, n_iter=5, update=False)
    assert np.array_equal(st_.u, u0)
    spectral_normalize(w, st_, n_iter=5)
    assert not np.array_equal(st_.u, u0)
    assert abs(np.linalg.norm(st_.u) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 12), c=st.integers(1, 12))
def test_power_iteration_never_overestimates(seed, r, c):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(r, c))
    sig, u = power_iteration(w, rng.normal(size=r), 3)
    top = np.linalg.svd(w, compute_uv=False)[0]
    assert sig <= top * (1 + 1e-12)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(2, 15), c=st.integers(2, 15))
def test_post_normalization_estimate_near_one(seed, r, c):
    # well-separated top singular value, built explicitly
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.normal(size=(r, r)))
    V, _ = np.linalg.qr(rng.normal(size=(c, c)))
    k = min(r, c)
    s = np.sort(rng.uniform(0.1, 1.0, k))[::-1]
    s[0] = 2.0 * s[1] if k > 1 else s[0]
    w = U[:, :k] @ np.diag(s) @ V[:, :k].T
    st_ = SpectralState(rng.normal(size=r), 20)
    wn, _ = spectral_normalize(w, st_)
    post, _ = power_iteration(wn, rng.normal(size=r), 20)
    assert 0.99 <= post <= 1.01


# ------------------------------------------------------------------ init


def test_init_kinds():
    assert np.array_equal(init_params((3, 1), None, "zeros"), np.zeros((3, 1)))
    assert np.array_equal(init_params((1, 4), None, "forget_bias_one"), np.ones((1, 4)))
    w = init_params((20, 30), nx.RngStream(0))
    bound = np.sqrt(6.0 / 50.0)
    assert abs(bound - 0.3464) < 1e-4
    assert np.all(np.abs(w) <= bound)
    assert np.abs(w).max() > 0.9 * bound
    with pytest.raises(ValueError):
        init_params((2, 2), None, "he_normal")
