import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndsmcv import InvalidInputError, TrainingDivergedError
from ndsmcv._validation import CheckpointParseError
from ndsmcv.nets import (
    AdamState,
    MlpParams,
    adam_step,
    eps_forward,
    eps_net_sizes,
    eps_vjp_params,
    eps_vjp_params_sum,
    init_params,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    n_params,
    parse_params,
    save_checkpoint,
    score_forward,
    score_net_sizes,
    score_vjp_params,
    score_vjp_params_sum,
)

from .oracles import central_fd, fd_rel_errors, naive_mlp, scalar_adam


def small_score_net(d, seed, activation="gelu"):
    return init_params((d + 1, 8, 8, d), activation, seed)


def test_default_architectures():
    assert score_net_sizes(2) == (3, 32, 32, 32, 32, 32, 32, 32, 2)
    assert eps_net_sizes() == (1, 10, 10, 10, 1)
    p = init_params(score_net_sizes(2))
    assert p.n_params == n_params(p.layer_sizes) == 3 * 32 + 32 + 6 * (32 * 32 + 32) + 32 * 2 + 2


def test_init_is_deterministic_and_he_scaled():
    a = init_params((50, 400, 3), rng_seed=4)
    b = init_params((50, 400, 3), rng_seed=4)
    np.testing.assert_array_equal(a.flat, b.flat)
    W, bias = a.layers()[0]
    assert np.all(bias == 0)
    assert W.std() == pytest.approx(np.sqrt(2 / 50), rel=0.02)


def test_invalid_layer_sizes():
    with pytest.raises(InvalidInputError):
        init_params((3,))
    with pytest.raises(InvalidInputError):
        MlpParams((3, 0, 1), "gelu", [])
    with pytest.raises(InvalidInputError):
        MlpParams((1, 1), "tanh", [0.0, 0.0])
    with pytest.raises(InvalidInputError):
        MlpParams((1, 1), "relu", [0.0])


def test_zero_params_give_zero_output():
    p = MlpParams(score_net_sizes(2, 8, 2), "gelu", np.zeros(n_params(score_net_sizes(2, 8, 2))))
    np.testing.assert_array_equal(score_forward(p, np.ones((5, 2)), 0.3), 0.0)
    e = MlpParams(eps_net_sizes(), "relu", np.zeros(n_params(eps_net_sizes())))
    assert eps_forward(e, 0.7) == 0.0


def test_linear_score_net_is_affine():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    p = MlpParams((3, 2), "gelu", np.concatenate([W.ravel(), b]))
    y = np.array([0.4, -1.1])
    np.testing.assert_allclose(score_forward(p, y, 0.5, T=2.0), np.array([0.4, -1.1, 0.25]) @ W + b, rtol=1e-15)


@pytest.mark.parametrize("activation", ["gelu", "relu"])
@pytest.mark.parametrize("d", [1, 2, 4])
def test_forward_matches_naive_reimplementation(activation, d):
    p = init_params((d + 1, 7, 5, d), activation, rng_seed=d)
    p = p.with_flat(p.flat + 0.1 * np.random.default_rng(d).normal(size=p.n_params))
    rng = np.random.default_rng(10 + d)
    for _ in range(5):
        y = rng.normal(size=d)
        t = rng.uniform(0, 2)
        ref = naive_mlp(p.layer_sizes, activation, p.flat, np.append(y, t / 2.0))
        np.testing.assert_allclose(score_forward(p, y, t, T=2.0), ref, rtol=1e-12, atol=1e-12)


def test_batch_forward_matches_rows():
    p = small_score_net(3, 1)
    Y = np.random.default_rng(2).normal(size=(6, 3))
    t = np.linspace(0.1, 0.9, 6)
    out = score_forward(p, Y, t)
    for i in range(6):
        np.testing.assert_allclose(out[i], score_forward(p, Y[i], t[i]), rtol=1e-14)


def test_dimension_mismatch():
    p = small_score_net(2, 0)
    with pytest.raises(InvalidInputError):
        score_forward(p, np.zeros(3), 0.1)
    with pytest.raises(InvalidInputError):
        score_vjp_params(p, np.zeros(2), 0.1, np.zeros(3))


# ---------------------------------------------------------------------------
# parameter gradients


def test_zero_upstream_gives_zero_gradient():
    p = small_score_net(2, 3)
    np.testing.assert_array_equal(score_vjp_params(p, [0.1, 0.2], 0.5, [0.0, 0.0]), 0.0)


def test_linear_net_gradient_is_outer_product():
    rng = np.random.default_rng(1)
    p = MlpParams((3, 2), "gelu", rng.normal(size=8))
    y, t, u = np.array([0.7, -0.2]), 0.4, np.array([1.5, -2.0])
    g = score_vjp_params(p, y, t, u)
    x = np.array([0.7, -0.2, 0.4])
    np.testing.assert_allclose(g[:6], np.outer(x, u).ravel(), rtol=1e-15)
    np.testing.assert_allclose(g[6:], u, rtol=1e-15)


def test_linear_eps_net_gradient():
    p = MlpParams((1, 1), "relu", [0.3, -0.1])
    g = eps_vjp_params(p, 0.5, 2.0, T=1.0)
    np.testing.assert_allclose(g, [2.0 * 0.5, 2.0])


@pytest.mark.parametrize("activation", ["gelu", "relu"])
@pytest.mark.parametrize("d", [1, 2, 4])
def test_score_vjp_matches_finite_differences(activation, d):
    rng = np.random.default_rng(d)
    p = init_params((d + 1, 16, 16, d), activation, rng_seed=d)
    y, t, u = rng.normal(size=d), 0.37, rng.normal(size=d)
    g = score_vjp_params(p, y, t, u)
    f = lambda flat: float(u @ score_forward(p.with_flat(flat), y, t))  # noqa: E731
    coords = rng.choice(p.n_params, size=50, replace=False)
    fd = central_fd(f, p.flat.copy(), coords)
    assert np.max(fd_rel_errors(g[coords], fd)) < 1e-4


def test_eps_vjp_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = init_params(eps_net_sizes(), "relu", 3)
    p = p.with_flat(p.flat + 0.05 * rng.normal(size=p.n_params))
    g = eps_vjp_params(p, 0.6, 1.3, T=2.0)
    f = lambda flat: 1.3 * eps_forward(p.with_flat(flat), 0.6, T=2.0)  # noqa: E731
    coords = rng.choice(p.n_params, size=50, replace=False)
    assert np.max(fd_rel_errors(g[coords], central_fd(f, p.flat.copy(), coords))) < 1e-4


def test_batched_vjp_sum_equals_per_sample_sum():
    rng = np.random.default_rng(5)
    p = small_score_net(2, 5)
    Y, t, U = rng.normal(size=(9, 2)), rng.uniform(size=9), rng.normal(size=(9, 2))
    per = score_vjp_params(p, Y, t, U)
    np.testing.assert_allclose(score_vjp_params_sum(p, Y, t, U), per.sum(axis=0), rtol=1e-12, atol=1e-14)
    for i in (0, 4, 8):
        np.testing.assert_allclose(per[i], score_vjp_params(p, Y[i], t[i], U[i]), rtol=1e-12, atol=1e-15)
    e = init_params(eps_net_sizes(), "relu", 1)
    tt, uu = rng.uniform(size=7), rng.normal(size=7)
    np.testing.assert_allclose(
        eps_vjp_params_sum(e, tt, uu), eps_vjp_params(e, tt, uu).sum(axis=0), rtol=1e-12, atol=1e-15
    )


def test_mlp_backward_flat_layout():
    p = init_params((2, 3, 1), "gelu", 0)
    X = np.array([[0.5, -0.5]])
    _, cache = mlp_forward(p, X)
    g = mlp_backward(p, cache, np.ones((1, 1)))
    # last block is the output bias: d out / d b = 1
    assert g[-1] == 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_flat_round_trip(seed):
    p = init_params((3, 4, 2), "gelu", seed)
    flat = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in p.layers()])
    np.testing.assert_array_equal(flat, p.flat)
    q = MlpParams(p.layer_sizes, p.activation, flat)
    x = np.random.default_rng(seed).normal(size=(3, 3))
    np.testing.assert_array_equal(mlp_forward(q, x)[0], mlp_forward(p, x)[0])


def test_params_are_read_only():
    p = init_params((2, 2), "gelu", 0)
    with pytest.raises(ValueError):
        p.flat[0] = 1.0


# ---------------------------------------------------------------------------
# Adam


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    p = MlpParams((1, 2), "relu", rng.normal(size=4))
    grads = rng.normal(size=(100, 4))
    ref = scalar_adam(p.flat, grads)
    state = AdamState.for_params(p)
    for k in range(100):
        state, p = adam_step(state, p, grads[k])
        np.testing.assert_allclose(p.flat, ref[k], rtol=0, atol=1e-12)
    assert state.step == 100


def test_adam_zero_gradient():
    p = MlpParams((1, 1), "relu", [1.0, 2.0])
    state = AdamState.for_params(p)
    state, p = adam_step(state, p, np.array([1.0, -1.0]))
    m_before, v_before, flat_before = state.m.copy(), state.v.copy(), p.flat.copy()
    state, p2 = adam_step(state, p, np.zeros(2))
    np.testing.assert_allclose(state.m, 0.9 * m_before)
    np.testing.assert_allclose(state.v, 0.999 * v_before)
    # bias-corrected m stays nonzero, so the step continues along the old direction
    assert not np.array_equal(p2.flat, flat_before)
    fresh = AdamState.for_params(p)
    fresh, p3 = adam_step(fresh, p, np.zeros(2))
    np.testing.assert_array_equal(p3.flat, p.flat)


def test_adam_constant_gradient_step_is_bounded():
    p = MlpParams((1, 1), "relu", [0.0, 0.0])
    state = AdamState.for_params(p, lr=1e-3)
    g = np.array([5.0, -1e-3])
    prev = p.flat.copy()
    for _ in range(200):
        state, p = adam_step(state, p, g)
        step = np.abs(p.flat - prev)
        assert np.all(step <= 1e-3 * (1 + 1e-6))
        prev = p.flat.copy()
    np.testing.assert_allclose(step, 1e-3, rtol=1e-4)


def test_adam_rejects_non_finite_gradient():
    p = MlpParams((1, 1), "relu", [0.0, 0.0])
    with pytest.raises(TrainingDivergedError):
        adam_step(AdamState.for_params(p), p, np.array([np.nan, 0.0]))
    with pytest.raises(InvalidInputError):
        adam_step(AdamState.for_params(p), p, np.zeros(3))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(score_net_sizes(2, 8, 3), "gelu", 9)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, p)
    q = load_checkpoint(a)
    save_checkpoint(b, q)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "mlp v1 sizes=3,8,8,8,2 act=gelu"
    Y = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(score_forward(q, Y, 0.3), score_forward(p, Y, 0.3), rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "text, token",
    [
        ("", "mlp v1"),
        ("net v1 sizes=1,1 act=relu\n0\n0\n", "mlp v1"),
        ("mlp v1 layers=1,1 act=relu\n0\n0\n", "sizes="),
        ("mlp v1 sizes=1,1 fn=relu\n0\n0\n", "act="),
    ],
)
def test_corrupt_header_names_expected_token(text, token):
    with pytest.raises(CheckpointParseError, match=token) as info:
        parse_params(text)
    assert info.value.lineno == 1


def test_bad_body_reports_line():
    with pytest.raises(CheckpointParseError) as info:
        parse_params("mlp v1 sizes=1,1 act=relu\n0.5\nabc\n")
    assert info.value.lineno == 3
    with pytest.raises(CheckpointParseError, match="expected 2 parameter lines"):
        parse_params("mlp v1 sizes=1,1 act=relu\n0.5\n")
