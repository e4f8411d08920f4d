import numpy as np
import pytest

from ndsmcv import VP, GMLangevin, InvalidInputError, TrajectoryBatch, make_time_grid
from ndsmcv.dynamics import TrajectoryRecord, sample_training_points
from ndsmcv.gmm import GaussianMixture
from ndsmcv.losses import (
    DSM_T_MIN,
    cv_objective,
    cv_objective_grad,
    dsm_batch_grad,
    dsm_loss,
    dsm_losses,
    gradient_variance_trace,
    ndsm_cv_batch_grad,
    ndsm_cv_objective,
    ndsm_loss,
    ndsm_terms,
    optimal_constant_eps,
    per_sample_ndsm_grads,
    w_term,
)
from ndsmcv.nets import MlpParams, eps_net_sizes, init_params, n_params, score_net_sizes

from .oracles import central_fd, fd_rel_errors


def mixture(d):
    rng = np.random.default_rng(d)
    return GaussianMixture([0.6, 0.4], rng.normal(scale=2.0, size=(2, d)), [np.eye(d), 0.5 * np.eye(d)])


def records(d, n_traj=40, k=5, dt=1e-3, seed=0):
    gmm = mixture(d)
    return sample_training_points(GMLangevin(gmm), gmm.sample(n_traj, seed), make_time_grid(2.0, 50, dt), k, seed + 1)


def resampled_z(batch, rng):
    """Same (mu, sigma, t) with fresh Gaussian noise."""
    z = rng.standard_normal(batch.z_N.shape)
    return TrajectoryBatch(batch.mu_prev + batch.sigma_prev[:, None] * z, z, batch.mu_prev, batch.sigma_prev, batch.t_N)


def score_net(d, seed=0, width=16):
    return init_params(score_net_sizes(d, width, 2), "gelu", seed)


def linear_net(W, b):
    W = np.asarray(W, dtype=np.float64)
    return MlpParams(W.shape, "gelu", np.concatenate([W.ravel(), np.asarray(b, dtype=np.float64)]))


def constant_net(c):
    d = len(c)
    return linear_net(np.zeros((d + 1, d)), c)


def bias_only_eps(value):
    return MlpParams((1, 1), "relu", [0.0, value])


# ---------------------------------------------------------------------------
# NDSM loss and W


def test_zero_and_constant_score_losses():
    batch = records(2)
    zero = MlpParams(score_net_sizes(2, 8, 2), "gelu", np.zeros(n_params(score_net_sizes(2, 8, 2))))
    for rec in batch.records()[:10]:
        assert ndsm_loss(zero, rec, T=2.0) == 0.0
        assert w_term(zero, rec, T=2.0) == 0.0
        assert ndsm_loss(constant_net([0.5, -1.5]), rec, T=2.0) == pytest.approx(0.5 * (0.25 + 2.25), rel=1e-15)


def test_linear_score_loss_cancels_sigma():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(2, 2))
    net = linear_net(np.vstack([A.T, np.zeros((1, 2))]), np.zeros(2))
    for sigma in (1e-1, 1e-3, 1e-5):
        mu, z = rng.normal(size=2), rng.normal(size=2)
        rec = TrajectoryRecord(mu + sigma * z, z, mu, sigma, 0.4)
        y = rec.y_N
        assert ndsm_loss(net, rec) == pytest.approx(0.5 * (A @ y) @ (A @ y) + z @ A @ z, rel=1e-9)


def test_batch_terms_match_single_record_evaluation():
    batch = records(3, n_traj=6)
    net = score_net(3, 1)
    loss, w = ndsm_terms(net, batch, T=2.0)
    for i, rec in enumerate(batch):
        assert loss[i] == pytest.approx(ndsm_loss(net, rec, T=2.0), rel=1e-12, abs=1e-12)
        assert w[i] == pytest.approx(w_term(net, rec, T=2.0), rel=1e-12, abs=1e-12)
    obj = ndsm_cv_objective(net, 0.7, batch, T=2.0)
    assert obj == pytest.approx(np.mean(loss + 0.7 * w), rel=1e-14)
    obj_net = ndsm_cv_objective(net, bias_only_eps(0.7), batch, T=2.0)
    assert obj_net == pytest.approx(obj, rel=1e-14)


def test_sigma_must_be_positive():
    rec = TrajectoryRecord(np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 0.1)
    with pytest.raises(InvalidInputError):
        ndsm_loss(score_net(2), rec)
    with pytest.raises(InvalidInputError):
        w_term(score_net(2), rec)


def test_w_variance_scales_inversely_with_step():
    net = score_net(2, 5)
    rng = np.random.default_rng(0)
    var = []
    for dt in (1e-3, 5e-4):
        base = records(2, n_traj=20_000, k=5, dt=dt, seed=4)
        _, w = ndsm_terms(net, resampled_z(base, rng), T=2.0)
        var.append(w.var())
    assert 1.6 <= var[1] / var[0] <= 2.4


# ---------------------------------------------------------------------------
# theta gradient


@pytest.mark.parametrize("d", [1, 2, 4])
@pytest.mark.parametrize("eps", [0.0, 1.0, "net"])
def test_batch_grad_matches_finite_differences(d, eps):
    rng = np.random.default_rng(10 + d)
    batch = records(d, n_traj=8, k=3, dt=1e-2, seed=d)
    net = score_net(d, d)
    if eps == "net":
        e = init_params(eps_net_sizes(), "relu", 3)
        eps = e.with_flat(e.flat + 0.1 * rng.normal(size=e.n_params))
    est = ndsm_cv_batch_grad(net, eps, batch, T=2.0)
    coords = rng.choice(net.n_params, size=50, replace=False)
    fd = central_fd(lambda f: ndsm_cv_objective(net.with_flat(f), eps, batch, T=2.0), net.flat.copy(), coords)
    assert np.max(fd_rel_errors(est.grad[coords], fd)) < 1e-4
    assert est.loss == pytest.approx(ndsm_cv_objective(net, eps, batch, T=2.0), rel=1e-12)


def test_grad_is_mean_of_per_sample_and_zero_eps_reduces_to_ndsm():
    batch = records(2, n_traj=10)
    net = score_net(2, 2)
    est = ndsm_cv_batch_grad(net, 0.3, batch, T=2.0, per_sample=True)
    assert est.per_sample.shape == (50, net.n_params) and est.batch_size == 50
    np.testing.assert_allclose(est.grad, est.per_sample.mean(axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ndsm_cv_batch_grad(net, 0.3, batch, T=2.0).grad, est.grad, rtol=1e-10, atol=1e-13)
    zero_eps = MlpParams(eps_net_sizes(), "relu", np.zeros(n_params(eps_net_sizes())))
    plain = ndsm_cv_batch_grad(net, 0.0, batch, T=2.0).grad
    np.testing.assert_array_equal(ndsm_cv_batch_grad(net, zero_eps, batch, T=2.0).grad, plain)
    g, h = per_sample_ndsm_grads(net, batch, T=2.0)
    np.testing.assert_allclose(g.mean(axis=0), plain, rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose((g + 0.3 * h).mean(axis=0), est.grad, rtol=1e-10, atol=1e-13)


def test_single_record_constant_net_bias_gradient():
    c = np.array([0.8, -0.3])
    rec = records(2, n_traj=1, k=1)
    g = ndsm_cv_batch_grad(constant_net(c), 0.0, rec).grad
    np.testing.assert_allclose(g[-2:], c, rtol=1e-12)


def test_non_finite_gradient_names_record():
    batch = records(2, n_traj=3, k=2)
    y = batch.y_N.copy()
    y[4] = np.nan
    bad = TrajectoryBatch(y, batch.z_N, batch.mu_prev, batch.sigma_prev, batch.t_N)
    with pytest.raises(Exception, match="record 4"):
        ndsm_cv_batch_grad(score_net(2), 0.0, bad)


def test_expected_gradient_does_not_depend_on_eps():
    """Averaging over fresh noise, eps=0 and eps=1 give the same gradient within 3 SE."""
    net = score_net(2, 7)
    base = records(2, n_traj=40, k=5)
    rng = np.random.default_rng(1)
    g0 = ndsm_cv_batch_grad(net, 0.0, base, T=2.0).grad
    dirs = np.vstack([g0 / np.linalg.norm(g0), rng.normal(size=net.n_params)])
    proj = {0.0: [], 1.0: []}
    for _ in range(40):
        rb = resampled_z(base, rng)
        for eps in proj:
            proj[eps].append(ndsm_cv_batch_grad(net, eps, rb, T=2.0, per_sample=True).per_sample @ dirs.T)
    # same noise under both eps, so compare the paired differences
    diff = np.vstack(proj[1.0]) - np.vstack(proj[0.0])
    se = diff.std(axis=0, ddof=1) / np.sqrt(len(diff))
    assert np.all(np.abs(diff.mean(axis=0)) <= 3 * se)


# ---------------------------------------------------------------------------
# eps objective


def test_cv_objective_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    batch = records(2, n_traj=10)
    net = score_net(2, 3)
    e = init_params(eps_net_sizes(), "relu", 2)
    e = e.with_flat(e.flat + 0.2 * rng.normal(size=e.n_params))
    grads = per_sample_ndsm_grads(net, batch, T=2.0)
    g = cv_objective_grad(net, e, batch, T=2.0, grads=grads)
    np.testing.assert_allclose(cv_objective_grad(net, e, batch, T=2.0), g, rtol=1e-12)
    live = np.flatnonzero(np.abs(g) > 0)
    coords = rng.choice(live, size=min(50, live.size), replace=False)
    fd = central_fd(lambda f: cv_objective(net, e.with_flat(f), batch, T=2.0, grads=grads), e.flat.copy(), coords)
    assert np.max(fd_rel_errors(g[coords], fd)) < 1e-4


def test_cv_objective_grad_zero_when_h_vanishes():
    batch = records(2, n_traj=4)
    net = score_net(2)
    e = init_params(eps_net_sizes(), "relu", 0)
    g, _ = per_sample_ndsm_grads(net, batch)
    np.testing.assert_array_equal(cv_objective_grad(net, e, batch, grads=(g, np.zeros_like(g))), 0.0)
    with pytest.raises(InvalidInputError):
        cv_objective_grad(score_net(2), e, batch[np.array([0])])


def test_constant_eps_descent_reaches_least_squares_optimum():
    batch = records(2, n_traj=20)
    net = score_net(2, 4)
    g, h = per_sample_ndsm_grads(net, batch, T=2.0)
    target = optimal_constant_eps(g, h)
    curvature = 2 * np.square(h).sum(axis=1).mean()
    b = 0.0
    for _ in range(200):
        step = cv_objective_grad(net, bias_only_eps(b), batch, T=2.0, grads=(g, h))[1] / curvature
        b -= step
        if abs(step) < 1e-15:
            break
    assert b == pytest.approx(target, abs=1e-6)
    assert gradient_variance_trace(g + b * h) <= gradient_variance_trace(g)


def test_optimal_constant_eps_against_lstsq():
    rng = np.random.default_rng(2)
    g, h = rng.normal(size=(30, 7)), rng.normal(size=(30, 7))
    gc = g - g.mean(axis=0)
    ref = np.linalg.lstsq(h.reshape(-1, 1), -gc.ravel(), rcond=None)[0][0]
    assert optimal_constant_eps(g, h) == pytest.approx(ref, rel=1e-12)


def test_gradient_variance_trace_against_cov():
    x = np.random.default_rng(0).normal(size=(40, 5))
    assert gradient_variance_trace(x) == pytest.approx(np.trace(np.cov(x.T)), rel=1e-12)


# ---------------------------------------------------------------------------
# DSM


def test_dsm_exact_conditional_score_gives_zero_loss():
    vp = VP()
    t = 0.3
    _, std = __import__("ndsmcv").dynamics.vp_transition_closed_form(0.1, 20.0, 1.0, np.zeros(2), t)
    # with y0 = 0 the noisy point is std * z and -y / std^2 = -z / std
    net = linear_net(np.vstack([-np.eye(2) / std**2, np.zeros((1, 2))]), np.zeros(2))
    z = np.array([0.4, -1.3])
    assert dsm_loss(net, np.zeros(2), t, z, vp) == pytest.approx(0.0, abs=1e-24)
    zero = MlpParams((3, 2), "gelu", np.zeros(8))
    assert dsm_loss(zero, np.ones(2), t, z, vp) == pytest.approx(0.5 * z @ z, rel=1e-15)


def test_dsm_batch_matches_single_and_finite_differences():
    rng = np.random.default_rng(1)
    vp = VP()
    net = score_net(2, 1)
    y0 = rng.normal(size=(12, 2))
    t = rng.uniform(0.01, 1.0, size=12)
    z = rng.normal(size=(12, 2))
    batch = dsm_losses(net, y0, t, z, vp)
    for i in range(12):
        assert batch[i] == pytest.approx(dsm_loss(net, y0[i], t[i], z[i], vp), rel=1e-12)
    est = dsm_batch_grad(net, y0, t, z, vp, per_sample=True)
    np.testing.assert_allclose(est.grad, est.per_sample.mean(axis=0), rtol=1e-12, atol=1e-15)
    coords = rng.choice(net.n_params, size=50, replace=False)
    fd = central_fd(lambda f: dsm_losses(net.with_flat(f), y0, t, z, vp).mean(), net.flat.copy(), coords)
    assert np.max(fd_rel_errors(est.grad[coords], fd)) < 1e-4


def test_dsm_time_guard():
    net = score_net(2)
    with pytest.raises(InvalidInputError):
        dsm_loss(net, np.zeros(2), DSM_T_MIN, np.zeros(2), VP())
    with pytest.raises(InvalidInputError):
        dsm_losses(net, np.zeros((1, 2)), [1.5], np.zeros((1, 2)), VP())
