"""NDSM / NDSM-CV objectives, the control-variate gradient, and the DSM baseline.

For a record ``(Y, Z, mu, sigma, t)`` with ``Y = mu + sigma Z`` and a score
model ``s``::

    L_ndsm = 0.5 |s(Y, t)|^2 + Z . (s(Y, t) - s(mu, t)) / sigma
    W      = s(mu, t) . Z / sigma

``W`` has mean zero because ``Z`` is independent of ``mu`` but its variance
grows like ``1 / sigma^2``; ``L_ndsm`` already has it subtracted. The NDSM-CV
objective adds it back scaled by a time-dependent coefficient,
``L_ndsm + eps(t) W``, which leaves the expected gradient unchanged for any
``eps``. ``eps = 0`` is plain NDSM and ``eps = 1`` restores the singular term.

Gradients with respect to the score parameters only need two VJPs per record:
at ``(Y, t)`` with upstream ``s(Y, t) + Z / sigma`` and at ``(mu, t)`` with
upstream ``(eps - 1) Z / sigma``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import InvalidInputError, TrainingDivergedError
from .dynamics import TrajectoryBatch, vp_transition_closed_form
from .nets import (
    MlpParams,
    eps_forward,
    eps_vjp_params_sum,
    mlp_backward,
    mlp_forward,
    score_forward,
)

# DSM times are drawn from (DSM_T_MIN, T]
DSM_T_MIN = 1e-5


@dataclass(eq=False)
class GradEstimate:
    grad: np.ndarray
    per_sample: Optional[np.ndarray] = None
    batch_size: int = 0
    loss: Optional[float] = None


def _batch(records):
    batch = TrajectoryBatch.from_records(records)
    if len(batch) == 0:
        raise InvalidInputError("empty record batch")
    return batch


def _eps_values(eps, t_N, T):
    """Per-record eps: a constant, or the eps network evaluated at ``t_N``."""
    if isinstance(eps, MlpParams):
        return eps_forward(eps, t_N, T)
    return np.full(t_N.shape, float(eps))


def _stacked_inputs(batch, T):
    t = batch.t_N[:, None] / T
    return np.vstack([np.hstack([batch.y_N, t]), np.hstack([batch.mu_prev, t])])


def ndsm_terms(score_params, records, T=1.0):
    """Per-record ``(L_ndsm, W)`` arrays."""
    batch = _batch(records)
    n = len(batch)
    out, _ = mlp_forward(score_params, _stacked_inputs(batch, T))
    s_y, s_mu = out[:n], out[n:]
    zs = batch.z_N / batch.sigma_prev[:, None]
    loss = 0.5 * np.square(s_y).sum(axis=1) + (zs * (s_y - s_mu)).sum(axis=1)
    w = (s_mu * zs).sum(axis=1)
    return loss, w


def ndsm_loss(score_params, rec, T=1.0):
    """NDSM loss of a single record (two score evaluations)."""
    if rec.sigma_prev <= 0:
        raise InvalidInputError("sigma_prev must be > 0")
    s_y = score_forward(score_params, rec.y_N, rec.t_N, T)
    s_mu = score_forward(score_params, rec.mu_prev, rec.t_N, T)
    z = np.asarray(rec.z_N)
    return float(0.5 * s_y @ s_y + z @ (s_y - s_mu) / rec.sigma_prev)


def w_term(score_params, rec, T=1.0):
    """``s(mu_prev, t_N) . z_N / sigma_prev`` for a single record."""
    if rec.sigma_prev <= 0:
        raise InvalidInputError("sigma_prev must be > 0")
    s_mu = score_forward(score_params, rec.mu_prev, rec.t_N, T)
    return float(s_mu @ np.asarray(rec.z_N) / rec.sigma_prev)


def ndsm_cv_objective(score_params, eps, records, T=1.0):
    """Batch mean of ``L_ndsm + eps(t_N) W``."""
    batch = _batch(records)
    loss, w = ndsm_terms(score_params, batch, T)
    return float(np.mean(loss + _eps_values(eps, batch.t_N, T) * w))


def ndsm_cv_batch_grad(score_params, eps, records, T=1.0, per_sample=False):
    """Score-parameter gradient of the batch-mean NDSM-CV objective.

    ``eps`` is either a fixed number or the eps network; it is held constant in
    the differentiation. With ``per_sample`` the per-record gradients are kept
    and ``grad`` is their mean.
    """
    batch = _batch(records)
    n = len(batch)
    out, cache = mlp_forward(score_params, _stacked_inputs(batch, T))
    s_y, s_mu = out[:n], out[n:]
    zs = batch.z_N / batch.sigma_prev[:, None]
    eps_v = _eps_values(eps, batch.t_N, T)
    upstream = np.vstack([s_y + zs, (eps_v - 1.0)[:, None] * zs])
    loss = 0.5 * np.square(s_y).sum(axis=1) + (zs * (s_y - s_mu)).sum(axis=1) + eps_v * (s_mu * zs).sum(axis=1)
    if per_sample:
        both = mlp_backward(score_params, cache, upstream, per_sample=True)
        samples = both[:n] + both[n:]
        grad = samples.mean(axis=0)
    else:
        samples = None
        grad = mlp_backward(score_params, cache, upstream) / n
    if not np.all(np.isfinite(grad)):
        if samples is None:
            samples = mlp_backward(score_params, cache, upstream, per_sample=True)
            samples = samples[:n] + samples[n:]
        bad = int(np.flatnonzero(~np.all(np.isfinite(samples), axis=1))[0]) if not np.all(np.isfinite(samples)) else -1
        raise TrainingDivergedError(f"non-finite NDSM-CV gradient (record {bad})")
    return GradEstimate(grad, samples, n, float(loss.mean()))


def per_sample_ndsm_grads(score_params, records, T=1.0):
    """Per-record ``(grad L_ndsm, grad W)``, each of shape ``(n, P)``."""
    batch = _batch(records)
    n = len(batch)
    out, cache = mlp_forward(score_params, _stacked_inputs(batch, T))
    s_y = out[:n]
    zs = batch.z_N / batch.sigma_prev[:, None]
    both = mlp_backward(score_params, cache, np.vstack([s_y + zs, zs]), per_sample=True)
    h = both[n:]
    return both[:n] - h, h


def cv_objective(score_params, eps, records, T=1.0, grads=None):
    """Batch MSE ``mean_i |g_i + eps(t_i) h_i - mean(g)|^2`` of the per-record gradients."""
    batch = _batch(records)
    g, h = grads if grads is not None else per_sample_ndsm_grads(score_params, batch, T)
    r = g + _eps_values(eps, batch.t_N, T)[:, None] * h - g.mean(axis=0)
    return float(np.mean(np.square(r).sum(axis=1)))


def cv_objective_grad(score_params, eps_params, records, T=1.0, grads=None):
    """Gradient of :func:`cv_objective` with respect to the eps-network parameters.

    The target ``mean(g)`` is the in-batch mean, treated as a constant.
    """
    batch = _batch(records)
    n = len(batch)
    if n < 2:
        raise InvalidInputError("cv_objective_grad needs at least two records")
    g, h = grads if grads is not None else per_sample_ndsm_grads(score_params, batch, T)
    eps_v = eps_forward(eps_params, batch.t_N, T)
    r = g + eps_v[:, None] * h - g.mean(axis=0)
    coef = 2.0 * (r * h).sum(axis=1) / n
    return eps_vjp_params_sum(eps_params, batch.t_N, coef, T)


def optimal_constant_eps(g, h):
    """Least-squares constant ``eps* = -sum (g_i - mean g) . h_i / sum |h_i|^2``."""
    gc = g - g.mean(axis=0)
    return float(-(gc * h).sum() / np.square(h).sum())


def gradient_variance_trace(per_sample):
    """Trace of the sample covariance (ddof=1) of per-record gradient rows."""
    per_sample = np.asarray(per_sample)
    centred = per_sample - per_sample.mean(axis=0)
    return float(np.square(centred).sum() / (per_sample.shape[0] - 1))


# ---------------------------------------------------------------------------
# DSM baseline


def _dsm_setup(y0, t, z, vp):
    Y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (Y0.shape[0],))
    if np.any(tt <= DSM_T_MIN) or np.any(tt > vp.T):
        raise InvalidInputError(f"DSM times must lie in ({DSM_T_MIN}, {vp.T}]")
    a = vp.beta0 * tt + (vp.beta1 - vp.beta0) * tt * tt / (2.0 * vp.T)
    m = np.exp(-0.5 * a)
    std = np.sqrt(-np.expm1(-a))
    Yt = m[:, None] * Y0 + std[:, None] * Z
    return Yt, Z, tt, std


def dsm_loss(score_params, y0, t, z, vp):
    """``0.5 |sigma_t s(Y_t, t) + z|^2`` with ``Y_t = m_t y0 + sigma_t z`` from the exact VP kernel."""
    mean, std = vp_transition_closed_form(vp.beta0, vp.beta1, vp.T, y0, t)
    if t <= DSM_T_MIN:
        raise InvalidInputError(f"DSM time must exceed {DSM_T_MIN}")
    z = np.asarray(z, dtype=np.float64)
    s = score_forward(score_params, mean + std * z, t, vp.T)
    r = std * s + z
    return float(0.5 * r @ r)


def dsm_losses(score_params, y0, t, z, vp):
    Yt, Z, tt, std = _dsm_setup(y0, t, z, vp)
    s = score_forward(score_params, Yt, tt, vp.T)
    return 0.5 * np.square(std[:, None] * s + Z).sum(axis=1)


def dsm_batch_grad(score_params, y0, t, z, vp, per_sample=False):
    """Gradient of the batch-mean DSM loss."""
    Yt, Z, tt, std = _dsm_setup(y0, t, z, vp)
    X = np.column_stack([Yt, tt / vp.T])
    s, cache = mlp_forward(score_params, X)
    r = std[:, None] * s + Z
    upstream = std[:, None] * r
    n = Yt.shape[0]
    loss = float(0.5 * np.square(r).sum(axis=1).mean())
    if per_sample:
        samples = mlp_backward(score_params, cache, upstream, per_sample=True)
        grad = samples.mean(axis=0)
    else:
        samples = None
        grad = mlp_backward(score_params, cache, upstream) / n
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError("non-finite DSM gradient")
    return GradEstimate(grad, samples, n, loss)
