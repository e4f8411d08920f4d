"""Gaussian mixture priors: density, score, sampling, EM fitting and a text format.

The forward noising dynamics use the overdamped Langevin SDE whose invariant
law is the mixture density ``eta(y) = sum_i w_i N(y; mu_i, Sigma_i)``. With the
potential ``V = -log eta``, the Langevin drift ``-grad V`` is exactly
``grad log eta``, i.e. :func:`gmm_score`. Everywhere in this package the GM
drift is taken as ``+gmm_score``; no other sign convention is used.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    CheckpointParseError,
    DegenerateFitError,
    InvalidInputError,
    as_points,
    check_int,
    check_positive,
    check_samples,
)
from .io import atomic_write_text, fmt_real

COV_MODES = ("full", "diagonal", "spherical", "shared-spherical")

# relative covariance floor, scaled by trace(sample covariance) / d
COV_FLOOR = 1e-6

_LOG_2PI = np.log(2.0 * np.pi)


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Immutable Gaussian mixture with cached Cholesky factors.

    ``covariances`` is always stored as a dense ``(K, d, d)`` stack; ``cov_mode``
    records the constraint it was fitted under.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_mode: str = "full"
    chol: np.ndarray = field(init=False, repr=False)
    log_det: np.ndarray = field(init=False, repr=False)
    prec_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise InvalidInputError("weights must be a non-empty vector")
        K = w.size
        if mu.ndim != 2 or mu.shape[0] != K:
            raise InvalidInputError(f"means must have shape (K={K}, d), got {mu.shape}")
        d = mu.shape[1]
        if cov.shape != (K, d, d):
            raise InvalidInputError(f"covariances must have shape {(K, d, d)}, got {cov.shape}")
        if self.cov_mode not in COV_MODES:
            raise InvalidInputError(f"unknown cov_mode {self.cov_mode!r}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("weights must be nonnegative and sum to 1")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise InvalidInputError("means and covariances must be finite")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise InvalidInputError("covariances must be symmetric")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidInputError("covariances must be positive definite") from exc
        eye = np.broadcast_to(np.eye(d), (K, d, d))
        # (y - mu) @ prec_chol has squared norm equal to the Mahalanobis distance
        prec_chol = np.swapaxes(np.linalg.solve(L, eye), 1, 2)
        log_det = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        set_ = object.__setattr__
        set_(self, "weights", _readonly(w))
        set_(self, "means", _readonly(mu))
        set_(self, "covariances", _readonly(cov))
        set_(self, "chol", _readonly(L))
        set_(self, "log_det", _readonly(log_det))
        set_(self, "prec_chol", _readonly(prec_chol))

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def _whitened(self, Y):
        # (K, n, d): whitened residuals per component
        diff = Y[None, :, :] - self.means[:, None, :]
        return diff @ self.prec_chol

    def _log_prob_from_white(self, white):
        maha = np.square(white).sum(axis=2).T
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return log_w - 0.5 * (self.dim * _LOG_2PI + self.log_det + maha)

    def component_log_prob(self, Y):
        """``log w_k + log N(y; mu_k, Sigma_k)`` for each row and component, shape (n, K)."""
        Y, _ = as_points(Y, self.dim)
        return self._log_prob_from_white(self._whitened(Y))

    def log_density(self, Y):
        return logsumexp(self.component_log_prob(Y), axis=1)

    def responsibilities(self, Y):
        lp = self.component_log_prob(Y)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def score(self, Y):
        """Gradient of ``log eta`` at each row of ``Y``; also the GM Langevin drift."""
        Y, _ = as_points(Y, self.dim)
        white = self._whitened(Y)
        lp = self._log_prob_from_white(white)
        resp = np.exp(lp - lp.max(axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        # Sigma_k^{-1} (mu_k - y) = -prec_chol_k @ white_k
        per_comp = white @ np.swapaxes(self.prec_chol, 1, 2)
        return -np.einsum("kn,knd->nd", resp.T, per_comp)

    def sample(self, n, rng=None):
        n = check_int(n, "n", minimum=1)
        rng = np.random.default_rng(rng)
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("nij,nj->ni", self.chol[comps], z)

    def permuted(self, order):
        """Same mixture with components reordered (handy for invariance checks)."""
        order = np.asarray(order)
        return GaussianMixture(self.weights[order], self.means[order], self.covariances[order], self.cov_mode)


def gmm_log_density(gmm, y):
    """Log mixture density at a point or at each row of a batch."""
    Y, single = as_points(y, gmm.dim)
    out = gmm.log_density(Y)
    return float(out[0]) if single else out


def gmm_score(gmm, y):
    """``grad log eta(y)``: responsibility-weighted ``Sigma_i^{-1}(mu_i - y)``."""
    Y, single = as_points(y, gmm.dim)
    out = gmm.score(Y)
    return out[0] if single else out


def sample_gmm(gmm, n, rng=None):
    return gmm.sample(n, rng)


# ---------------------------------------------------------------------------
# EM


def _kmeanspp_seeds(X, K, rng):
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.square(X - X[idx[0]]).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, np.square(X - X[nxt]).sum(axis=1))
    return X[idx].copy()


def _m_step(X, resp, cov_mode, reg):
    n, d = X.shape
    K = resp.shape[1]
    nk = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    raw = np.empty((K, d, d))
    for k in range(K):
        diff = X - means[k]
        raw[k] = (resp[:, k, None] * diff).T @ diff / nk[k]
    eye = np.eye(d)
    if cov_mode == "full":
        cov = raw
    elif cov_mode == "diagonal":
        cov = np.diagonal(raw, axis1=1, axis2=2)[:, :, None] * eye
    elif cov_mode == "spherical":
        cov = (np.trace(raw, axis1=1, axis2=2) / d)[:, None, None] * eye
    else:
        shared = (nk * np.trace(raw, axis1=1, axis2=2)).sum() / (nk.sum() * d)
        cov = np.broadcast_to(shared * eye, (K, d, d)).copy()
    raw_trace = np.trace(cov, axis1=1, axis2=2)
    if K > 1 and np.all(raw_trace <= d * reg):
        raise DegenerateFitError("covariance floor dominates every component; data has no spread")
    cov = cov + reg * eye
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    try:
        return GaussianMixture(weights, means, cov, cov_mode)
    except InvalidInputError as exc:
        raise DegenerateFitError(f"M-step produced an invalid mixture: {exc}") from exc


def _run_em(X, K, cov_mode, tol, max_iter, rng):
    n, d = X.shape
    data_cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    reg = COV_FLOOR * np.trace(data_cov) / d
    seeds = _kmeanspp_seeds(X, K, rng)
    # k-means++ means, global (mode-constrained) covariance, uniform weights
    pooled = _m_step(X, np.full((n, K), 1.0 / K), cov_mode, reg)
    gmm = GaussianMixture(np.full(K, 1.0 / K), seeds, pooled.covariances, cov_mode)
    ll = float(np.mean(gmm.log_density(X)))
    history = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        resp = gmm.responsibilities(X)
        gmm = _m_step(X, resp, cov_mode, reg)
        new_ll = float(np.mean(gmm.log_density(X)))
        history.append(new_ll)
        if new_ll - ll < tol:
            converged = True
            break
        ll = new_ll
    return gmm, history, converged, n_iter


class GaussianMixtureEM(DensityMixin, BaseEstimator):
    """Fixed-K Gaussian mixture fitted by EM with k-means++ restarts.

    Parameters
    ----------
    n_components : int
        Number of mixture components K.
    cov_mode : {"full", "diagonal", "spherical", "shared-spherical"}
        Covariance constraint. ``shared-spherical`` uses one scalar variance
        for every component.
    tol : float
        Stop when the per-sample log-likelihood improves by less than this.
    max_iter : int
    n_init : int
        Number of restarts; the highest-likelihood fit is kept.
    random_state : int or None

    Attributes
    ----------
    mixture_ : GaussianMixture
    log_likelihood_ : float
        Mean per-sample log-likelihood of the kept fit.
    history_ : list of float
        Per-sample log-likelihood after each EM iteration of the kept fit.
    n_iter_, converged_
    """

    def __init__(self, n_components=1, cov_mode="full", tol=1e-6, max_iter=500, n_init=5, random_state=0):
        self.n_components = n_components
        self.cov_mode = cov_mode
        self.tol = tol
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_samples(X, "samples")
        K = check_int(self.n_components, "n_components", minimum=1)
        check_positive(self.tol, "tol")
        max_iter = check_int(self.max_iter, "max_iter", minimum=1)
        n_init = check_int(self.n_init, "n_init", minimum=1)
        if self.cov_mode not in COV_MODES:
            raise InvalidInputError(f"unknown cov_mode {self.cov_mode!r}")
        if X.shape[0] < K:
            raise InvalidInputError(f"need at least K={K} samples, got {X.shape[0]}")
        rng = np.random.default_rng(self.random_state)
        best = None
        for _ in range(n_init):
            result = _run_em(X, K, self.cov_mode, self.tol, max_iter, rng)
            if best is None or result[1][-1] > best[1][-1]:
                best = result
        self.mixture_, self.history_, self.converged_, self.n_iter_ = best
        self.log_likelihood_ = self.history_[-1]
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def weights_(self):
        return np.asarray(self.mixture_.weights)

    @property
    def means_(self):
        return np.asarray(self.mixture_.means)

    @property
    def covariances_(self):
        return np.asarray(self.mixture_.covariances)

    def score_samples(self, X):
        check_is_fitted(self, "mixture_")
        return self.mixture_.log_density(check_samples(X))

    def score(self, X, y=None):
        """Mean per-sample log-likelihood."""
        return float(np.mean(self.score_samples(X)))

    def predict_proba(self, X):
        check_is_fitted(self, "mixture_")
        return self.mixture_.responsibilities(check_samples(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def grad_log_density(self, X):
        check_is_fitted(self, "mixture_")
        return self.mixture_.score(check_samples(X))

    def sample(self, n_samples=1, random_state=None):
        """Draw samples; returns ``(X, labels)`` like scikit-learn mixtures."""
        check_is_fitted(self, "mixture_")
        n_samples = check_int(n_samples, "n_samples", minimum=1)
        rng = np.random.default_rng(random_state)
        gmm = self.mixture_
        labels = rng.choice(gmm.n_components, size=n_samples, p=gmm.weights)
        z = rng.standard_normal((n_samples, gmm.dim))
        return gmm.means[labels] + np.einsum("nij,nj->ni", gmm.chol[labels], z), labels


def fit_gmm_em(samples, K, cov_mode="full", tol=1e-6, max_iter=500, n_init=5, rng_seed=0):
    """Fit a K-component mixture by EM and return the best :class:`GaussianMixture`."""
    est = GaussianMixtureEM(K, cov_mode=cov_mode, tol=tol, max_iter=max_iter, n_init=n_init, random_state=rng_seed)
    return est.fit(samples).mixture_


# ---------------------------------------------------------------------------
# text format
#
#   gmm v1 d=<d> K=<K> cov_mode=<mode>
#   <weight> <mean_1..mean_d> <cov_11 cov_12 ... cov_dd>     (one line per component)
#
# Reals are written with 17 significant digits so the round trip is exact.


def format_gmm(gmm):
    lines = [f"gmm v1 d={gmm.dim} K={gmm.n_components} cov_mode={gmm.cov_mode}"]
    for w, mu, cov in zip(gmm.weights, gmm.means, gmm.covariances):
        vals = [w, *mu, *cov.ravel()]
        lines.append(" ".join(fmt_real(v) for v in vals))
    return "\n".join(lines) + "\n"


def parse_gmm(text):
    lines = text.splitlines()
    if not lines:
        raise CheckpointParseError("empty file, expected header 'gmm v1'", 1)
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["gmm", "v1"]:
        raise CheckpointParseError(f"expected header 'gmm v1 d=<d> K=<K> cov_mode=<mode>', got {lines[0]!r}", 1)
    fields = {}
    for tok, key in zip(head[2:], ("d", "K", "cov_mode")):
        name, sep, val = tok.partition("=")
        if name != key or not sep:
            raise CheckpointParseError(f"expected token '{key}=...', got {tok!r}", 1)
        fields[key] = val
    try:
        d, K = int(fields["d"]), int(fields["K"])
    except ValueError as exc:
        raise CheckpointParseError(f"bad integer in header: {exc}", 1) from None
    body = lines[1:]
    if len(body) < K or any(ln.strip() for ln in body[K:]):
        raise CheckpointParseError(f"expected exactly {K} component lines", len(lines))
    width = 1 + d + d * d
    rows = []
    for i, ln in enumerate(body[:K], start=2):
        try:
            vals = [float(v) for v in ln.split()]
        except ValueError as exc:
            raise CheckpointParseError(str(exc), i) from None
        if len(vals) != width:
            raise CheckpointParseError(f"expected {width} numbers, got {len(vals)}", i)
        rows.append(vals)
    arr = np.array(rows)
    try:
        return GaussianMixture(arr[:, 0], arr[:, 1 : 1 + d], arr[:, 1 + d :].reshape(K, d, d), fields["cov_mode"])
    except InvalidInputError as exc:
        raise CheckpointParseError(str(exc)) from exc


def save_gmm(path, gmm):
    atomic_write_text(path, format_gmm(gmm))


def load_gmm(path):
    with open(path) as fh:
        return parse_gmm(fh.read())
