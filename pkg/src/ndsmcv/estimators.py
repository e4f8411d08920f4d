"""scikit-learn style wrappers around the training loops.

``NDSMScoreModel`` fits a Gaussian mixture to (a subset of) the data, uses it
as the Langevin reference law and trains a score network with NDSM-CV.
``DSMScoreModel`` is the VP + DSM baseline. Both expose ``sample``.
"""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_samples
from .dynamics import GMLangevin
from .gmm import fit_gmm_em
from .nets import score_forward
from .training import TrainConfig, generate_samples, train_dsm, train_ndsm_cv


class NDSMScoreModel(BaseEstimator):
    """Score model trained with GM Langevin noising and the NDSM-CV loss.

    Parameters
    ----------
    n_components : int
        Mixture components of the reference law.
    cov_mode : str
        Covariance structure passed to EM.
    gmm_subset : int
        At most this many rows are used to fit the mixture.
    eps_mode : {"learned", "fixed"}
    eps_value : float
        Control-variate coefficient when ``eps_mode="fixed"``.
    n_iterations, T, n_f, interior_dt, final_loss_step, lr, cv_update_interval :
        See :class:`TrainConfig`.
    random_state : int
    """

    def __init__(
        self,
        n_components=8,
        cov_mode="full",
        gmm_subset=10000,
        eps_mode="learned",
        eps_value=0.0,
        n_iterations=50000,
        T=2.0,
        n_f=50,
        interior_dt=None,
        final_loss_step=1e-3,
        lr=1e-3,
        cv_update_interval=20,
        random_state=0,
    ):
        self.n_components = n_components
        self.cov_mode = cov_mode
        self.gmm_subset = gmm_subset
        self.eps_mode = eps_mode
        self.eps_value = eps_value
        self.n_iterations = n_iterations
        self.T = T
        self.n_f = n_f
        self.interior_dt = interior_dt
        self.final_loss_step = final_loss_step
        self.lr = lr
        self.cv_update_interval = cv_update_interval
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            method="ndsm_cv",
            eps_mode=self.eps_mode,
            eps_value=self.eps_value,
            n_iterations=self.n_iterations,
            lr_score=self.lr,
            lr_eps=self.lr,
            cv_update_interval=self.cv_update_interval,
            T=self.T,
            n_f=self.n_f,
            interior_dt=self.interior_dt,
            final_loss_step=self.final_loss_step,
            rng_seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_samples(X, "X")
        cfg = self._config().validate()
        subset = check_int(self.gmm_subset, "gmm_subset", minimum=1)
        self.gmm_ = fit_gmm_em(X[:subset], self.n_components, cov_mode=self.cov_mode, rng_seed=self.random_state)
        res = train_ndsm_cv(cfg, X, self.gmm_)
        self.score_params_ = res.score_params
        self.eps_params_ = res.eps_params
        self.log_ = res.log
        self.time_scale_ = res.time_scale
        self.n_features_in_ = X.shape[1]
        return self

    def score_at(self, X, t):
        """Learned score ``s(x, t)`` at each row of ``X``."""
        check_is_fitted(self, "score_params_")
        return score_forward(self.score_params_, X, t, self.time_scale_)

    def sample(self, n_samples=1, n_steps=1000, random_state=None):
        check_is_fitted(self, "score_params_")
        return generate_samples(
            self.score_params_, GMLangevin(self.gmm_), n_samples, n_steps, random_state, T=self.time_scale_
        )


class DSMScoreModel(BaseEstimator):
    """VP SDE + denoising score matching baseline."""

    def __init__(self, n_iterations=50000, batch_size=250, beta0=0.1, beta1=20.0, T=1.0, lr=1e-3, random_state=0):
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.beta0 = beta0
        self.beta1 = beta1
        self.T = T
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_samples(X, "X")
        cfg = TrainConfig(
            method="dsm",
            n_iterations=self.n_iterations,
            dsm_batch_size=self.batch_size,
            lr_score=self.lr,
            vp_beta0=self.beta0,
            vp_beta1=self.beta1,
            vp_T=self.T,
            rng_seed=self.random_state,
        )
        res = train_dsm(cfg, X)
        self.vp_ = cfg.vp()
        self.score_params_ = res.score_params
        self.log_ = res.log
        self.n_features_in_ = X.shape[1]
        return self

    def score_at(self, X, t):
        check_is_fitted(self, "score_params_")
        return score_forward(self.score_params_, X, t, self.vp_.T)

    def sample(self, n_samples=1, n_steps=1000, random_state=None):
        check_is_fitted(self, "score_params_")
        return generate_samples(self.score_params_, self.vp_, n_samples, n_steps, random_state)
