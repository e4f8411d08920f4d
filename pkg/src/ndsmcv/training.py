"""NDSM-CV and DSM training loops, run logs and sample generation."""

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._validation import InvalidInputError, TrainingDivergedError, check_int, check_positive, check_samples
from .dynamics import (
    VP,
    GMLangevin,
    grid_from_step,
    make_time_grid,
    sample_training_points,
    simulate_reverse,
    standard_normal_prior,
)
from .io import write_csv
from .losses import (
    DSM_T_MIN,
    cv_objective_grad,
    dsm_batch_grad,
    gradient_variance_trace,
    ndsm_cv_batch_grad,
    per_sample_ndsm_grads,
)
from .nets import (
    AdamState,
    MlpParams,
    adam_step,
    eps_forward,
    eps_net_sizes,
    init_params,
    save_checkpoint,
    score_forward,
    score_net_sizes,
)

METHODS = ("ndsm_cv", "dsm")
EPS_MODES = ("learned", "fixed")


@dataclass
class TrainConfig:
    """Hyperparameters of both training loops; defaults follow the 2-D experiments."""

    method: str = "ndsm_cv"
    eps_mode: str = "learned"
    eps_value: float = 0.0
    n_iterations: int = 50000
    batch_trajectories: int = 50
    times_per_trajectory: int = 5
    dsm_batch_size: int = 250
    lr_score: float = 1e-3
    lr_eps: float = 1e-3
    cv_update_interval: int = 20
    eps_steps: int = 1
    eps_zero_init: bool = True
    # forward grid; interior_dt, when set, overrides T (T = n_f * interior_dt)
    T: float = 2.0
    n_f: int = 50
    interior_dt: Optional[float] = None
    final_loss_step: float = 1e-3
    # VP baseline
    vp_beta0: float = 0.1
    vp_beta1: float = 20.0
    vp_T: float = 1.0
    # networks
    hidden: int = 32
    depth: int = 7
    activation: str = "gelu"
    eps_hidden: int = 10
    eps_depth: int = 3
    eps_activation: str = "relu"
    # bookkeeping
    rng_seed: int = 0
    log_interval: int = 10
    diag_interval: int = 500
    diag_batch: int = 256
    checkpoint_interval: int = 0
    trajectory_refresh: int = 1

    @property
    def minibatch_size(self):
        if self.method == "dsm":
            return self.dsm_batch_size
        return self.batch_trajectories * self.times_per_trajectory

    def validate(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.eps_mode not in EPS_MODES:
            raise InvalidInputError(f"eps_mode must be one of {EPS_MODES}, got {self.eps_mode!r}")
        check_int(self.n_iterations, "n_iterations", minimum=0)
        check_int(self.batch_trajectories, "batch_trajectories", minimum=1)
        check_int(self.times_per_trajectory, "times_per_trajectory", minimum=1)
        check_int(self.dsm_batch_size, "dsm_batch_size", minimum=1)
        check_int(self.cv_update_interval, "cv_update_interval", minimum=1)
        check_int(self.eps_steps, "eps_steps", minimum=1)
        check_int(self.n_f, "n_f", minimum=1)
        check_int(self.log_interval, "log_interval", minimum=1)
        check_int(self.diag_interval, "diag_interval", minimum=0)
        check_int(self.diag_batch, "diag_batch", minimum=2)
        check_int(self.checkpoint_interval, "checkpoint_interval", minimum=0)
        check_int(self.trajectory_refresh, "trajectory_refresh", minimum=1)
        for name in ("lr_score", "lr_eps", "T", "final_loss_step", "vp_beta0", "vp_beta1", "vp_T"):
            check_positive(getattr(self, name), name)
        if self.interior_dt is not None:
            check_positive(self.interior_dt, "interior_dt")
        if self.times_per_trajectory > self.n_f:
            raise InvalidInputError("times_per_trajectory cannot exceed n_f")
        return self

    def grid(self):
        if self.interior_dt is not None:
            return grid_from_step(self.interior_dt, self.n_f, self.final_loss_step)
        return make_time_grid(self.T, self.n_f, self.final_loss_step)

    def vp(self):
        return VP(self.vp_beta0, self.vp_beta1, self.vp_T)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LogRow:
    iter: int
    loss: float
    eps_mean: float
    grad_var_trace: Optional[float] = None


@dataclass
class TrainResult:
    score_params: MlpParams
    eps_params: Optional[MlpParams]
    log: List[LogRow] = field(default_factory=list)
    time_scale: float = 1.0


def write_log_csv(path, log):
    write_csv(path, ["iter", "loss", "eps_mean", "grad_var_trace"], [(r.iter, r.loss, r.eps_mean, r.grad_var_trace) for r in log])


def eps_label(cfg):
    return "learned" if cfg.eps_mode == "learned" else f"fixed:{cfg.eps_value!r}"


def write_variance_csv(path, log, cfg):
    """Gradient-variance diagnostics: one row per log entry that carries a trace."""
    label = eps_label(cfg)
    rows = [(r.iter, label, r.grad_var_trace, r.loss) for r in log if r.grad_var_trace is not None]
    write_csv(path, ["step", "eps_mode", "trace_grad_var", "mean_loss"], rows)


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    init_s, init_e, data, sim, diag = ss.spawn(5)
    return (
        int(init_s.generate_state(1)[0]),
        int(init_e.generate_state(1)[0]),
        np.random.default_rng(data),
        np.random.default_rng(sim),
        np.random.default_rng(diag),
    )


def _checkpoint(out_dir, score_params, eps_params):
    if out_dir is None:
        return
    save_checkpoint(os.path.join(out_dir, "score.ckpt"), score_params)
    if eps_params is not None:
        save_checkpoint(os.path.join(out_dir, "eps.ckpt"), eps_params)


def init_eps_params(cfg, seed):
    params = init_params(eps_net_sizes(cfg.eps_hidden, cfg.eps_depth), cfg.eps_activation, seed)
    if cfg.eps_zero_init:
        flat = params.flat.copy()
        n_last = params.layer_sizes[-2] * params.layer_sizes[-1] + params.layer_sizes[-1]
        flat[-n_last:] = 0.0
        params = params.with_flat(flat)
    return params


class _RecordSource:
    """Fresh records every iteration, or a pool refreshed every ``refresh`` iterations."""

    def __init__(self, drift, data, grid, cfg, data_rng, sim_rng):
        self.drift, self.data, self.grid, self.cfg = drift, data, grid, cfg
        self.data_rng, self.sim_rng = data_rng, sim_rng
        self.pool = None
        self.order = None
        self.pos = 0

    def _fresh(self, n_traj):
        rows = self.data_rng.integers(self.data.shape[0], size=n_traj)
        return sample_training_points(self.drift, self.data[rows], self.grid, self.cfg.times_per_trajectory, self.sim_rng)

    def next(self, it):
        cfg = self.cfg
        if cfg.trajectory_refresh == 1:
            return self._fresh(cfg.batch_trajectories)
        if (it - 1) % cfg.trajectory_refresh == 0:
            self.pool = self._fresh(cfg.batch_trajectories * cfg.trajectory_refresh)
            self.order = self.sim_rng.permutation(len(self.pool))
            self.pos = 0
        m = cfg.minibatch_size
        pick = self.order[self.pos : self.pos + m]
        self.pos += m
        return self.pool[np.sort(pick)]


def train_ndsm_cv(cfg, data, gmm=None, drift=None, out_dir=None):
    """NDSM-CV training loop.

    Each iteration draws ``B`` data rows with replacement, simulates the forward
    dynamics (GM Langevin for ``gmm``, or any ``drift``), cuts ``k`` records per
    trajectory and takes one Adam step on the score network. With
    ``eps_mode="learned"`` the eps network gets ``eps_steps`` Adam steps on
    the gradient-MSE objective every ``cv_update_interval`` iterations.
    """
    cfg.validate()
    data = check_samples(data, "data")
    if drift is None:
        if gmm is None:
            raise InvalidInputError("train_ndsm_cv needs a gmm or a drift")
        if gmm.dim != data.shape[1]:
            raise InvalidInputError(f"gmm dimension {gmm.dim} does not match data dimension {data.shape[1]}")
        drift = GMLangevin(gmm)
    d = data.shape[1]
    grid = cfg.grid()
    T = grid.T
    seed_s, seed_e, data_rng, sim_rng, diag_rng = _streams(cfg.rng_seed)
    score = init_params(score_net_sizes(d, cfg.hidden, cfg.depth), cfg.activation, seed_s)
    learned = cfg.eps_mode == "learned"
    eps_params = init_eps_params(cfg, seed_e) if learned else None
    eps_of = eps_params if learned else cfg.eps_value
    opt_s = AdamState.for_params(score, cfg.lr_score)
    opt_e = AdamState.for_params(eps_params, cfg.lr_eps) if learned else None

    diag_batch = None
    if cfg.diag_interval:
        n_traj = math.ceil(cfg.diag_batch / cfg.times_per_trajectory)
        rows = diag_rng.integers(data.shape[0], size=n_traj)
        diag_batch = sample_training_points(drift, data[rows], grid, cfg.times_per_trajectory, diag_rng)[: cfg.diag_batch]

    source = _RecordSource(drift, data, grid, cfg, data_rng, sim_rng)
    log = []
    acc_loss = acc_eps = 0.0
    acc_n = 0
    for it in range(1, cfg.n_iterations + 1):
        batch = source.next(it)
        try:
            est = ndsm_cv_batch_grad(score, eps_of, batch, T)
        except TrainingDivergedError as exc:
            _checkpoint(out_dir, score, eps_params)
            raise TrainingDivergedError(f"iteration {it}: {exc}", it, score) from exc
        if not math.isfinite(est.loss):
            _checkpoint(out_dir, score, eps_params)
            raise TrainingDivergedError(f"iteration {it}: non-finite loss", it, score)
        eps_now = float(np.mean(eps_forward(eps_params, batch.t_N, T))) if learned else float(cfg.eps_value)
        prev = score
        opt_s, score = adam_step(opt_s, score, est.grad)
        if not np.all(np.isfinite(score.flat)):
            _checkpoint(out_dir, prev, eps_params)
            raise TrainingDivergedError(f"iteration {it}: non-finite parameters", it, prev)
        if learned and it % cfg.cv_update_interval == 0:
            grads = per_sample_ndsm_grads(score, batch, T)
            for _ in range(cfg.eps_steps):
                opt_e, eps_params = adam_step(opt_e, eps_params, cv_objective_grad(score, eps_params, batch, T, grads))
            eps_of = eps_params
        acc_loss += est.loss
        acc_eps += eps_now
        acc_n += 1
        diag_now = cfg.diag_interval and it % cfg.diag_interval == 0
        if it % cfg.log_interval == 0 or it == cfg.n_iterations or diag_now:
            gv = None
            if diag_now:
                g, h = per_sample_ndsm_grads(score, diag_batch, T)
                e = eps_forward(eps_params, diag_batch.t_N, T) if learned else np.full(len(diag_batch), cfg.eps_value)
                gv = gradient_variance_trace(g + e[:, None] * h)
            log.append(LogRow(it, acc_loss / acc_n, acc_eps / acc_n, gv))
            acc_loss = acc_eps = 0.0
            acc_n = 0
        if out_dir is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, score, eps_params)
    _checkpoint(out_dir, score, eps_params)
    return TrainResult(score, eps_params, log, T)


def train_dsm(cfg, data, out_dir=None):
    """DSM baseline on the VP SDE: per iteration draw ``(y0, t, z)`` triples and step Adam."""
    cfg.validate()
    data = check_samples(data, "data")
    vp = cfg.vp()
    d = data.shape[1]
    seed_s, _, data_rng, sim_rng, _ = _streams(cfg.rng_seed)
    score = init_params(score_net_sizes(d, cfg.hidden, cfg.depth), cfg.activation, seed_s)
    opt = AdamState.for_params(score, cfg.lr_score)
    m = cfg.dsm_batch_size
    log = []
    acc = 0.0
    acc_n = 0
    for it in range(1, cfg.n_iterations + 1):
        y0 = data[data_rng.integers(data.shape[0], size=m)]
        # uniform on (t_min, T]
        t = vp.T - (vp.T - DSM_T_MIN) * sim_rng.random(m)
        z = sim_rng.standard_normal((m, d))
        try:
            est = dsm_batch_grad(score, y0, t, z, vp)
        except TrainingDivergedError as exc:
            _checkpoint(out_dir, score, None)
            raise TrainingDivergedError(f"iteration {it}: {exc}", it, score) from exc
        if not math.isfinite(est.loss):
            _checkpoint(out_dir, score, None)
            raise TrainingDivergedError(f"iteration {it}: non-finite loss", it, score)
        prev = score
        opt, score = adam_step(opt, score, est.grad)
        if not np.all(np.isfinite(score.flat)):
            _checkpoint(out_dir, prev, None)
            raise TrainingDivergedError(f"iteration {it}: non-finite parameters", it, prev)
        acc += est.loss
        acc_n += 1
        if it % cfg.log_interval == 0 or it == cfg.n_iterations:
            log.append(LogRow(it, acc / acc_n, 0.0, None))
            acc = 0.0
            acc_n = 0
        if out_dir is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, score, None)
    _checkpoint(out_dir, score, None)
    return TrainResult(score, None, log, vp.T)


def generate_samples(score_params, drift, n, n_steps=1000, rng=None, T=None, prior=None, on_diverge="freeze", return_diverged=False):
    """Run the reverse SDE from the drift's reference law with the learned score.

    ``T`` is the forward horizon the score was trained on (default: the VP
    horizon for :class:`VP`). The reverse grid is uniform with ``n_steps`` steps.
    By default runaway samples are frozen where they crossed the divergence
    bound rather than aborting the batch (pass ``on_diverge="raise"`` to abort);
    ``return_diverged`` also returns their mask.
    """
    if T is None:
        if drift.horizon is None:
            raise InvalidInputError("T is required for time-homogeneous drifts")
        T = drift.horizon
    if prior is None:
        prior = standard_normal_prior(score_params.n_out) if isinstance(drift, VP) else drift.prior_sample
    grid = make_time_grid(T, n_steps)

    def score_fn(X, s):
        return score_forward(score_params, X, s, T)

    out = simulate_reverse(drift, score_fn, prior, grid, n, rng, on_diverge=on_diverge)
    if on_diverge == "raise":
        out = (out, np.zeros(out.shape[0], dtype=bool))
    return out if return_diverged else out[0]
