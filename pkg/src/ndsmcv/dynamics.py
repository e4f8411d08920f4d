"""Forward drifts, time grids, Euler-Maruyama transitions and the two simulators.

Time convention: the forward (noising) process is simulated in forward time
``s`` from 0 to T, and a drift object exposes the forward drift ``b(y, s)`` and
diffusion ``g(s)`` directly, so ``dY = b(Y, s) ds + g(s) dW``. One
Euler-Maruyama step from ``(y, s)`` of size ``dt`` is Gaussian with mean
``y + b(y, s) dt`` and standard deviation ``g(s) sqrt(dt)``.

The reverse (denoising) process runs on its own clock ``t``; a reverse step at
``t`` evaluates everything at the forward time ``T - t``:

    x <- x + (-b(x, T - t) + g(T - t)^2 s(x, T - t)) dt + g(T - t) sqrt(dt) Z

For GM Langevin dynamics ``b = grad log eta = -grad V`` and ``g = sqrt 2``, which
gives ``x + (grad V(x) + 2 s(x, T - t)) dt + sqrt(2 dt) Z``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from ._validation import InvalidInputError, SimulationDivergedError, check_int, check_positive
from .gmm import GaussianMixture
from .io import write_csv

# states beyond this magnitude count as diverged
DIVERGENCE_BOUND = 1e8


class DriftSpec:
    """Base class for forward dynamics ``dY = b(Y, s) ds + g(s) dW``."""

    #: largest admissible forward time, or None for time-homogeneous dynamics
    horizon = None

    def drift(self, Y, s):
        raise NotImplementedError

    def diffusion(self, s):
        raise NotImplementedError

    def prior_sample(self, n, rng):
        raise InvalidInputError(f"{type(self).__name__} has no built-in reference distribution")


@dataclass(frozen=True, eq=False)
class GMLangevin(DriftSpec):
    """Overdamped Langevin dynamics with the mixture as invariant law."""

    gmm: GaussianMixture

    def drift(self, Y, s):
        return self.gmm.score(Y).reshape(np.shape(Y))

    def diffusion(self, s):
        return np.full(np.shape(s), np.sqrt(2.0)) if np.ndim(s) else np.sqrt(2.0)

    def prior_sample(self, n, rng):
        return self.gmm.sample(n, rng)


@dataclass(frozen=True)
class VP(DriftSpec):
    """Variance-preserving SDE with ``beta`` linear from ``beta0`` at 0 to ``beta1`` at ``T``."""

    beta0: float = 0.1
    beta1: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if not (self.beta0 > 0 and self.beta1 >= self.beta0 and self.T > 0):
            raise InvalidInputError(f"VP needs 0 < beta0 <= beta1 and T > 0, got {self}")

    @property
    def horizon(self):
        return self.T

    def beta(self, s):
        return self.beta0 + (self.beta1 - self.beta0) * np.asarray(s, dtype=np.float64) / self.T

    def drift(self, Y, s):
        return -0.5 * _col(self.beta(s)) * Y

    def diffusion(self, s):
        return np.sqrt(self.beta(s))

    def prior_sample(self, n, rng):
        raise InvalidInputError("VP prior needs the data dimension; use standard_normal_prior(d)")


@dataclass(frozen=True, eq=False)
class ZeroDrift(DriftSpec):
    """Pure diffusion ``dY = g(s) dW``; ``sigma`` is a constant or a function of time."""

    sigma: Union[float, Callable] = 1.0

    def drift(self, Y, s):
        return np.zeros_like(Y)

    def diffusion(self, s):
        if callable(self.sigma):
            return np.asarray(self.sigma(s), dtype=np.float64)
        return np.full(np.shape(s), float(self.sigma)) if np.ndim(s) else float(self.sigma)


def standard_normal_prior(d):
    def sample(n, rng):
        return np.random.default_rng(rng).standard_normal((n, d))

    return sample


def _col(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim else a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Increasing forward times ``0 = t_0 < ... < t_nf = T`` plus the loss-bearing step size."""

    times: np.ndarray
    final_loss_step: Optional[float] = None

    def __post_init__(self):
        t = np.array(self.times, dtype=np.float64, copy=True)
        if t.ndim != 1 or t.size < 1 or t[0] != 0.0:
            raise InvalidInputError("grid times must be a vector starting at 0")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        fls = self.final_loss_step
        if fls is None:
            fls = float(t[1] - t[0]) if t.size > 1 else None
        elif not (fls > 0):
            raise InvalidInputError(f"final_loss_step must be > 0, got {fls}")
        object.__setattr__(self, "final_loss_step", None if fls is None else float(fls))

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def steps(self):
        return np.diff(self.times)


def make_time_grid(T, n_f, final_loss_step=None):
    """Uniform grid ``t_n = n T / n_f`` carrying ``final_loss_step`` alongside."""
    T = check_positive(T, "T")
    n_f = check_int(n_f, "n_f", minimum=1)
    if final_loss_step is not None:
        check_positive(final_loss_step, "final_loss_step")
    times = T * np.arange(n_f + 1) / n_f
    times[-1] = T
    return TimeGrid(times, final_loss_step)


def grid_from_step(interior_dt, n_f, final_loss_step=None):
    """Uniform grid with ``n_f`` steps of ``interior_dt`` (so ``T = n_f * interior_dt``)."""
    interior_dt = check_positive(interior_dt, "interior_dt")
    n_f = check_int(n_f, "n_f", minimum=1)
    return make_time_grid(n_f * interior_dt, n_f, final_loss_step)


# ---------------------------------------------------------------------------


def transition_moments(drift, y, t, dt):
    """Euler-Maruyama moments ``(y + b(y, t) dt, g(t) sqrt(dt))``.

    ``y`` may be a point or a batch of rows; ``t`` a scalar or one time per row.
    """
    dt_arr = np.asarray(dt, dtype=np.float64)
    if np.any(dt_arr <= 0):
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    if drift.horizon is not None and np.any(np.asarray(t) + dt_arr > drift.horizon + 1e-12):
        raise InvalidInputError(f"t + dt exceeds the drift horizon T={drift.horizon}")
    Y = np.asarray(y, dtype=np.float64)
    mu = Y + drift.drift(Y, t) * _col(dt_arr)
    sigma = drift.diffusion(t) * np.sqrt(dt_arr)
    return mu, sigma


def _check_finite(X, step):
    if not np.all(np.isfinite(X)) or np.abs(X).max(initial=0.0) > DIVERGENCE_BOUND:
        raise SimulationDivergedError(f"simulation diverged at step {step}", step=step)


def simulate_forward(drift, y0, grid, rng=None, return_noise=False):
    """Euler-Maruyama forward noising of every row of ``y0`` along ``grid``.

    Returns the ``(n_f + 1, B, d)`` array of states (index 0 is ``y0``); with
    ``return_noise`` also the ``(n_f, B, d)`` standard-normal draws.
    """
    rng = np.random.default_rng(rng)
    Y = np.array(y0, dtype=np.float64, ndmin=2)
    n_f = grid.n_steps
    states = np.empty((n_f + 1,) + Y.shape)
    noise = np.empty((n_f,) + Y.shape)
    states[0] = Y
    for n in range(n_f):
        dt = grid.times[n + 1] - grid.times[n]
        mu, sigma = transition_moments(drift, states[n], grid.times[n], dt)
        noise[n] = rng.standard_normal(Y.shape)
        states[n + 1] = mu + sigma * noise[n]
        _check_finite(states[n + 1], n + 1)
    return (states, noise) if return_noise else states


@dataclass(frozen=True)
class TrajectoryRecord:
    """One NDSM training point; ``y_N == mu_prev + sigma_prev * z_N``."""

    y_N: np.ndarray
    z_N: np.ndarray
    mu_prev: np.ndarray
    sigma_prev: float
    t_N: float


@dataclass(eq=False)
class TrajectoryBatch:
    """Structure-of-arrays form of a list of :class:`TrajectoryRecord`.

    Rows are ordered trajectory-major. ``step`` and ``traj`` record where each
    row came from.
    """

    y_N: np.ndarray
    z_N: np.ndarray
    mu_prev: np.ndarray
    sigma_prev: np.ndarray
    t_N: np.ndarray
    step: np.ndarray = field(default=None)
    traj: np.ndarray = field(default=None)

    def __post_init__(self):
        self.y_N = np.atleast_2d(np.asarray(self.y_N, dtype=np.float64))
        n, d = self.y_N.shape
        self.z_N = np.asarray(self.z_N, dtype=np.float64).reshape(n, d)
        self.mu_prev = np.asarray(self.mu_prev, dtype=np.float64).reshape(n, d)
        self.sigma_prev = np.broadcast_to(np.asarray(self.sigma_prev, dtype=np.float64), (n,)).copy()
        self.t_N = np.broadcast_to(np.asarray(self.t_N, dtype=np.float64), (n,)).copy()
        if np.any(self.sigma_prev <= 0):
            raise InvalidInputError("sigma_prev must be > 0")

    @classmethod
    def from_records(cls, records):
        if isinstance(records, TrajectoryBatch):
            return records
        if isinstance(records, TrajectoryRecord):
            records = [records]
        records = list(records)
        if not records:
            raise InvalidInputError("empty record list")
        return cls(
            np.array([r.y_N for r in records]),
            np.array([r.z_N for r in records]),
            np.array([r.mu_prev for r in records]),
            np.array([r.sigma_prev for r in records]),
            np.array([r.t_N for r in records]),
        )

    def __len__(self):
        return self.y_N.shape[0]

    @property
    def dim(self):
        return self.y_N.shape[1]

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            pick = lambda a: None if a is None else a[i]  # noqa: E731
            return TrajectoryBatch(
                self.y_N[i], self.z_N[i], self.mu_prev[i], self.sigma_prev[i], self.t_N[i], pick(self.step), pick(self.traj)
            )
        return TrajectoryRecord(self.y_N[i], self.z_N[i], self.mu_prev[i], float(self.sigma_prev[i]), float(self.t_N[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def records(self):
        return list(self)


def sample_training_points(drift, data_batch, grid, k, rng=None, return_path=False):
    """Simulate one trajectory per data row and cut ``k`` NDSM records from each.

    For every trajectory, ``k`` distinct step indices ``N`` are drawn uniformly
    from ``1..n_f``. A record takes the interior state at ``N - 1`` and applies a
    single Euler-Maruyama step of size ``grid.final_loss_step`` with fresh noise,
    so ``t_N = t_{N-1} + final_loss_step``.
    """
    rng = np.random.default_rng(rng)
    Y0 = np.array(data_batch, dtype=np.float64, ndmin=2)
    B, d = Y0.shape
    n_f = grid.n_steps
    k = check_int(k, "k", minimum=1)
    if k > n_f:
        raise InvalidInputError(f"k={k} exceeds the number of grid steps {n_f}")
    dt_loss = grid.final_loss_step
    # k distinct indices per row: the k smallest of n_f uniform keys
    keys = rng.random((B, n_f))
    steps = np.argsort(keys, axis=1, kind="stable")[:, :k] + 1
    last = int(steps.max())
    states = simulate_forward(drift, Y0, TimeGrid(grid.times[:last], dt_loss), rng)
    prev = states[steps - 1, np.arange(B)[:, None]]  # (B, k, d)
    t_prev = grid.times[steps - 1]
    mu, sigma = transition_moments(drift, prev.reshape(B * k, d), t_prev.ravel(), dt_loss)
    z = rng.standard_normal((B * k, d))
    y = mu + _col(sigma) * z
    _check_finite(y, last)
    batch = TrajectoryBatch(
        y, z, mu, sigma, t_prev.ravel() + dt_loss, step=steps.ravel(), traj=np.repeat(np.arange(B), k)
    )
    return (batch, states) if return_path else batch


def simulate_reverse(drift, score_fn, prior_sampler, grid, B, rng=None, T=None, on_diverge="raise"):
    """Euler-Maruyama denoising from ``B`` prior draws along the reverse clock ``grid``.

    ``score_fn(X, s)`` maps a ``(B, d)`` batch and a forward time ``s`` to scores.
    ``prior_sampler(n, rng)`` returns ``(n, d)`` initial states. ``T`` defaults to
    ``grid.T``.

    With ``on_diverge="raise"`` any runaway row aborts the run. With
    ``"freeze"`` such rows keep their last state and stop moving; the function
    then returns ``(X, diverged_mask)``.
    """
    if on_diverge not in ("raise", "freeze"):
        raise InvalidInputError(f"on_diverge must be 'raise' or 'freeze', got {on_diverge!r}")
    rng = np.random.default_rng(rng)
    B = check_int(B, "B", minimum=1)
    T = grid.T if T is None else float(T)
    X = np.array(prior_sampler(B, rng), dtype=np.float64, ndmin=2)
    diverged = np.zeros(X.shape[0], dtype=bool)
    for n in range(grid.n_steps):
        dt = grid.times[n + 1] - grid.times[n]
        s = T - grid.times[n]
        g = drift.diffusion(s)
        noise = rng.standard_normal(X.shape)
        if on_diverge == "raise":
            rev = -drift.drift(X, s) + g * g * score_fn(X, s)
            X = X + rev * dt + g * np.sqrt(dt) * noise
            _check_finite(X, n + 1)
            continue
        live = ~diverged
        Xl = X[live]
        with np.errstate(over="ignore", invalid="ignore"):
            rev = -drift.drift(Xl, s) + g * g * score_fn(Xl, s)
            new = Xl + rev * dt + g * np.sqrt(dt) * noise[live]
        bad = ~np.all(np.isfinite(new), axis=1) | (np.abs(np.nan_to_num(new, nan=np.inf)).max(axis=1) > DIVERGENCE_BOUND)
        new[bad] = Xl[bad]
        X[live] = new
        diverged[np.flatnonzero(live)[bad]] = True
    return X if on_diverge == "raise" else (X, diverged)


def vp_transition_closed_form(beta0, beta1, T, y0, t):
    """Exact VP transition ``N(y0 exp(-a/2), (1 - exp(-a)) I)`` with ``a = int_0^t beta``."""
    if not (0.0 <= t <= T):
        raise InvalidInputError(f"t must lie in [0, T={T}], got {t}")
    a = beta0 * t + (beta1 - beta0) * t * t / (2.0 * T)
    mean = np.asarray(y0, dtype=np.float64) * np.exp(-0.5 * a)
    return mean, float(np.sqrt(-np.expm1(-a)))


def write_trajectory_csv(path, states, times):
    """Dump ``(n_steps + 1, B, d)`` states as ``traj,step,t,coord0,...``."""
    states = np.asarray(states)
    n1, B, d = states.shape
    rows = [(b, n, float(times[n]), *map(float, states[n, b])) for b in range(B) for n in range(n1)]
    write_csv(path, ["traj", "step", "t", *(f"coord{j}" for j in range(d))], rows)


def write_records_csv(path, batch):
    """Dump NDSM records in the trajectory CSV layout (``step`` is N, coords are ``y_N``)."""
    traj = batch.traj if batch.traj is not None else np.arange(len(batch))
    step = batch.step if batch.step is not None else np.zeros(len(batch), dtype=int)
    rows = [(int(traj[i]), int(step[i]), float(batch.t_N[i]), *map(float, batch.y_N[i])) for i in range(len(batch))]
    write_csv(path, ["traj", "step", "t", *(f"coord{j}" for j in range(batch.dim))], rows)
