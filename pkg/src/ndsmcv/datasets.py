"""2-D multi-modal "squares" datasets and mode-coverage metrics.

Dataset spec file format (one mode per line, ``#`` starts a comment)::

    cx cy hx hy w

``(cx, cy)`` is the centre, ``(hx, hy)`` the half-widths of an axis-aligned
rectangle, ``w`` the mode weight. Weights must sum to 1.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import CheckpointParseError, InvalidInputError, as_points, check_int
from .io import atomic_write_text, fmt_real, write_csv


@dataclass(frozen=True, eq=False)
class SquaresSpec:
    centers: np.ndarray
    half_widths: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64, ndmin=2)
        h = np.array(self.half_widths, dtype=np.float64, ndmin=2)
        w = np.array(self.weights, dtype=np.float64, ndmin=1)
        m = w.size
        if c.shape != (m, 2) or h.shape != (m, 2):
            raise InvalidInputError("centers and half_widths must have shape (n_modes, 2)")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError("mode weights must be positive and sum to 1")
        if np.any(h <= 0):
            raise InvalidInputError("half-widths must be positive")
        for a in (c, h, w):
            a.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "half_widths", h)
        object.__setattr__(self, "weights", w)
        _check_disjoint(c, h, 0.0)

    @classmethod
    def from_modes(cls, modes):
        """Build from ``[(center, half_width, weight), ...]``."""
        modes = list(modes)
        return cls([m[0] for m in modes], [m[1] for m in modes], [m[2] for m in modes])

    @property
    def n_modes(self):
        return self.weights.size

    @property
    def default_tau(self):
        return 0.1 * float(self.half_widths.min())


def _check_disjoint(c, h, tau):
    lo, hi = c - h - tau, c + h + tau
    m = c.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            if np.all(lo[i] <= hi[j]) and np.all(lo[j] <= hi[i]):
                raise InvalidInputError(f"supports of modes {i} and {j} overlap (margin {tau})")


def squares_asymmetric(thin=False, radius=4.0, n_modes=8):
    """Default 8-squares geometry: centres on a circle, weights proportional to 1..8.

    ``thin`` shrinks the vertical half-width from 0.5 to 0.05.
    """
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    half = np.tile([0.5, 0.05 if thin else 0.5], (n_modes, 1))
    w = np.arange(1, n_modes + 1, dtype=np.float64)
    return SquaresSpec(centers, half, w / w.sum())


def format_squares_spec(spec):
    lines = ["# cx cy hx hy w"]
    for c, h, w in zip(spec.centers, spec.half_widths, spec.weights):
        lines.append(" ".join(fmt_real(v) for v in (*c, *h, w)))
    return "\n".join(lines) + "\n"


def parse_squares_spec(text):
    modes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CheckpointParseError(f"expected 'cx cy hx hy w', got {raw!r}", lineno)
        try:
            cx, cy, hx, hy, w = map(float, parts)
        except ValueError as exc:
            raise CheckpointParseError(str(exc), lineno) from None
        modes.append(((cx, cy), (hx, hy), w))
    if not modes:
        raise CheckpointParseError("no modes in spec file")
    try:
        return SquaresSpec.from_modes(modes)
    except InvalidInputError as exc:
        raise CheckpointParseError(str(exc)) from exc


def save_squares_spec(path, spec):
    atomic_write_text(path, format_squares_spec(spec))


def load_squares_spec(path):
    with open(path) as fh:
        return parse_squares_spec(fh.read())


def make_squares_dataset(spec, n, rng=None):
    """Pick a mode by weight, then draw uniformly on its rectangle."""
    n = check_int(n, "n", minimum=1)
    rng = np.random.default_rng(rng)
    modes = rng.choice(spec.n_modes, size=n, p=spec.weights)
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    return spec.centers[modes] + u * spec.half_widths[modes]


# ---------------------------------------------------------------------------
# evaluation

OUTSIDE = -1


def assign_modes(samples, spec, tau=None):
    """Mode index of each sample, or ``OUTSIDE`` (-1).

    A sample belongs to mode ``i`` when it lies in that rectangle dilated by
    ``tau`` (default ``0.1 * min half-width``). Dilated supports must be disjoint.
    """
    X, _ = as_points(samples, 2, "samples")
    tau = spec.default_tau if tau is None else float(tau)
    _check_disjoint(spec.centers, spec.half_widths, tau)
    inside = np.all(np.abs(X[:, None, :] - spec.centers[None]) <= spec.half_widths[None] + tau, axis=2)
    labels = np.full(X.shape[0], OUTSIDE, dtype=np.int64)
    hit = inside.any(axis=1)
    labels[hit] = inside[hit].argmax(axis=1)
    return labels


def nearest_center(samples, spec):
    X, _ = as_points(samples, 2, "samples")
    return np.square(X[:, None, :] - spec.centers[None]).sum(axis=2).argmin(axis=1)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Mode coverage of a sample set.

    ``counts`` only include samples inside a (dilated) support; ``fractions``
    also attribute outside samples to the nearest centre so they sum to 1.
    ``std_fractions`` is the population std of ``fractions``;
    ``std_fraction_error`` the population std of ``fractions - weights``.
    """

    counts: np.ndarray
    attributed_counts: np.ndarray
    fractions: np.ndarray
    std_fractions: float
    std_fraction_error: float
    support_fraction: float
    n_outside: int
    n_total: int

    def rows(self):
        rows = [
            ("n_total", self.n_total),
            ("n_outside", self.n_outside),
            ("support_fraction", float(self.support_fraction)),
            ("std_fractions", float(self.std_fractions)),
            ("std_fraction_error", float(self.std_fraction_error)),
        ]
        for i, (c, f) in enumerate(zip(self.counts, self.fractions)):
            rows.append((f"count_{i}", int(c)))
            rows.append((f"fraction_{i}", float(f)))
        return rows


def eval_samples(samples, spec, tau=None):
    X, _ = as_points(samples, 2, "samples")
    n = X.shape[0]
    if n == 0:
        raise InvalidInputError("no samples to evaluate")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("samples must be finite")
    labels = assign_modes(X, spec, tau)
    m = spec.n_modes
    counts = np.bincount(labels[labels != OUTSIDE], minlength=m)
    attributed = labels.copy()
    out = labels == OUTSIDE
    if out.any():
        attributed[out] = nearest_center(X[out], spec)
    att_counts = np.bincount(attributed, minlength=m)
    fractions = att_counts / n
    n_out = int(out.sum())
    return EvalReport(
        counts=counts,
        attributed_counts=att_counts,
        fractions=fractions,
        std_fractions=float(np.std(fractions)),
        std_fraction_error=float(np.std(fractions - spec.weights)),
        support_fraction=1.0 - n_out / n,
        n_outside=n_out,
        n_total=n,
    )


def write_report_csv(path, report):
    write_csv(path, ["metric", "value"], report.rows())


def read_samples_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def write_samples_csv(path, X):
    X = np.asarray(X)
    write_csv(path, [f"x{j}" for j in range(X.shape[1])], [tuple(map(float, r)) for r in X])
