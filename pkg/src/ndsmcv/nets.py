"""Small fully-connected networks with hand-written backprop, plus Adam.

Two networks are used:

* the score model ``s(y, t)``, an MLP on the input ``(y, t / T)`` with output
  dimension ``d``;
* the control-variate coefficient ``eps(t)``, an MLP on ``t / T`` with a
  scalar output.

Parameters live in one flat float64 vector. Layer ``l`` occupies a block
holding its weight matrix (``n_in x n_out``, row-major) followed by its bias,
so ``z = a @ W + b``. Hidden layers apply the activation, the last layer is
linear.

GELU is the exact form ``gelu(x) = x * Phi(x)`` with ``Phi`` the standard normal
CDF, ``Phi(x) = (1 + erf(x / sqrt 2)) / 2``. Its derivative, used in backprop,
is ``Phi(x) + x * phi(x)`` with ``phi`` the standard normal density.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from ._validation import CheckpointParseError, InvalidInputError, TrainingDivergedError, check_positive
from .io import atomic_write_text, fmt_real

ACTIVATIONS = ("gelu", "relu")

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(z):
    cdf = ndtr(z)
    return z * cdf, cdf


def _gelu_grad(z, cdf):
    return cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _relu(z):
    return np.maximum(z, 0.0), None


def _relu_grad(z, _aux):
    return (z > 0).astype(np.float64)


_ACT = {"gelu": (_gelu, _gelu_grad), "relu": (_relu, _relu_grad)}


@dataclass(eq=False)
class MlpParams:
    layer_sizes: tuple
    activation: str
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise InvalidInputError(f"need at least two positive layer sizes, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        flat = np.array(self.flat, dtype=np.float64, copy=True).ravel()
        if flat.size != n_params(self.layer_sizes):
            raise InvalidInputError(f"expected {n_params(self.layer_sizes)} parameters, got {flat.size}")
        if not np.all(np.isfinite(flat)):
            raise InvalidInputError("parameters must be finite")
        flat.setflags(write=False)
        self.flat = flat

    @property
    def n_params(self):
        return self.flat.size

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @cached_property
    def _slices(self):
        out = []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + n_in * n_out)
            pos = w.stop
            b = slice(pos, pos + n_out)
            pos = b.stop
            out.append((w, b, n_in, n_out))
        return out

    def layers(self):
        """List of ``(W, b)`` read-only views into the flat vector."""
        return [(self.flat[w].reshape(n_in, n_out), self.flat[b]) for w, b, n_in, n_out in self._slices]

    def with_flat(self, flat):
        return MlpParams(self.layer_sizes, self.activation, flat)


def n_params(layer_sizes):
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_params(layer_sizes, activation="gelu", rng_seed=0):
    """He initialisation: ``W ~ N(0, 2 / fan_in)``, zero biases."""
    layer_sizes = tuple(layer_sizes)
    if len(layer_sizes) < 2:
        raise InvalidInputError("layer_sizes needs an input and an output size")
    rng = np.random.default_rng(rng_seed)
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return MlpParams(layer_sizes, activation, np.concatenate(chunks))


def score_net_sizes(d, hidden=32, depth=7):
    return (d + 1, *([hidden] * depth), d)


def eps_net_sizes(hidden=10, depth=3):
    return (1, *([hidden] * depth), 1)


# ---------------------------------------------------------------------------
# generic MLP forward / backward


def mlp_forward(params, X):
    """Evaluate the MLP on rows of ``X``; returns ``(output, cache)`` for backprop."""
    act, _ = _ACT[params.activation]
    layers = params.layers()
    a = X
    inputs, pre, aux = [], [], []
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        inputs.append(a)
        pre.append(z)
        if i < len(layers) - 1:
            a, extra = act(z)
            aux.append(extra)
        else:
            a = z
    return a, (inputs, pre, aux)


def mlp_backward(params, cache, upstream, per_sample=False):
    """Vector-Jacobian product with respect to the parameters.

    ``upstream`` has one row per input row. Returns the gradient of
    ``sum_n upstream[n] . out[n]`` as a flat vector, or with ``per_sample`` the
    ``(n, P)`` matrix of per-row gradients.
    """
    _, act_grad = _ACT[params.activation]
    inputs, pre, aux = cache
    layers = params.layers()
    n = upstream.shape[0]
    grad = np.empty((n, params.n_params)) if per_sample else np.empty(params.n_params)
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, n_in, n_out = params._slices[i]
        a = inputs[i]
        if per_sample:
            grad[:, w_sl] = np.einsum("ni,nj->nij", a, delta).reshape(n, -1)
            grad[:, b_sl] = delta
        else:
            grad[w_sl] = (a.T @ delta).ravel()
            grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * act_grad(pre[i - 1], aux[i - 1])
    return grad


# ---------------------------------------------------------------------------
# score network s(y, t)


def _score_inputs(params, y, t, T):
    Y = np.asarray(y, dtype=np.float64)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    if Y.shape[1] + 1 != params.n_in or params.n_out != Y.shape[1]:
        raise InvalidInputError(f"score net {params.layer_sizes} does not accept points of dimension {Y.shape[1]}")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (Y.shape[0],))
    return np.column_stack([Y, tt / T]), single


def score_forward(params, y, t, T=1.0):
    """``s(y, t)`` for a point (returns a d-vector) or a batch of rows."""
    X, single = _score_inputs(params, y, t, T)
    out, _ = mlp_forward(params, X)
    return out[0] if single else out


def score_vjp_params(params, y, t, upstream, T=1.0):
    """Per-sample ``grad_theta (upstream . s(y, t))``.

    For a single point returns a length-P vector; for a batch, the ``(n, P)``
    matrix of per-row gradients.
    """
    X, single = _score_inputs(params, y, t, T)
    U = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if U.shape != (X.shape[0], params.n_out):
        raise InvalidInputError(f"upstream shape {U.shape} does not match output {(X.shape[0], params.n_out)}")
    _, cache = mlp_forward(params, X)
    g = mlp_backward(params, cache, U, per_sample=True)
    return g[0] if single else g


def score_vjp_params_sum(params, y, t, upstream, T=1.0):
    """``sum_n grad_theta (upstream[n] . s(y[n], t[n]))`` as one flat vector."""
    X, _ = _score_inputs(params, y, t, T)
    U = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    _, cache = mlp_forward(params, X)
    return mlp_backward(params, cache, U)


# ---------------------------------------------------------------------------
# control-variate network eps(t)


def _eps_inputs(params, t, T):
    if params.n_in != 1 or params.n_out != 1:
        raise InvalidInputError(f"eps net must map 1 -> 1, got {params.layer_sizes}")
    tt = np.asarray(t, dtype=np.float64)
    return (np.atleast_1d(tt) / T)[:, None], tt.ndim == 0


def eps_forward(params, t, T=1.0):
    X, scalar = _eps_inputs(params, t, T)
    out, _ = mlp_forward(params, X)
    return float(out[0, 0]) if scalar else out[:, 0]


def eps_vjp_params(params, t, upstream, T=1.0):
    """Per-sample ``grad_phi (upstream * eps(t))``; a vector for scalar ``t``, else ``(n, P)``."""
    X, scalar = _eps_inputs(params, t, T)
    U = np.atleast_1d(np.asarray(upstream, dtype=np.float64)).reshape(-1, 1)
    _, cache = mlp_forward(params, X)
    g = mlp_backward(params, cache, U, per_sample=True)
    return g[0] if scalar else g


def eps_vjp_params_sum(params, t, upstream, T=1.0):
    X, _ = _eps_inputs(params, t, T)
    U = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    _, cache = mlp_forward(params, X)
    return mlp_backward(params, cache, U)


# ---------------------------------------------------------------------------
# Adam


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        P = params.n_params
        return cls(np.zeros(P), np.zeros(P), lr=check_positive(lr, "lr"), **kw)


def adam_step(state, params, grad):
    """One bias-corrected Adam update. ``state`` is updated in place and returned."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.n_params,) or state.m.shape != grad.shape:
        raise InvalidInputError(f"gradient of shape {grad.shape} does not match {params.n_params} parameters")
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError("non-finite gradient passed to Adam", last_params=params)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    new = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params.with_flat(new)


# ---------------------------------------------------------------------------
# checkpoint text format
#
#   mlp v1 sizes=<s0,s1,...> act=<gelu|relu>
#   <one parameter per line, 17 significant digits, flat layout order>


def format_params(params):
    head = f"mlp v1 sizes={','.join(map(str, params.layer_sizes))} act={params.activation}"
    return head + "\n" + "".join(fmt_real(v) + "\n" for v in params.flat)


def parse_params(text):
    lines = text.splitlines()
    if not lines:
        raise CheckpointParseError("empty file, expected header 'mlp v1'", 1)
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["mlp", "v1"]:
        raise CheckpointParseError(f"expected header 'mlp v1 sizes=<csv> act=<name>', got {lines[0]!r}", 1)
    if not head[2].startswith("sizes="):
        raise CheckpointParseError(f"expected token 'sizes=', got {head[2]!r}", 1)
    if not head[3].startswith("act="):
        raise CheckpointParseError(f"expected token 'act=', got {head[3]!r}", 1)
    try:
        sizes = tuple(int(s) for s in head[2][len("sizes=") :].split(","))
    except ValueError:
        raise CheckpointParseError(f"bad layer sizes {head[2]!r}", 1) from None
    act = head[3][len("act=") :]
    if act not in ACTIVATIONS:
        raise CheckpointParseError(f"unknown activation {act!r}", 1)
    P = n_params(sizes)
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != P:
        raise CheckpointParseError(f"expected {P} parameter lines, got {len(body)}", len(lines))
    vals = np.empty(P)
    for i, ln in enumerate(body):
        try:
            vals[i] = float(ln)
        except ValueError:
            raise CheckpointParseError(f"not a real number: {ln!r}", i + 2) from None
    try:
        return MlpParams(sizes, act, vals)
    except InvalidInputError as exc:
        raise CheckpointParseError(str(exc)) from exc


def save_checkpoint(path, params):
    atomic_write_text(path, format_params(params))


def load_checkpoint(path):
    with open(path) as fh:
        return parse_params(fh.read())
