"""Run configuration for the command-line tool.

A run config is an INI file read with :mod:`configparser`::

    [run]
    name = squares          ; output goes to <out_dir>/<name>/
    out_dir = out
    seed = 0

    [data]
    spec = default          ; default | thin | path to a "cx cy hx hy w" file
    samples =               ; optional CSV of training data (header row, 2 columns)
    n_train = 10000

    [gmm]
    n_components = 8
    cov_mode = full
    subset = 10000
    tol = 1e-6
    max_iter = 500
    n_init = 5

    [train]
    ; any TrainConfig field, e.g. method, eps_mode, eps_value, n_iterations,
    ; final_loss_step, interior_dt ...

    [sample]
    n_samples = 10000
    n_steps = 1000
    on_diverge = freeze     ; freeze: runaway samples stop at the bound; raise: abort

    [eval]
    tau =                   ; empty: 0.1 * smallest half-width

    [compare]
    methods = dsm, ndsm_eps1, ndsm_eps0, ndsm_learned
    seeds = 5
    final_loss_steps =      ; optional sweep, e.g. 0.05, 0.01, 0.005

Every omitted key takes the default shown (training defaults come from
:class:`TrainConfig`). :meth:`RunConfig.to_text` writes the fully resolved
config, so a saved manifest can be fed back with ``--config``.
"""

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from ._validation import InvalidInputError
from .training import TrainConfig

COMPARE_METHODS = {
    "dsm": {"method": "dsm"},
    "ndsm_eps1": {"method": "ndsm_cv", "eps_mode": "fixed", "eps_value": 1.0},
    "ndsm_eps0": {"method": "ndsm_cv", "eps_mode": "fixed", "eps_value": 0.0},
    "ndsm_learned": {"method": "ndsm_cv", "eps_mode": "learned"},
}


class ConfigError(InvalidInputError):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    out_dir: str = "out"
    seed: int = 0
    spec: str = "default"
    samples: str = ""
    n_train: int = 10000
    n_components: int = 8
    cov_mode: str = "full"
    gmm_subset: int = 10000
    gmm_tol: float = 1e-6
    gmm_max_iter: int = 500
    gmm_n_init: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    n_samples: int = 10000
    n_steps: int = 1000
    on_diverge: str = "freeze"
    tau: Optional[float] = None
    methods: List[str] = field(default_factory=lambda: list(COMPARE_METHODS))
    seeds: int = 5
    final_loss_steps: List[float] = field(default_factory=list)

    def train_config(self, **overrides):
        """TrainConfig with the run seed applied."""
        return dataclasses.replace(self.train, rng_seed=self.seed, **overrides)

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"name": self.name, "out_dir": self.out_dir, "seed": str(self.seed)}
        cp["data"] = {"spec": self.spec, "samples": self.samples, "n_train": str(self.n_train)}
        cp["gmm"] = {
            "n_components": str(self.n_components),
            "cov_mode": self.cov_mode,
            "subset": str(self.gmm_subset),
            "tol": repr(self.gmm_tol),
            "max_iter": str(self.gmm_max_iter),
            "n_init": str(self.gmm_n_init),
        }
        cp["train"] = {k: _fmt(v) for k, v in self.train.to_dict().items() if k != "rng_seed"}
        cp["sample"] = {"n_samples": str(self.n_samples), "n_steps": str(self.n_steps), "on_diverge": self.on_diverge}
        cp["eval"] = {"tau": _fmt(self.tau)}
        cp["compare"] = {
            "methods": ", ".join(self.methods),
            "seeds": str(self.seeds),
            "final_loss_steps": ", ".join(repr(v) for v in self.final_loss_steps),
        }
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


_KNOWN = {
    "run": {"name", "out_dir", "seed"},
    "data": {"spec", "samples", "n_train"},
    "gmm": {"n_components", "cov_mode", "subset", "tol", "max_iter", "n_init"},
    "sample": {"n_samples", "n_steps", "on_diverge"},
    "eval": {"tau"},
    "compare": {"methods", "seeds", "final_loss_steps"},
}


def _convert(section, key, raw, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _train_field_types():
    """``{field: (type, optional)}`` for every TrainConfig field."""
    out = {}
    for name, hint in typing.get_type_hints(TrainConfig).items():
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        out[name] = (args[0], True) if args else (hint, False)
    return out


def parse_run_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in cp.sections():
        allowed = _KNOWN.get(section)
        if section == "train":
            allowed = set(_train_field_types()) - {"rng_seed"}
        if allowed is None:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(cp[section]) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, kind, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key).strip()
        if raw == "" and default is None:
            return None
        if raw == "" and kind is str:
            return ""
        return _convert(section, key, raw, kind)

    cfg.name = get("run", "name", str, cfg.name)
    cfg.out_dir = get("run", "out_dir", str, cfg.out_dir)
    cfg.seed = get("run", "seed", int, cfg.seed)
    cfg.spec = get("data", "spec", str, cfg.spec)
    cfg.samples = get("data", "samples", str, cfg.samples)
    cfg.n_train = get("data", "n_train", int, cfg.n_train)
    cfg.n_components = get("gmm", "n_components", int, cfg.n_components)
    cfg.cov_mode = get("gmm", "cov_mode", str, cfg.cov_mode)
    cfg.gmm_subset = get("gmm", "subset", int, cfg.gmm_subset)
    cfg.gmm_tol = get("gmm", "tol", float, cfg.gmm_tol)
    cfg.gmm_max_iter = get("gmm", "max_iter", int, cfg.gmm_max_iter)
    cfg.gmm_n_init = get("gmm", "n_init", int, cfg.gmm_n_init)
    cfg.n_samples = get("sample", "n_samples", int, cfg.n_samples)
    cfg.n_steps = get("sample", "n_steps", int, cfg.n_steps)
    cfg.on_diverge = get("sample", "on_diverge", str, cfg.on_diverge)
    cfg.tau = get("eval", "tau", float, None)
    cfg.seeds = get("compare", "seeds", int, cfg.seeds)
    if cp.has_option("compare", "methods"):
        cfg.methods = [m.strip() for m in cp.get("compare", "methods").split(",") if m.strip()]
    if cp.has_option("compare", "final_loss_steps"):
        items = [v.strip() for v in cp.get("compare", "final_loss_steps").split(",") if v.strip()]
        cfg.final_loss_steps = [_convert("compare", "final_loss_steps", v, float) for v in items]

    train_kwargs = {}
    for name, (kind, optional) in _train_field_types().items():
        if name == "rng_seed" or not cp.has_option("train", name):
            continue
        raw = cp.get("train", name).strip()
        train_kwargs[name] = None if (raw == "" and optional) else _convert("train", name, raw, kind)
    cfg.train = TrainConfig(**train_kwargs)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg):
    try:
        cfg.train.validate()
    except InvalidInputError as exc:
        raise ConfigError(f"[train] {exc}") from None
    for name in ("n_train", "n_components", "gmm_subset", "gmm_max_iter", "gmm_n_init", "n_samples", "n_steps", "seeds"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.on_diverge not in ("freeze", "raise"):
        raise ConfigError(f"[sample] on_diverge must be 'freeze' or 'raise', got {cfg.on_diverge!r}")
    if cfg.tau is not None and cfg.tau < 0:
        raise ConfigError("tau must be >= 0")
    bad = [m for m in cfg.methods if m not in COMPARE_METHODS]
    if bad:
        raise ConfigError(f"unknown compare method(s): {', '.join(bad)}; choose from {', '.join(COMPARE_METHODS)}")
    if any(v <= 0 for v in cfg.final_loss_steps):
        raise ConfigError("final_loss_steps must be positive")
    if not cfg.name or "/" in cfg.name:
        raise ConfigError("run name must be a non-empty single path component")
    return cfg


def load_run_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_run_config(text, source=str(path))
