"""Sectioned ``key = value`` run configuration.

Example::

    [experiment] name = moments
    [model] name = lorenz; params = r:28, s:10, b:2.6667, eps:0.01
    [run] seed = 7; n_paths = 10000; dt = 0.001; t_final = 1; scheme = em
    [output] dir = out; format = both

A section header may be followed by pairs on the same line; ``;`` separates
pairs and ``#`` starts a comment.  Parsing collects every error before
raising.
"""

import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .errors import ValidationError

EXPERIMENTS = ("calculus", "exit", "manifold", "moments", "order", "rds", "simulate")
FORMATS = ("csv", "json", "both")
SCHEMES = ("em", "milstein")
SEED_ENV = "STOKIT_SEED"
DEFAULT_SEED = 42
U64_MAX = 2**64 - 1

# section -> key -> kind
KEYS = {
    "experiment": {"name": "str"},
    "model": {"name": "str", "params": "params"},
    "domain": {"bounds": "floats", "h": "floats", "gamma": "str"},
    "run": {
        "seed": "seed", "n_paths": "count", "dt": "pos", "t_final": "pos", "scheme": "scheme",
        "x0": "floats", "workers": "count", "dts": "floats", "quantile": "unit",
        "bridge_correction": "bool",
    },
    "output": {"dir": "str", "format": "format"},
}
REQUIRED_RUN = ("n_paths", "dt", "t_final")


class ConfigError(ValidationError):
    """All problems found in a configuration text."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    experiment: Optional[str] = None
    model: Optional[str] = None
    params: dict = field(default_factory=dict)
    bounds: Optional[tuple] = None
    h: Optional[tuple] = None
    gamma: Optional[str] = None
    seed: Optional[int] = None
    n_paths: int = 1000
    dt: float = 1e-3
    t_final: float = 1.0
    scheme: str = "em"
    x0: Optional[tuple] = None
    workers: Optional[int] = None
    dts: Optional[tuple] = None
    quantile: Optional[float] = None
    bridge_correction: bool = False
    out_dir: str = "out"
    format: str = "both"

    def resolved_seed(self, flag=None, environ=None):
        """Seed precedence: flag, then ``STOKIT_SEED``, then config, then 42."""
        environ = os.environ if environ is None else environ
        if flag is not None:
            return _check_seed(flag)
        if environ.get(SEED_ENV, "").strip():
            return _check_seed(int(environ[SEED_ENV]))
        if self.seed is not None:
            return self.seed
        return DEFAULT_SEED

    def resolved_workers(self):
        return self.workers or os.cpu_count() or 1

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        out = replace(self, **kw)
        validate(out)
        return out

    def to_dict(self):
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _check_seed(v):
    v = int(v)
    if not 0 <= v <= U64_MAX:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    return v


def _convert(kind, raw):
    if kind == "str":
        if not raw:
            raise ValueError("empty value")
        return raw
    if kind == "floats":
        return tuple(float(v) for v in raw.split(","))
    if kind == "params":
        out = {}
        for item in filter(None, (p.strip() for p in raw.split(","))):
            name, sep, val = item.partition(":")
            if not sep or not name.strip():
                raise ValueError(f"parameter {item!r} is not name:value")
            out[name.strip()] = float(val)
        return out
    if kind == "seed":
        return _check_seed(int(raw))
    if kind == "count":
        v = int(raw)
        if v < 1:
            raise ValueError("must be a positive integer")
        return v
    if kind == "pos":
        v = float(raw)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    if kind == "unit":
        v = float(raw)
        if not 0 < v < 1:
            raise ValueError("must lie in (0, 1)")
        return v
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError("must be true or false")
        return low in ("true", "1", "yes")
    if kind == "scheme":
        if raw not in SCHEMES:
            raise ValueError(f"must be one of {', '.join(SCHEMES)}")
        return raw
    if kind == "format":
        if raw not in FORMATS:
            raise ValueError(f"must be one of {', '.join(FORMATS)}")
        return raw
    raise AssertionError(kind)


_FIELD = {("experiment", "name"): "experiment", ("model", "name"): "model", ("model", "params"): "params",
          ("output", "dir"): "out_dir"}


def parse_config(text):
    """Parse configuration text into a :class:`RunConfig`; raise :class:`ConfigError` with every problem."""
    errors = []
    seen = {}  # (section, key) -> line number
    values = {}
    sections = set()
    section, skipping = None, False
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            close = line.find("]")
            if close < 0:
                errors.append(f"line {lineno}: unterminated section header")
                section, skipping = None, True
                continue
            section = line[1:close].strip()
            line = line[close + 1 :].strip()
            if section not in KEYS:
                errors.append(f"line {lineno}: unknown section [{section}]")
                section, skipping = None, True
                continue
            skipping = False
            sections.add(section)
        for pair in filter(None, (p.strip() for p in line.split(";"))):
            if section is None:
                if not skipping:  # keys under an unknown header were already reported
                    errors.append(f"line {lineno}: key outside any section")
                continue
            key, sep, raw = pair.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep:
                errors.append(f"line {lineno}: expected key = value, got {pair!r}")
                continue
            if key not in KEYS[section]:
                errors.append(f"line {lineno}: unknown key {key!r} in [{section}]")
                continue
            if (section, key) in seen:
                errors.append(
                    f"line {lineno}: duplicate key {key!r} in [{section}] "
                    f"(first set on line {seen[section, key]}, again on line {lineno})"
                )
                continue
            seen[section, key] = lineno
            try:
                values[_FIELD.get((section, key), key)] = _convert(KEYS[section][key], raw)
            except ValueError as exc:
                errors.append(f"line {lineno}: bad value for {key!r}: {exc}")
    if "run" not in sections:
        errors.append("missing [run] section")
    else:
        for key in REQUIRED_RUN:
            if ("run", key) not in seen:
                errors.append(f"missing required key {key!r} in [run]")
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**values)
    try:
        validate(cfg)
    except ValidationError as exc:
        raise ConfigError([str(exc)]) from None
    return cfg


def validate(cfg):
    errors = []
    if cfg.experiment is not None and cfg.experiment not in EXPERIMENTS:
        errors.append(f"unknown experiment {cfg.experiment!r}")
    if not (isinstance(cfg.n_paths, int) and cfg.n_paths >= 1):
        errors.append("n_paths must be a positive integer")
    if not cfg.dt > 0:
        errors.append("dt must be positive")
    if not cfg.t_final > 0:
        errors.append("t_final must be positive")
    if cfg.workers is not None and cfg.workers < 1:
        errors.append("workers must be >= 1")
    if cfg.format not in FORMATS:
        errors.append(f"format must be one of {', '.join(FORMATS)}")
    if cfg.scheme not in SCHEMES:
        errors.append(f"scheme must be one of {', '.join(SCHEMES)}")
    if cfg.bounds is not None and len(cfg.bounds) not in (2, 4):
        errors.append("bounds must list lo,hi per axis for 1 or 2 axes")
    if cfg.h is not None and any(not v > 0 for v in cfg.h):
        errors.append("h must be positive")
    if cfg.dts is not None and any(not v > 0 for v in cfg.dts):
        errors.append("dts must be positive")
    if cfg.seed is not None:
        try:
            _check_seed(cfg.seed)
        except (ValidationError, ValueError, TypeError) as exc:
            errors.append(str(exc))
    if errors:
        raise ConfigError(errors)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, dict):
        return ", ".join(f"{k}:{_fmt(float(x))}" for k, x in v.items())
    return str(v)


def serialize_config(cfg):
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    lines = []
    if cfg.experiment is not None:
        lines.append(f"[experiment] name = {cfg.experiment}")
    model = []
    if cfg.model is not None:
        model.append(f"name = {cfg.model}")
    if cfg.params:
        model.append(f"params = {_fmt(cfg.params)}")
    if model:
        lines.append("[model] " + "; ".join(model))
    domain = [f"{k} = {_fmt(getattr(cfg, k))}" for k in ("bounds", "h", "gamma") if getattr(cfg, k) is not None]
    if domain:
        lines.append("[domain] " + "; ".join(domain))
    run = []
    for key in KEYS["run"]:
        v = getattr(cfg, key)
        if v is None or (key == "bridge_correction" and not v):
            continue
        run.append(f"{key} = {_fmt(v)}")
    lines.append("[run] " + "; ".join(run))
    lines.append(f"[output] dir = {cfg.out_dir}; format = {cfg.format}")
    return "\n".join(lines) + "\n"
