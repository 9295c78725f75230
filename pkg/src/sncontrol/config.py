"""Run configuration: an INI file with optional sections, validated into a
frozen :class:`RunConfig`.

Intervals are written as two comma-separated reals, ``omega = 0.2, 0.45``.
Every key has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # grid
    n: int = 100
    m: int = 200
    T: float = 1.0
    alpha: float = 0.5
    grading: float = 1.0
    # domains
    omega: tuple = (0.2, 0.45)
    omega1: tuple = (0.6, 0.7)
    omega2: tuple = (0.75, 0.85)
    omega_d: tuple = (0.3, 0.6)
    o0: tuple = (0.36, 0.39)
    o1: tuple = (0.34, 0.41)
    o2: tuple = (0.32, 0.43)
    o3: tuple = (0.31, 0.44)
    # cost and data
    alpha1: float = 1.0
    alpha2: float = 1.0
    mu1: float = 100.0
    mu2: float = 100.0
    d0: float = 1.0
    y0_amplitude: float = 1.0
    target_amplitude: float = 1.0
    # nonlinearity
    nonlinearity: str = "sine"
    M: float = 0.1
    # carleman
    s: str = "calibrate"
    dynamic_range: float = 1e12
    # leader
    epsilon: float = 1e-4
    ladder: tuple = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
    cg_tol: float = 1e-10
    cg_max_iter: int = 2000
    coupled_method: str = "monolithic"
    # outer loop
    outer_max_iter: int = 10
    outer_tol: float = 1e-8
    damping: float = 1.0
    # probes and run
    probe_trials: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; identifies every artifact."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = replace(self, **kw)
        validate(cfg)
        return cfg


SECTIONS = {
    "grid": ("n", "m", "T", "alpha", "grading"),
    "domains": ("omega", "omega1", "omega2", "omega_d", "o0", "o1", "o2", "o3"),
    "cost": ("alpha1", "alpha2", "mu1", "mu2", "d0", "y0_amplitude", "target_amplitude"),
    "nonlinearity": ("nonlinearity", "M"),
    "carleman": ("s", "dynamic_range"),
    "leader": ("epsilon", "ladder", "cg_tol", "cg_max_iter", "coupled_method"),
    "outer": ("outer_max_iter", "outer_tol", "damping"),
    "run": ("probe_trials", "seed"),
}

# INI keys are case-sensitive: the grid size m and the Lipschitz bound M differ
_KEYS = {f.name: f for f in fields(RunConfig)}

NONLINEARITIES = ("zero", "linear", "sine", "tanh")
COUPLED_METHODS = ("monolithic", "picard")


def _convert(name, raw, line):
    f = _KEYS[name]
    default = f.default
    try:
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
            return vals
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"line {line}: cannot parse {f.name} = {raw!r}", [f.name], line) from None


def _line_numbers(text):
    """(section, key) -> 1-based line number, for error messages."""
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip())] = no
    return out


def parse_config_text(text: str, **overrides) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"line {line}: {exc.message if hasattr(exc, 'message') else exc}", [], line) from None
    lines = _line_numbers(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", [section])
        allowed = set(SECTIONS[section])
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in allowed:
                raise ConfigError(f"line {line}: unknown key {key!r} in [{section}]", [key], line)
            values[key] = _convert(key, raw, line)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    validate(cfg, lines)
    return cfg


def parse_config(path=None, **overrides) -> RunConfig:
    """Read and validate a run configuration; ``path`` None gives defaults."""
    if path is None:
        return parse_config_text("", **overrides)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", ["config"]) from None
    return parse_config_text(text, **overrides)


def _inside(inner, outer):
    """Closure of ``inner`` contained in the open interval ``outer``."""
    return outer[0] < inner[0] and inner[1] < outer[1]


def _overlap(a, b):
    return max(a[0], b[0]) < min(a[1], b[1])


def validate(cfg: RunConfig, lines=None) -> None:
    """Collect every violated invariant and raise one ConfigError."""
    lines = lines or {}
    problems = []

    def bad(msg, *names):
        problems.append((msg, names))

    for name in ("omega", "omega1", "omega2", "omega_d", "o0", "o1", "o2", "o3"):
        iv = getattr(cfg, name)
        if len(iv) != 2 or not 0.0 <= iv[0] < iv[1] <= 1.0:
            bad(f"{name} must be an interval lo, hi with 0 <= lo < hi <= 1", name)
    if problems:
        _raise(problems, lines)

    if cfg.n < 3:
        bad("n must be at least 3", "n")
    if cfg.m < 1:
        bad("m must be at least 1", "m")
    for name in ("T", "mu1", "mu2", "alpha1", "alpha2", "d0", "epsilon", "dynamic_range", "outer_tol"):
        if not getattr(cfg, name) > 0.0:
            bad(f"{name} must be positive", name)
    if not 0.0 <= cfg.alpha < 1.0:
        bad("alpha must lie in [0, 1) (weakly degenerate case)", "alpha")
    if not cfg.grading >= 1.0:
        bad("grading must be >= 1", "grading")
    if not 0.0 < cfg.cg_tol < 1.0:
        bad("cg_tol must lie in (0, 1)", "cg_tol")
    if not 0.0 < cfg.damping <= 1.0:
        bad("damping must lie in (0, 1]", "damping")
    if cfg.M < 0.0:
        bad("M must be non-negative", "M")
    if cfg.nonlinearity not in NONLINEARITIES:
        bad(f"nonlinearity must be one of {NONLINEARITIES}", "nonlinearity")
    if cfg.coupled_method not in COUPLED_METHODS:
        bad(f"coupled_method must be one of {COUPLED_METHODS}", "coupled_method")
    if cfg.s != "calibrate":
        try:
            if not float(cfg.s) > 0.0:
                bad("s must be 'calibrate' or a positive number", "s")
        except ValueError:
            bad("s must be 'calibrate' or a positive number", "s")
    if len(cfg.ladder) < 4 or any(e <= 0.0 for e in cfg.ladder):
        bad("ladder must list at least four positive epsilons", "ladder")
    elif any(b >= a for a, b in zip(cfg.ladder, cfg.ladder[1:])):
        bad("ladder must be strictly decreasing", "ladder")
    if cfg.cg_max_iter < 1 or cfg.outer_max_iter < 1 or cfg.probe_trials < 1:
        bad("iteration and trial counts must be positive", "cg_max_iter", "outer_max_iter", "probe_trials")

    for f in ("omega1", "omega2"):
        if _overlap(getattr(cfg, f), cfg.omega):
            bad(f"follower set {f} must be disjoint from the leader set omega", f, "omega")
    if not _overlap(cfg.omega_d, cfg.omega):
        bad("observation set omega_d must intersect the leader set omega", "omega_d", "omega")
    else:
        common = (max(cfg.omega[0], cfg.omega_d[0]), min(cfg.omega[1], cfg.omega_d[1]))
        chain = [("o0", cfg.o0), ("o1", cfg.o1), ("o2", cfg.o2), ("o3", cfg.o3), ("omega & omega_d", common)]
        for (na, a), (nb, b) in zip(chain, chain[1:]):
            if not _inside(a, b):
                bad(f"{na} must be compactly contained in {nb}", na, nb.split(" ")[0])
    if problems:
        _raise(problems, lines)


def _raise(problems, lines):
    names = []
    msgs = []
    for msg, fs in problems:
        names.extend(fs)
        where = [lines[k] for k in lines if k[1] in fs]
        msgs.append(f"{msg} (line {min(where)})" if where else msg)
    first = min((lines[k] for k in lines if k[1] in names), default=None)
    raise ConfigError("; ".join(msgs), names, first)
