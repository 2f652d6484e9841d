"""Experiment configuration: sectioned key-value files with bracketed arrays.

A file has four sections::

    [plant]        A, B, sigma, x0
    [uncertainty]  theta0, half_widths, center, delta, alphas, c1, c2, c3,
                   sigma_mode
    [mpc]          N, Q, R, K, F, G, lambda, T, template_seed,
                   template_directions, noise_support, fixed_w_bar, prune
    [run]          horizon, n_runs, master_seed, output, workers

Arrays use row-major bracket syntax (``[[0.6, 0.2], [-0.1, 0.4]]``); ``#``
and ``;`` start comments.  See :data:`DEFAULTS` for every optional key.
"""
import configparser
import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .estimation import sigma_schedule
from .geometry import (Box, ContractiveTemplate, HPolytope, box_vertices,
                       compute_contractive_template)
from .params import ParamVector
from .simulation import ClosedLoopConfig
from .solvers import OPTIMAL, UNBOUNDED, LpProblem, solve_lp
from .tube_mpc import MpcConfig

DEFAULTS = {
    "uncertainty": {"delta": 0.01, "alphas": [0.01, 0.5, 0.99], "c1": 10.0,
                    "c2": 5.0, "c3": 1.0, "sigma_mode": "example"},
    "mpc": {"N": 10, "lambda": 0.999, "template_seed": "constraints",
            "template_directions": 8, "noise_support": "box",
            "fixed_w_bar": False, "prune": "hull", "template_max_iter": 200},
    "run": {"horizon": 400, "n_runs": 100, "master_seed": 0,
            "output": "results", "workers": 1},
}

REQUIRED = {
    "plant": ["A", "B", "sigma", "x0"],
    "uncertainty": ["theta0", "half_widths"],
    "mpc": ["Q", "R", "K", "F", "G"],
    "run": [],
}

OPTIONAL = {"uncertainty": ["center"], "mpc": ["T"]}


@dataclass
class ExperimentConfig:
    """Validated experiment description (see the module docstring)."""

    A: np.ndarray
    B: np.ndarray
    sigma: float
    x0: np.ndarray
    theta0: np.ndarray
    Theta0: Box
    delta: float
    alphas: list
    c1: float
    c2: float
    c3: float
    sigma_mode: str
    N: int
    Q: np.ndarray
    R: np.ndarray
    K: np.ndarray
    F: np.ndarray
    G: np.ndarray
    lam: float
    T: Optional[np.ndarray]
    template_seed: str
    template_directions: int
    noise_support: str
    fixed_w_bar: bool
    prune: str
    template_max_iter: int
    horizon: int
    n_runs: int
    master_seed: int
    output: str
    workers: int
    source: Optional[str] = None
    _template: Optional[ContractiveTemplate] = field(default=None, repr=False)

    @property
    def d_x(self):
        return self.A.shape[0]

    @property
    def d_u(self):
        return self.B.shape[1]

    @property
    def theta_star(self):
        return ParamVector.from_matrices(self.A, self.B)

    @property
    def theta0_param(self):
        return ParamVector(self.theta0, self.d_x, self.d_u)

    def vertices(self):
        return box_vertices(self.Theta0)

    def seed_set(self):
        """Initial polytope of the template iteration."""
        d_x = self.d_x
        if self.template_seed == "constraints":
            return HPolytope(self.F + self.G @ self.K, np.ones(len(self.F)))
        if self.template_seed == "box":
            return HPolytope(np.vstack([np.eye(d_x), -np.eye(d_x)]),
                             np.ones(2 * d_x))
        n = self.template_directions
        ang = np.arange(n) * 2.0 * np.pi / n
        return HPolytope(np.c_[np.cos(ang), np.sin(ang)], np.ones(n))

    def template(self) -> ContractiveTemplate:
        """The tube template: the explicit ``T`` if given, else computed."""
        if self._template is None:
            if self.T is not None:
                self._template = ContractiveTemplate(self.T, self.lam)
            else:
                self._template = compute_contractive_template(
                    self.vertices(), self.K, self.lam, self.seed_set(),
                    max_iter=self.template_max_iter)
        return self._template

    def mpc_config(self) -> MpcConfig:
        W = Box(np.zeros(self.d_x), np.full(self.d_x, 3.0 * self.sigma))
        w_exc = None
        if self.fixed_w_bar:
            w_exc = max(sigma_schedule(0, self.sigma, a, self.d_x,
                                       self.sigma_mode) for a in self.alphas)
        return MpcConfig(self.N, self.Q, self.R, self.K, self.F, self.G,
                         self.template(), W, self.sigma, prune=self.prune,
                         noise_support=self.noise_support,
                         w_bar_excitation=w_exc)

    def closed_loop(self, alpha=None, mpc=None) -> ClosedLoopConfig:
        alpha = self.alphas[0] if alpha is None else alpha
        return ClosedLoopConfig(
            mpc or self.mpc_config(), self.theta_star, self.theta0_param,
            self.Theta0, self.x0, alpha=alpha, delta=self.delta, c1=self.c1,
            c2=self.c2, c3=self.c3, sigma_mode=self.sigma_mode)


class _Source:
    """Raw file text with a (section, key) -> line number index."""

    _section = re.compile(r"^\s*\[([^\]]+)\]")
    _key = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")

    def __init__(self, text):
        self.lines = {}
        section = None
        for no, line in enumerate(text.splitlines(), start=1):
            m = self._section.match(line)
            if m:
                section = m.group(1).strip().lower()
                continue
            m = self._key.match(line)
            if m and section is not None and not line[:1].isspace():
                self.lines[(section, m.group(1).strip().lower())] = no

    def where(self, section, key):
        no = self.lines.get((section, key.lower()))
        return f"line {no}" if no else f"[{section}] {key}"


def _parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text, source=None) -> ExperimentConfig:
    """Parse and validate configuration text.

    Raises
    ------
    ConfigError
        With one human-readable message per problem found.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError([f"parse error: {exc}"]) from None
    where = _Source(text)
    errors = []
    raw = {}
    for section in REQUIRED:
        vals = dict(DEFAULTS.get(section, {}))
        if parser.has_section(section):
            known = set(REQUIRED[section]) | set(DEFAULTS.get(section, {})) \
                | set(OPTIONAL.get(section, []))
            for key, value in parser.items(section):
                if key not in known:
                    errors.append(f"{where.where(section, key)}: unknown key "
                                  f"'{key}' in [{section}]")
                    continue
                vals[key] = _parse_value(value)
                if isinstance(vals[key], str) and vals[key].startswith("["):
                    errors.append(f"{where.where(section, key)}: malformed "
                                  f"array for '{key}'")
        elif REQUIRED[section]:
            errors.append(f"missing section [{section}]")
            continue
        for key in REQUIRED[section]:
            if key not in vals:
                errors.append(f"[{section}] missing required key '{key}'")
        raw[section] = vals
    for extra in set(parser.sections()) - set(REQUIRED):
        errors.append(f"unknown section [{extra}]")
    if errors:
        raise ConfigError(errors)

    def arr(section, key, ndim):
        v = raw[section][key]
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            errors.append(f"{where.where(section, key)}: '{key}' is not "
                          "numeric")
            return None
        if ndim == 2:
            a = np.atleast_2d(a)
        elif ndim == 1:
            a = np.atleast_1d(a)
        if a.ndim != ndim:
            errors.append(f"{where.where(section, key)}: '{key}' must be a "
                          f"{ndim}-d array")
            return None
        return a

    def num(section, key, kind=float):
        v = raw[section].get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append(f"{where.where(section, key)}: '{key}' must be a "
                          "number")
            return None
        if kind is int:
            if float(v) != int(v):
                errors.append(f"{where.where(section, key)}: '{key}' must be "
                              "an integer")
                return None
            return int(v)
        return float(v)

    def text_opt(section, key, choices):
        v = raw[section].get(key)
        if v not in choices:
            errors.append(f"{where.where(section, key)}: '{key}' must be one "
                          f"of {', '.join(choices)}")
        return v

    p, u, m, r = raw["plant"], raw["uncertainty"], raw["mpc"], raw["run"]
    A = arr("plant", "A", 2)
    B = arr("plant", "B", 2)
    sigma = num("plant", "sigma")
    x0 = arr("plant", "x0", 1)
    theta0 = arr("uncertainty", "theta0", 1)
    hw = arr("uncertainty", "half_widths", 1)
    center = arr("uncertainty", "center", 1) if "center" in u else theta0
    delta = num("uncertainty", "delta")
    alphas = arr("uncertainty", "alphas", 1)
    c1, c2, c3 = (num("uncertainty", k) for k in ("c1", "c2", "c3"))
    sigma_mode = text_opt("uncertainty", "sigma_mode", ("example", "theory"))
    N = num("mpc", "N", int)
    Q, R, K, F, G = (arr("mpc", k, 2) for k in ("Q", "R", "K", "F", "G"))
    lam = num("mpc", "lambda")
    T = arr("mpc", "T", 2) if "T" in m else None
    seed_kind = text_opt("mpc", "template_seed",
                         ("constraints", "box", "polygon"))
    n_dir = num("mpc", "template_directions", int)
    noise = text_opt("mpc", "noise_support", ("box", "ball"))
    fixed = m.get("fixed_w_bar")
    if not isinstance(fixed, bool):
        errors.append(f"{where.where('mpc', 'fixed_w_bar')}: 'fixed_w_bar' "
                      "must be true or false")
    prune = text_opt("mpc", "prune", ("none", "dedupe", "hull"))
    t_iter = num("mpc", "template_max_iter", int)
    horizon = num("run", "horizon", int)
    n_runs = num("run", "n_runs", int)
    master_seed = num("run", "master_seed", int)
    workers = num("run", "workers", int)
    output = str(r.get("output"))
    if errors:
        raise ConfigError(errors)

    # shapes
    d_x = A.shape[0]
    if A.shape != (d_x, d_x):
        errors.append(f"{where.where('plant', 'A')}: A must be square")
    if B.shape[0] != d_x:
        errors.append(f"{where.where('plant', 'B')}: B must have {d_x} rows")
    d_u = B.shape[1]
    d_th = d_x * (d_x + d_u)
    expect = {("plant", "x0"): (x0, (d_x,)),
              ("uncertainty", "theta0"): (theta0, (d_th,)),
              ("uncertainty", "center"): (center, (d_th,)),
              ("mpc", "Q"): (Q, (d_x, d_x)), ("mpc", "R"): (R, (d_u, d_u)),
              ("mpc", "K"): (K, (d_u, d_x))}
    for (sec, key), (val, shape) in expect.items():
        if val.shape != shape:
            errors.append(f"{where.where(sec, key)}: '{key}' has shape "
                          f"{val.shape}, expected {shape}")
    if hw.size == 1:
        hw = np.full(d_th, float(hw[0]))
    if hw.shape != (d_th,):
        errors.append(f"{where.where('uncertainty', 'half_widths')}: "
                      f"expected 1 or {d_th} half-widths")
    if F.shape[1] != d_x or G.shape != (F.shape[0], d_u):
        errors.append(f"{where.where('mpc', 'F')}: F must be d_c x {d_x} and "
                      f"G d_c x {d_u} with matching rows")
    if T is not None and T.shape[1] != d_x:
        errors.append(f"{where.where('mpc', 'T')}: T must have {d_x} columns")
    if seed_kind == "polygon" and d_x != 2:
        errors.append(f"{where.where('mpc', 'template_seed')}: polygon seeds "
                      "need a two-dimensional state")
    # scalar ranges
    checks = [
        (sigma >= 0, "plant", "sigma", "sigma must be >= 0"),
        (0 < delta < 1, "uncertainty", "delta", "delta must lie in (0, 1)"),
        (alphas.size > 0 and np.all((alphas > 0) & (alphas < 1)),
         "uncertainty", "alphas", "every alpha must lie in (0, 1)"),
        (min(c1, c2, c3) > 0, "uncertainty", "c3", "c1, c2, c3 must be > 0"),
        (N >= 1, "mpc", "N", "N must be >= 1"),
        (0 <= lam < 1, "mpc", "lambda", "lambda must lie in [0, 1)"),
        (n_dir >= 3, "mpc", "template_directions",
         "template_directions must be >= 3"),
        (horizon >= 1, "run", "horizon", "horizon must be >= 1"),
        (n_runs >= 1, "run", "n_runs", "n_runs must be >= 1"),
        (workers >= 1, "run", "workers", "workers must be >= 1"),
        (t_iter >= 1, "mpc", "template_max_iter",
         "template_max_iter must be >= 1"),
    ]
    for ok, sec, key, msg in checks:
        if not ok:
            errors.append(f"{where.where(sec, key)}: {msg}")
    if np.any(hw < 0):
        errors.append(f"{where.where('uncertainty', 'half_widths')}: "
                      "half-widths must be >= 0")
    for name, M in (("Q", Q), ("R", R)):
        if M.shape[0] == M.shape[1] and (
                not np.allclose(M, M.T) or np.linalg.eigvalsh(
                    0.5 * (M + M.T)).min() < -1e-12):
            errors.append(f"{where.where('mpc', name)}: {name} must be "
                          "symmetric positive semidefinite")
    if errors:
        raise ConfigError(errors)

    cfg = ExperimentConfig(
        A=A, B=B, sigma=sigma, x0=x0, theta0=theta0, Theta0=Box(center, hw),
        delta=delta, alphas=[float(a) for a in alphas], c1=c1, c2=c2, c3=c3,
        sigma_mode=sigma_mode, N=N, Q=Q, R=R, K=K, F=F, G=G, lam=lam, T=T,
        template_seed=seed_kind, template_directions=n_dir,
        noise_support=noise, fixed_w_bar=fixed, prune=prune,
        template_max_iter=t_iter, horizon=horizon, n_runs=n_runs,
        master_seed=master_seed, output=output, workers=workers,
        source=source)
    errors.extend(validate_assumptions(cfg, where))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_assumptions(cfg: ExperimentConfig, where=None):
    """Messages for violated modelling assumptions (empty when all hold)."""
    loc = where.where if where is not None else (lambda s, k: f"[{s}] {k}")
    errors = []
    if not cfg.Theta0.contains(cfg.theta0, tol=1e-12):
        errors.append(f"{loc('uncertainty', 'theta0')}: theta0 lies outside "
                      "the initial uncertainty box")
    if not cfg.Theta0.contains(cfg.theta_star.theta, tol=1e-12):
        errors.append(f"{loc('plant', 'A')}: the true parameter (A, B) lies "
                      "outside the initial uncertainty box")
    bad = constraint_set_unbounded(cfg.F, cfg.G)
    if bad:
        errors.append(f"{loc('mpc', 'F')}: compactness assumption violated: "
                      "the constraint set {F x + G u <= 1} is unbounded "
                      "along "
                      + ", ".join(bad))
    try:
        verts = cfg.vertices()
    except Exception as exc:
        errors.append(f"{loc('uncertainty', 'half_widths')}: {exc}")
        return errors
    phis = [ParamVector(v, cfg.d_x, cfg.d_u).phi(cfg.K) for v in verts]
    radii = np.array([np.abs(np.linalg.eigvals(p)).max() for p in phis])
    if radii.max() >= 1.0:
        j = int(radii.argmax())
        errors.append(f"{loc('mpc', 'K')}: robust stabilization assumption "
                      f"violated: A + B K has spectral radius {radii[j]:.6g} >= 1 at "
                      f"vertex {j} of the initial uncertainty box")
    return errors


def constraint_set_unbounded(F, G):
    """Names of the coordinates along which ``{F x + G u <= 1}`` is unbounded."""
    M = np.hstack([F, G])
    n = M.shape[1]
    names = [f"x{i + 1}" for i in range(F.shape[1])] + \
            [f"u{i + 1}" for i in range(G.shape[1])]
    bad = []
    for i in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[i] = -sign
            res = solve_lp(LpProblem(c, A_in=M, b_in=np.ones(len(M))))
            if res.status == UNBOUNDED:
                bad.append(("+" if sign > 0 else "-") + names[i])
            elif res.status != OPTIMAL:
                bad.append(f"{names[i]} ({res.status})")
    return bad


def load_config(path) -> ExperimentConfig:
    """Read and validate a configuration file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, source=str(path))


def shipped_config_path(name="example_sec5.cfg"):
    """Path of a configuration file bundled with the package."""
    from importlib import resources
    return str(resources.files("sttmpc") / "data" / name)
