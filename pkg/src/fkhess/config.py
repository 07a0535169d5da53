"""Experiment configuration: an INI file with typed, range-checked fields.

Sections and keys (defaults in parentheses)::

    [task]      name (required): hess-semigroup | hess-fk | kernel | grad-kernel
                | hess-kernel | log-hess | bounds-suite | validate
    [manifold]  kind (euclidean), n (3), profile_c (0.05, cubic warping only)
    [weight]    kind (zero | quadratic | logcosh), c (0.0), K (0.0)
    [potential] kind (none | constant | clipped), value (0.0), cap (10.0)
    [run]       T (1.0), steps (200), n_paths (20480), r_nodes (64), seed (required),
                workers (1), distance (1.0), function (constant), theta_coefficient (1.0)
    [bounds]    p (1.5), alpha (1.2), delta0 (1.0)
    [output]    dir (results)

``distance`` places the start point on the first axis at that distance from
the pole.  ``function`` names the semigroup test function: constant,
square0 (x_0^2), cosh, gauss, or square (radial).
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import asdict, dataclass, field
from io import StringIO

from fkhess import estimators as est
from fkhess import geometry as geo

TASKS = ("hess-semigroup", "hess-fk", "kernel", "grad-kernel", "hess-kernel", "log-hess", "bounds-suite", "validate")
BOUND_TASKS = ("bounds-suite",)
MANIFOLDS = ("euclidean", "hyperbolic", "sphere", "warped")
WEIGHTS = ("zero", "quadratic", "logcosh")
POTENTIALS = ("none", "constant", "clipped")
FUNCTIONS = ("constant", "square0", "cosh", "gauss", "square")


class ConfigError(ValueError):
    """A configuration problem, reported with the file position when known."""


# (section, key) -> (type, default); a default of None marks a required field
SCHEMA = {
    ("task", "name"): (str, None),
    ("manifold", "kind"): (str, "euclidean"),
    ("manifold", "n"): (int, 3),
    ("manifold", "profile_c"): (float, 0.05),
    ("weight", "kind"): (str, "zero"),
    ("weight", "c"): (float, 0.0),
    ("weight", "K"): (float, 0.0),
    ("potential", "kind"): (str, "none"),
    ("potential", "value"): (float, 0.0),
    ("potential", "cap"): (float, 10.0),
    ("run", "T"): (float, 1.0),
    ("run", "steps"): (int, 200),
    ("run", "n_paths"): (int, 20480),
    ("run", "r_nodes"): (int, 64),
    ("run", "seed"): (int, None),
    ("run", "workers"): (int, 1),
    ("run", "distance"): (float, 1.0),
    ("run", "function"): (str, "constant"),
    ("run", "theta_coefficient"): (float, 1.0),
    ("bounds", "p"): (float, 1.5),
    ("bounds", "alpha"): (float, 1.2),
    ("bounds", "delta0"): (float, 1.0),
    ("output", "dir"): (str, "results"),
}


@dataclass
class ExperimentConfig:
    task: str
    manifold: str = "euclidean"
    n: int = 3
    profile_c: float = 0.05
    weight: str = "zero"
    weight_c: float = 0.0
    K: float = 0.0
    potential: str = "none"
    potential_value: float = 0.0
    potential_cap: float = 10.0
    T: float = 1.0
    steps: int = 200
    n_paths: int = 20480
    r_nodes: int = 64
    seed: int = 0
    workers: int = 1
    distance: float = 1.0
    function: str = "constant"
    theta_coefficient: float = 1.0
    p: float = 1.5
    alpha: float = 1.2
    delta0: float = 1.0
    out_dir: str = "results"
    source: str = "<config>"
    positions: dict = field(default_factory=dict, repr=False, compare=False)

    def echo(self) -> dict:
        """The configuration as nested sections, as it would be written back."""
        flat = asdict(self)
        return {
            "task": {"name": flat["task"]},
            "manifold": {"kind": flat["manifold"], "n": flat["n"], "profile_c": flat["profile_c"]},
            "weight": {"kind": flat["weight"], "c": flat["weight_c"], "K": flat["K"]},
            "potential": {"kind": flat["potential"], "value": flat["potential_value"], "cap": flat["potential_cap"]},
            "run": {k: flat[k] for k in ("T", "steps", "n_paths", "r_nodes", "seed", "workers", "distance", "function",
                                         "theta_coefficient")},
            "bounds": {"p": flat["p"], "alpha": flat["alpha"], "delta0": flat["delta0"]},
            "output": {"dir": flat["out_dir"]},
        }

    # -- model objects -------------------------------------------------------

    def build_manifold(self) -> geo.ModelManifold:
        if self.manifold == "euclidean":
            return geo.euclidean(self.n)
        if self.manifold == "hyperbolic":
            return geo.hyperbolic(self.n)
        if self.manifold == "sphere":
            return geo.sphere(self.n)
        return geo.warped(self.n, geo.CubicProfile(self.profile_c))

    def build_weight(self) -> geo.RadialWeight:
        if self.weight == "zero":
            return geo.ZeroWeight(self.K)
        if self.weight == "quadratic":
            return geo.QuadraticWeight(self.weight_c, self.K)
        return geo.LogCoshWeight(self.weight_c, self.K)

    def build_potential(self):
        if self.potential == "none":
            return None
        if self.potential == "constant":
            return geo.ConstantPotential(self.potential_value)
        return geo.ClippedDistancePotential(self.potential_cap)

    def build_function(self) -> est.TestFunction:
        if self.function == "constant":
            return est.ConstantFunction()
        if self.function == "square0":
            return est.CoordinateFunction(0, 2)
        return est.RadialFunction(self.function)

    def start_point(self, M: geo.ModelManifold):
        return geo.point_at(M, self.distance)


# INI keys are case-insensitive; map the lowered form back to the schema key
_CANONICAL = {(s, k.lower()): k for s, k in SCHEMA}
_FIELD = {
    ("task", "name"): "task", ("manifold", "kind"): "manifold", ("manifold", "n"): "n",
    ("manifold", "profile_c"): "profile_c", ("weight", "kind"): "weight", ("weight", "c"): "weight_c",
    ("weight", "K"): "K", ("potential", "kind"): "potential", ("potential", "value"): "potential_value",
    ("potential", "cap"): "potential_cap", ("output", "dir"): "out_dir",
}


def _positions(text: str) -> dict:
    """Line numbers of every (section, key) in the file text."""
    pos, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip().lower()
            continue
        m = re.match(r"^([A-Za-z_][\w]*)\s*[=:]", stripped)
        if m and section is not None:
            pos[(section, m.group(1).lower())] = lineno
    return pos


def _where(cfg_source: str, positions: dict, section: str, key: str) -> str:
    line = positions.get((section, key.lower()))
    place = f"{cfg_source}:{line}" if line else cfg_source
    return f"{place}: [{section}] {key}"


def parse_override(item: str) -> tuple[str, str, str]:
    """'section.key=value' -> (section, key, value)."""
    m = re.match(r"^\s*([A-Za-z_]+)\.([A-Za-z_][\w]*)\s*=(.*)$", item)
    if not m:
        raise ConfigError(f"--set {item!r}: expected section.key=value")
    return m.group(1).lower(), m.group(2), m.group(3).strip()


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, path, overrides)


def parse_config(text: str, source: str = "<config>", overrides: list[str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    positions = _positions(text)
    raw = {}
    for section in parser.sections():
        sec = section.lower()
        for key, value in parser.items(section):
            canon = _CANONICAL.get((sec, key.lower()))
            if canon is None:
                raise ConfigError(f"{_where(source, positions, sec, key)}: unknown field")
            raw[(sec, canon)] = (value, f"{_where(source, positions, sec, canon)}")
    for item in overrides or []:
        sec, key, value = parse_override(item)
        canon = _CANONICAL.get((sec, key.lower()))
        if canon is None:
            raise ConfigError(f"--set {sec}.{key}: unknown field")
        raw[(sec, canon)] = (value, f"--set {sec}.{canon}")
    values = {}
    for (sec, key), (typ, default) in SCHEMA.items():
        if (sec, key) not in raw:
            if default is None:
                raise ConfigError(f"{source}: [{sec}] {key}: required field is missing")
            values[(sec, key)] = (default, f"{source}: [{sec}] {key}")
            continue
        text_value, where = raw[(sec, key)]
        try:
            values[(sec, key)] = (typ(text_value), where)
        except ValueError:
            raise ConfigError(f"{where} = {text_value!r}: expected {typ.__name__}") from None
    kwargs = {_FIELD.get(k, k[1]): v for k, (v, _) in values.items()}
    cfg = ExperimentConfig(**kwargs, source=source, positions={k: w for k, (_, w) in values.items()})
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise ConfigError naming the first field outside its domain."""

    def fail(sec, key, value, why):
        where = cfg.positions.get((sec, key), f"{cfg.source}: [{sec}] {key}")
        raise ConfigError(f"{where} = {value!r}: {why}")

    choices = [
        ("task", "name", cfg.task, TASKS), ("manifold", "kind", cfg.manifold, MANIFOLDS),
        ("weight", "kind", cfg.weight, WEIGHTS), ("potential", "kind", cfg.potential, POTENTIALS),
        ("run", "function", cfg.function, FUNCTIONS),
    ]
    for sec, key, value, allowed in choices:
        if value not in allowed:
            fail(sec, key, value, f"must be one of {', '.join(allowed)}")
    finite = [
        ("manifold", "profile_c", cfg.profile_c), ("weight", "c", cfg.weight_c), ("weight", "K", cfg.K),
        ("potential", "value", cfg.potential_value), ("potential", "cap", cfg.potential_cap), ("run", "T", cfg.T),
        ("run", "distance", cfg.distance), ("run", "theta_coefficient", cfg.theta_coefficient),
        ("bounds", "p", cfg.p), ("bounds", "alpha", cfg.alpha), ("bounds", "delta0", cfg.delta0),
    ]
    for sec, key, value in finite:
        if not math.isfinite(value):
            fail(sec, key, value, "must be finite")
    if cfg.n < 2:
        fail("manifold", "n", cfg.n, "must be at least 2")
    if cfg.T <= 0:
        fail("run", "T", cfg.T, "must be positive")
    if cfg.steps < 8:
        fail("run", "steps", cfg.steps, "must be at least 8")
    if cfg.steps % 2:
        fail("run", "steps", cfg.steps, "must be even (the Hessian weights split the path at its midpoint)")
    if cfg.n_paths < 1:
        fail("run", "n_paths", cfg.n_paths, "must be positive")
    if cfg.r_nodes < 2:
        fail("run", "r_nodes", cfg.r_nodes, "must be at least 2")
    if cfg.workers < 1:
        fail("run", "workers", cfg.workers, "must be at least 1")
    if cfg.seed < 0:
        fail("run", "seed", cfg.seed, "must be non-negative")
    if cfg.distance < 0:
        fail("run", "distance", cfg.distance, "must be non-negative")
    if cfg.potential == "clipped" and cfg.potential_cap <= 0:
        fail("potential", "cap", cfg.potential_cap, "must be positive")
    if cfg.task in BOUND_TASKS:
        if cfg.p <= 0:
            fail("bounds", "p", cfg.p, "must be positive")
        if cfg.alpha <= 1:
            fail("bounds", "alpha", cfg.alpha, "must exceed 1")
        if cfg.alpha * cfg.p >= 2:
            fail("bounds", "alpha", cfg.alpha, f"alpha * p = {cfg.alpha * cfg.p:g} must be below 2")
        if cfg.delta0 <= 0:
            fail("bounds", "delta0", cfg.delta0, "must be positive")
    if cfg.manifold == "sphere" and (cfg.weight != "zero" or cfg.task in ("kernel", "grad-kernel", "hess-kernel",
                                                                          "log-hess", "bounds-suite")):
        fail("manifold", "kind", cfg.manifold, "the sphere has no pole; weights and kernel tasks need one")
    if cfg.task == "log-hess" and cfg.potential != "none":
        fail("potential", "kind", cfg.potential, "log-hess is defined without a potential")
    if cfg.task == "hess-fk" and cfg.potential == "none":
        fail("potential", "kind", cfg.potential, "hess-fk needs a potential")
    # the correction quadrature only runs when a potential is present
    if cfg.potential != "none" and cfg.r_nodes > cfg.steps // 2:
        fail("run", "r_nodes", cfg.r_nodes, f"must not exceed steps/2 = {cfg.steps // 2}")


def write_config(cfg: ExperimentConfig) -> str:
    """Serialize to INI text that parses back to an equal configuration."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, entries in cfg.echo().items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in entries.items()}
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
