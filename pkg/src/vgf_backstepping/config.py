"""Experiment specification: TOML ingestion, validation and overrides.

The file has the sections ``[solid]``, ``[liquid]``, ``[interface]``,
``[trajectory]``, ``[kernel]``, ``[controller]`` and ``[simulation]``; see
``data/gaas_default.toml`` for every key.  Environment variables named
``VGF_<SECTION>_<KEY>`` override single entries after the file is read.
"""
import copy
import hashlib
import json
import os
import re
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ParameterError
from .gevrey import MAX_ORDER, FlatTrajectory, GevreyTransition
from .material import PhaseParams, StefanConfig

__all__ = ["ENV_PREFIX", "ConfigError", "KernelSpec", "ControllerSpec", "SimulationSpec",
           "TrajectorySpec", "ExperimentSpec", "default_text", "load_spec", "parse_spec"]

ENV_PREFIX = "VGF_"


class ConfigError(ParameterError):
    """Invalid configuration; ``key`` and ``line`` locate the problem."""

    def __init__(self, msg, key=None, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{loc}{key + ': ' if key else ''}{msg}")
        self.key = key
        self.path = path
        self.line = line


@dataclass(frozen=True)
class TrajectorySpec:
    y1_start: float = 17.0
    y1_end: float = 17.0
    y2_start: float = 0.2
    y2_end: float = 0.3
    t0: float = 0.0
    duration: float = 90000.0
    omega: float = 1.1
    d_max: int = MAX_ORDER
    order: int = 20

    def build(self):
        y1 = GevreyTransition(self.y1_start, self.y1_end, self.t0, self.duration, self.omega)
        y2 = GevreyTransition(self.y2_start, self.y2_end, self.t0, self.duration, self.omega)
        return FlatTrajectory(y1, y2, self.d_max)


@dataclass(frozen=True)
class KernelSpec:
    n_sigma: int = 80
    delta: float = 0.0
    time_samples: int = 256
    scheme: str = "lower"
    zeta0_rule: str = "exact"


@dataclass(frozen=True)
class ControllerSpec:
    mu: float = -1e-2
    nu: float = 0.0
    frame: str = "moving"


@dataclass(frozen=True)
class SimulationSpec:
    nodes: int = 41
    dt: float = 60.0
    t_end: float = 90000.0
    dgamma0: float = 0.01
    dgamma_dot0: float = -3e-3 / 3600.0
    feedforward_only: bool = False
    profile_every: int = 60


@dataclass(frozen=True)
class ExperimentSpec:
    material: StefanConfig
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    simulation: SimulationSpec = field(default_factory=SimulationSpec)

    def to_dict(self):
        m = self.material
        d = {
            "solid": _phase_dict(m.solid),
            "liquid": _phase_dict(m.liquid),
            "interface": {"melting_temp": m.melting_temp, "melt_density": m.melt_density,
                          "latent_heat": m.latent_heat},
        }
        for name in ("trajectory", "kernel", "controller", "simulation"):
            d[name] = asdict(getattr(self, name))
        return d

    def material_hash(self):
        """Digest of the material data, shared by every module of a run."""
        blob = json.dumps({k: self.to_dict()[k] for k in ("solid", "liquid", "interface")},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _phase_dict(p):
    return {"density": p.density, "specific_heat": p.specific_heat,
            "conductivity": p.conductivity, "boundary": p.boundary_coord}


_PHASE_KEYS = ("density", "specific_heat", "conductivity", "boundary")
_INTERFACE_KEYS = ("melting_temp", "melt_density", "latent_heat")
_SECTIONS = {
    "solid": None, "liquid": None, "interface": None,
    "trajectory": TrajectorySpec, "kernel": KernelSpec,
    "controller": ControllerSpec, "simulation": SimulationSpec,
}
_CHOICES = {("kernel", "scheme"): ("lower", "trapezoidal"),
            ("kernel", "zeta0_rule"): ("exact", "paper"),
            ("controller", "frame"): ("moving", "fixed")}


def default_text():
    """Text of the shipped default configuration."""
    return resources.files(__package__).joinpath("data/gaas_default.toml").read_text()


def _line_of(text, section, key):
    """1-based line of ``key`` inside ``[section]``, or None."""
    if text is None:
        return None
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _coerce(value, template, where):
    if isinstance(template, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        if not isinstance(value, bool):
            raise ValueError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(template, int):
        if isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        return int(value) if isinstance(value, (int, str)) else _bad(value, "an integer")
    if isinstance(template, float):
        if isinstance(value, bool):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        return value
    raise ValueError(f"unsupported value for {where}")


def _bad(value, what):
    raise ValueError(f"expected {what}, got {value!r}")


def _env_overrides(tree, environ):
    tree = copy.deepcopy(tree)
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for section in _SECTIONS:
            if rest.startswith(section + "_"):
                tree.setdefault(section, {})[rest[len(section) + 1:]] = raw
                break
    return tree


def parse_spec(text, path="<string>", environ=None):
    """Parse and validate a TOML specification.

    Missing keys fall back to the shipped defaults; unknown keys are errors.
    """
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", path=path,
                          line=int(m.group(1)) if m else None) from exc
    base = tomllib.loads(default_text())
    env_tree = _env_overrides({}, os.environ if environ is None else environ)

    def fail(msg, section, key=None):
        line = _line_of(text, section, key)
        raise ConfigError(msg, key=f"{section}.{key}" if key else section, path=path, line=line)

    for section, entries in tree.items():
        if section not in _SECTIONS:
            fail("unknown section", section)
        if not isinstance(entries, dict):
            fail("must be a table", section)
    merged = {}
    for section in _SECTIONS:
        merged[section] = dict(base.get(section, {}))
        merged[section].update(tree.get(section, {}))
        merged[section].update(env_tree.get(section, {}))

    def number(section, key):
        value = merged[section].get(key)
        try:
            return _coerce(value, 0.0, f"{section}.{key}")
        except (TypeError, ValueError) as exc:
            fail(str(exc), section, key)

    phases = {}
    for phase, orient in (("solid", -1), ("liquid", 1)):
        for key in merged[phase]:
            if key not in _PHASE_KEYS:
                fail("unknown key", phase, key)
        vals = {k: number(phase, k) for k in _PHASE_KEYS}
        for k in ("density", "specific_heat", "conductivity"):
            if not vals[k] > 0:
                fail(f"must be positive, got {vals[k]}", phase, k)
        phases[phase] = PhaseParams(vals["density"], vals["specific_heat"], vals["conductivity"],
                                    orient, vals["boundary"])
    for key in merged["interface"]:
        if key not in _INTERFACE_KEYS:
            fail("unknown key", "interface", key)
    iv = {k: number("interface", k) for k in _INTERFACE_KEYS}
    for k, v in iv.items():
        if not v > 0:
            fail(f"must be positive, got {v}", "interface", k)
    if not phases["solid"].boundary_coord < phases["liquid"].boundary_coord:
        fail("liquid boundary must lie above the solid boundary", "liquid", "boundary")
    material = StefanConfig(phases["solid"], phases["liquid"], **iv)

    specs = {}
    for section, cls in _SECTIONS.items():
        if cls is None:
            continue
        defaults = asdict(cls())
        kwargs = {}
        for key, value in merged[section].items():
            if key not in defaults:
                fail("unknown key", section, key)
            try:
                kwargs[key] = _coerce(value, defaults[key], f"{section}.{key}")
            except (TypeError, ValueError) as exc:
                fail(str(exc), section, key)
            choices = _CHOICES.get((section, key))
            if choices and kwargs[key] not in choices:
                fail(f"must be one of {choices}, got {kwargs[key]!r}", section, key)
        specs[section] = cls(**kwargs)

    tr, kn, ct, sm = specs["trajectory"], specs["kernel"], specs["controller"], specs["simulation"]
    checks = [
        (tr.duration > 0, "trajectory", "duration", "must be positive"),
        (tr.omega >= 1.0, "trajectory", "omega", "must be >= 1"),
        (0 <= tr.d_max <= MAX_ORDER, "trajectory", "d_max", f"must lie in [0, {MAX_ORDER}]"),
        (tr.order >= 2, "trajectory", "order", "must be >= 2"),
        (kn.n_sigma >= 1, "kernel", "n_sigma", "must be >= 1"),
        (kn.time_samples >= 1, "kernel", "time_samples", "must be >= 1"),
        (ct.mu <= 0, "controller", "mu", "must be <= 0"),
        (ct.nu <= 0, "controller", "nu", "must be <= 0"),
        (sm.nodes >= 5, "simulation", "nodes", "must be >= 5"),
        (sm.dt > 0, "simulation", "dt", "must be positive"),
        (sm.t_end > 0, "simulation", "t_end", "must be positive"),
        (sm.profile_every >= 0, "simulation", "profile_every", "must be >= 0"),
    ]
    for ok, section, key, msg in checks:
        if not ok:
            fail(msg, section, key)
    lo, hi = material.domain
    for key, y in (("y2_start", tr.y2_start), ("y2_end", tr.y2_end)):
        if not lo < y < hi:
            fail(f"interface position {y} outside the crucible ({lo}, {hi})", "trajectory", key)
    if not lo < tr.y2_start + sm.dgamma0 < hi:
        fail("initial interface offset leaves the crucible", "simulation", "dgamma0")
    if kn.delta < 0:
        fail("must be >= 0", "kernel", "delta")
    if kn.delta > 0:
        # an explicit step overrides n_sigma and must tile the crucible
        ratio = material.extent / kn.delta
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            fail(f"step {kn.delta} does not divide the crucible length {material.extent}",
                 "kernel", "delta")
        kn = replace(kn, n_sigma=int(round(ratio)))
    return ExperimentSpec(material, tr, kn, ct, sm)


def load_spec(path=None, environ=None):
    """Read a specification file, or the shipped default when ``path`` is None."""
    if path is None:
        return parse_spec(default_text(), path="<default>", environ=environ)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_spec(text, path=str(path), environ=environ)
