"""Flat ``key = value`` scenario files.

Blank lines and ``#`` comments are ignored; keys are case-insensitive.  A
minimal closed scenario::

    name = demo
    mode = closed
    eta = 0.3
    epsilon = 40
    z0 = -4
    schedule = standard
    schedule_scale = 0.1
    n_basis = 64
    tau_end = 50

``schedule`` is either ``standard`` or a ``;``-separated list of segments
``start stop offset slope amplitude omega phase``.  The initial cantilever
state is given either by ``z0`` (and optionally ``p0``) or by
``alpha_re``/``alpha_im``; ``z0 = sqrt(2) Re(alpha)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .integrate import IntegratorConfig
from .model import (PhaseSchedule, SimParams, SpinorState, coherent_spinor,
                    standard_schedule, schedule_from_rows)

__all__ = ["Scenario", "parse_config", "load_config", "load_preset", "PRESETS",
           "preset_path"]

PRESETS = ("paper_fig2", "paper_fig4", "scaled_ci")
MODES = ("closed", "open")

_FLOATS = {"eta", "epsilon", "beta", "d", "z0", "p0", "alpha_re", "alpha_im",
           "schedule_scale", "spin_theta", "spin_phi", "tau_end", "cadence",
           "rtol", "atol", "dt", "grid_pad", "memory_limit_mb", "analyze_from",
           "truncation_threshold"}
_INTS = {"n_basis", "grid_points", "snapshots", "max_steps"}
_BOOLS = {"interaction", "check_positivity", "strict_high_temperature"}
_STRINGS = {"name", "mode", "schedule", "method", "coherence_component"}
KNOWN_KEYS = _FLOATS | _INTS | _BOOLS | _STRINGS


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce one run."""

    params: SimParams
    schedule: PhaseSchedule
    alpha: complex
    spin_theta: float = 0.0
    spin_phi: float = 0.0
    tau_end: float = 50.0
    cadence: float = 0.05
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    mode: str = "closed"
    name: str = "scenario"
    grid_points: int | None = None
    grid_pad: float = 8.0
    snapshots: int = 10
    analyze_from: float = 0.0
    memory_limit_mb: float = 2048.0
    check_positivity: bool = False
    coherence_component: str = "hs"
    truncation_threshold: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError("mode", f"must be one of {MODES}")
        if not self.tau_end > 0:
            raise ValidationError("tau_end", "must be > 0")
        if not self.cadence > 0:
            raise ValidationError("cadence", "must be > 0")
        if self.snapshots < 1:
            raise ValidationError("snapshots", "must be >= 1")
        if self.grid_points is not None and self.grid_points < 64:
            raise ValidationError("grid_points", "must be >= 64")

    def initial_state(self) -> SpinorState:
        return coherent_spinor(self.alpha, self.params.n_basis, self.spin_theta,
                               self.spin_phi, tol=self.truncation_threshold)

    @property
    def z0(self) -> float:
        return math.sqrt(2.0) * self.alpha.real

    def density_bytes(self) -> int:
        """Memory of one ``(2, 2, N, N)`` complex density array."""
        n = self.params.n_basis
        return 4 * n * n * 16

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(key, f"not a boolean: {text!r}")


def _parse_schedule(text: str) -> PhaseSchedule:
    t = text.strip()
    if t.lower() == "standard":
        return standard_schedule()
    rows = []
    for chunk in t.split(";"):
        if not chunk.strip():
            continue
        vals = chunk.split()
        if not 2 <= len(vals) <= 7:
            raise ValidationError("schedule", f"bad segment {chunk.strip()!r}")
        try:
            row = [float(v) for v in vals]
        except ValueError as exc:
            raise ValidationError("schedule", str(exc)) from None
        rows.append(row + [0.0] * (7 - len(row)))
    if not rows:
        raise ValidationError("schedule", "empty")
    return schedule_from_rows(rows)


def parse_config(text: str) -> Scenario:
    """Build a :class:`Scenario` from the text of a scenario file."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key not in KNOWN_KEYS:
            raise ValidationError(key, "unknown key")
        if key in raw:
            raise ValidationError(key, "given twice")
        raw[key] = value

    vals: dict = {}
    for key, value in raw.items():
        try:
            if key in _FLOATS:
                vals[key] = float(value)
            elif key in _INTS:
                vals[key] = int(value)
            elif key in _BOOLS:
                vals[key] = _parse_bool(key, value)
            else:
                vals[key] = value
        except ValueError:
            raise ValidationError(key, f"cannot parse {value!r}") from None

    for key in ("eta", "epsilon"):
        if key not in vals:
            raise ValidationError(key, "required")
    if "z0" in vals and ("alpha_re" in vals or "alpha_im" in vals):
        raise ValidationError("z0", "give either z0/p0 or alpha_re/alpha_im")
    if "z0" in vals or "p0" in vals:
        alpha = complex(vals.get("z0", 0.0), vals.get("p0", 0.0)) / math.sqrt(2.0)
    else:
        alpha = complex(vals.get("alpha_re", 0.0), vals.get("alpha_im", 0.0))

    with warnings.catch_warnings():
        # validity of the high-temperature limit is reported once below
        warnings.simplefilter("ignore", RuntimeWarning)
        params = SimParams(eta=vals["eta"], epsilon=vals["epsilon"],
                           beta=vals.get("beta", 0.0), bigD=vals.get("d", 0.0),
                           n_basis=vals.get("n_basis", 64),
                           strict_high_temperature=vals.get("strict_high_temperature", False))
    if not params.high_temperature_valid:
        warnings.warn(f"D={params.bigD} is small for the high-temperature equation",
                      RuntimeWarning, stacklevel=2)

    schedule = _parse_schedule(raw.get("schedule", "standard"))
    if "schedule_scale" in vals:
        schedule = schedule.scaled(vals["schedule_scale"])

    icfg = {k: vals[k] for k in ("method", "rtol", "atol", "dt", "max_steps", "interaction")
            if k in vals}
    integrator = IntegratorConfig(**icfg)

    kwargs = {k: vals[k] for k in ("spin_theta", "spin_phi", "tau_end", "cadence", "mode",
                                   "name", "grid_points", "grid_pad", "snapshots",
                                   "analyze_from", "memory_limit_mb", "check_positivity",
                                   "coherence_component", "truncation_threshold")
              if k in vals}
    return Scenario(params=params, schedule=schedule, alpha=alpha,
                    integrator=integrator, **kwargs)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ValidationError("preset", f"unknown preset {name!r}; have {PRESETS}")
    return Path(str(resources.files("spincant") / "presets" / f"{name}.cfg"))


def load_config(path) -> Scenario:
    """Read a scenario file; a bare preset name is also accepted."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = preset_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ValidationError("config", f"cannot read {path}: {exc}") from None
    return parse_config(text)


def load_preset(name: str) -> Scenario:
    return load_config(preset_path(name))
