"""Parameters, phase-modulation schedules and initial states.

Everything here is expressed in the dimensionless units of the rotating
frame: time is ``tau = omega_c t``, the cantilever coordinate is measured in
units of the zero-point length ``Z_q = sqrt(hbar omega_c / k_c)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants
from scipy.special import gammaln

from .errors import TruncationError, ValidationError

__all__ = [
    "SimParams",
    "Segment",
    "PhaseSchedule",
    "PhysicalParams",
    "SpinorState",
    "AdiabaticityReport",
    "dimensionless_from_physical",
    "phase_rate",
    "phase_accel",
    "coherent_amplitudes",
    "required_basis",
    "spinor_from_bloch",
    "coherent_spinor",
    "schedule_from_rows",
    "effective_field",
    "field_direction",
    "field_angle",
    "adiabaticity_check",
    "standard_schedule",
    "STANDARD_PARAMS",
]

HIGH_TEMPERATURE_MIN_D = 5.0
TRUNCATION_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SimParams:
    """Dimensionless constants of the cantilever-spin model.

    Parameters
    ----------
    eta : float
        Spin-cantilever coupling.
    epsilon : float
        Amplitude of the rf field in units of the cantilever frequency.
    beta : float
        Inverse quality factor ``1/Q``.
    bigD : float
        Thermal parameter ``k_B T / (hbar omega_c)``.
    n_basis : int
        Number of oscillator eigenfunctions kept, ``u_0 .. u_{N-1}``.
    strict_high_temperature : bool
        Raise instead of warn when ``beta > 0`` and ``bigD`` is too small
        for the high-temperature equation to be meaningful.
    """

    eta: float
    epsilon: float
    beta: float = 0.0
    bigD: float = 0.0
    n_basis: int = 64
    strict_high_temperature: bool = False

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValidationError("eta", "must be >= 0")
        if not self.epsilon >= 0:
            raise ValidationError("epsilon", "must be >= 0")
        if not self.beta >= 0:
            raise ValidationError("beta", "must be >= 0")
        if not self.bigD >= 0:
            raise ValidationError("bigD", "must be >= 0")
        if int(self.n_basis) != self.n_basis or self.n_basis < 2:
            raise ValidationError("n_basis", "must be an integer >= 2")
        if self.beta > 0 and self.bigD < HIGH_TEMPERATURE_MIN_D:
            msg = (f"bigD={self.bigD} is not >> 1; the high-temperature "
                   "master equation is outside its validity range")
            if self.strict_high_temperature:
                raise ValidationError("bigD", msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)

    @property
    def high_temperature_valid(self) -> bool:
        return self.beta == 0 or self.bigD >= HIGH_TEMPERATURE_MIN_D

    def replace(self, **changes) -> "SimParams":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return SimParams(**values)

    def as_array(self) -> np.ndarray:
        """Packed ``[eta, epsilon, beta, bigD]`` used by the compiled kernels."""
        return np.array([self.eta, self.epsilon, self.beta, self.bigD])


# ---------------------------------------------------------------------------
# phase modulation


@dataclass(frozen=True)
class Segment:
    """One analytic piece of the phase rate on ``(start, stop]``.

    ``phidot(tau) = offset + slope*s + amplitude*sin(omega*s + phase)`` with
    ``s = tau - start``.  Linear, constant and sinusoidal sweeps are all
    special cases.
    """

    start: float
    stop: float
    offset: float = 0.0
    slope: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if not self.stop > self.start:
            raise ValidationError("schedule", f"empty segment {self.start}..{self.stop}")

    def rate(self, tau):
        s = tau - self.start
        return self.offset + self.slope * s + self.amplitude * np.sin(self.omega * s + self.phase)

    def accel(self, tau):
        s = tau - self.start
        return self.slope + self.amplitude * self.omega * np.cos(self.omega * s + self.phase)

    def row(self) -> list[float]:
        return [self.start, self.stop, self.offset, self.slope,
                self.amplitude, self.omega, self.phase]

    def scaled(self, factor: float) -> "Segment":
        return Segment(self.start, self.stop, factor * self.offset, factor * self.slope,
                       factor * self.amplitude, self.omega, self.phase)


@dataclass(frozen=True)
class PhaseSchedule:
    """Piecewise-analytic frequency modulation ``d(phi)/d(tau)``.

    Segments must be contiguous and start at ``tau = 0``; the last one is
    extended to infinity when evaluated beyond its end.
    """

    segments: tuple[Segment, ...]
    name: str = "custom"

    def __post_init__(self):
        if not self.segments:
            raise ValidationError("schedule", "needs at least one segment")
        if self.segments[0].start != 0:
            raise ValidationError("schedule", "first segment must start at tau=0")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.stop != b.start:
                raise ValidationError("schedule", f"gap between segments at tau={a.stop}")

    def _segment(self, tau: float) -> Segment:
        for seg in self.segments:
            if tau <= seg.stop:
                return seg
        return self.segments[-1]

    def rate(self, tau: float) -> float:
        return float(self._segment(tau).rate(tau))

    def accel(self, tau: float) -> float:
        return float(self._segment(tau).accel(tau))

    def scaled(self, factor: float) -> "PhaseSchedule":
        return PhaseSchedule(tuple(s.scaled(factor) for s in self.segments),
                             name=f"{self.name}*{factor:g}")

    def breakpoints(self) -> list[float]:
        return [s.stop for s in self.segments[:-1]]

    def as_array(self) -> np.ndarray:
        """Segment table for the compiled kernels, last stop set to +inf."""
        table = np.array([s.row() for s in self.segments], dtype=float)
        table[-1, 1] = np.inf
        return table


def standard_schedule() -> PhaseSchedule:
    """Linear sweep from -6000 to 0 over 20 time units, then 1000 sin(tau-20)."""
    return PhaseSchedule(
        (Segment(0.0, 20.0, offset=-6000.0, slope=300.0),
         Segment(20.0, math.inf, amplitude=1000.0, omega=1.0)),
        name="standard",
    )


STANDARD_PARAMS = dict(eta=0.3, epsilon=400.0)


def phase_rate(schedule: PhaseSchedule, tau: float) -> float:
    if tau < 0:
        raise ValidationError("tau", "must be >= 0")
    return schedule.rate(tau)


def phase_accel(schedule: PhaseSchedule, tau: float) -> float:
    if tau < 0:
        raise ValidationError("tau", "must be >= 0")
    return schedule.accel(tau)


# ---------------------------------------------------------------------------
# physical units


@dataclass(frozen=True)
class PhysicalParams:
    """Laboratory quantities in SI units."""

    omega_c: float  # rad/s
    k_c: float  # N/m
    B1: float  # T
    gamma: float  # rad/(s T)
    g: float  # dimensionless field-gradient factor entering the force
    F: float  # N
    T: float  # K

    def validate(self, allow_zero=("B1", "F")):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if name in allow_zero and value == 0:
                continue
            if not value > 0:
                raise ValidationError(name, "must be strictly positive")


def dimensionless_from_physical(p: PhysicalParams, beta: float = 0.0,
                                n_basis: int = 64) -> SimParams:
    """Convert SI parameters to the dimensionless model.

    ``beta = 1/Q`` is not derivable from the other inputs and is passed
    through.  A zero force or zero rf field is accepted so the limiting cases
    can be formed.
    """
    p.validate()
    hbar = constants.hbar
    z_q = math.sqrt(hbar * p.omega_c / p.k_c)
    f_q = p.k_c * z_q
    eta = p.g * p.F / (2.0 * f_q)
    epsilon = p.gamma * p.B1 / p.omega_c
    bigD = constants.k * p.T / (hbar * p.omega_c)
    return SimParams(eta=eta, epsilon=epsilon, beta=beta, bigD=bigD, n_basis=n_basis)


# ---------------------------------------------------------------------------
# states


@dataclass
class SpinorState:
    """Fock amplitudes of the two spin components at time ``tau``."""

    a: np.ndarray
    b: np.ndarray
    tau: float = 0.0
    truncation_threshold: float = TRUNCATION_THRESHOLD

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex)
        self.b = np.asarray(self.b, dtype=complex)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValidationError("state", "a and b must be 1-D of equal length")

    @property
    def n_basis(self) -> int:
        return self.a.size

    @property
    def tail(self) -> float:
        return float(abs(self.a[-1]) ** 2 + abs(self.b[-1]) ** 2)

    @property
    def truncation_valid(self) -> bool:
        return self.tail < self.truncation_threshold

    def norm(self) -> float:
        return float(np.vdot(self.a, self.a).real + np.vdot(self.b, self.b).real)

    def packed(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    @classmethod
    def from_packed(cls, y, tau=0.0) -> "SpinorState":
        n = y.size // 2
        return cls(y[:n].copy(), y[n:].copy(), tau)

    def copy(self) -> "SpinorState":
        return SpinorState(self.a.copy(), self.b.copy(), self.tau, self.truncation_threshold)


def _coherent_log_amplitudes(alpha: complex, n: int) -> np.ndarray:
    k = np.arange(n)
    r = abs(alpha)
    if r == 0:
        out = np.zeros(n, dtype=complex)
        out[0] = 1.0
        return out
    logmag = k * math.log(r) - 0.5 * gammaln(k + 1) - 0.5 * r * r
    return np.exp(logmag + 1j * k * np.angle(alpha))


def required_basis(alpha: complex, tol: float = TRUNCATION_THRESHOLD) -> int:
    """Smallest basis size whose coherent-state norm deficit is below ``tol``."""
    r2 = abs(alpha) ** 2
    upper = int(r2 + 12 * math.sqrt(r2) + 40)
    probs = np.abs(_coherent_log_amplitudes(alpha, upper)) ** 2
    deficit = 1.0 - np.cumsum(probs)
    return int(np.argmax(deficit < tol)) + 1


def coherent_amplitudes(alpha: complex, n_basis: int,
                        tol: float = TRUNCATION_THRESHOLD) -> np.ndarray:
    """Truncated coherent state ``alpha^n/sqrt(n!) exp(-|alpha|^2/2)``.

    Each amplitude follows from the previous one by the factor
    ``alpha/sqrt(n+1)``; this is evaluated in log form so no factorial or
    underflowing prefactor ever appears.  The truncated vector is
    renormalised to unit length.
    """
    amps = _coherent_log_amplitudes(alpha, n_basis)
    kept = float(np.sum(np.abs(amps) ** 2))
    if kept < 1.0 - tol:
        raise TruncationError(
            f"n_basis={n_basis} keeps only {kept:.10f} of the coherent state "
            f"alpha={alpha}; need n_basis >= {required_basis(alpha, tol)}",
            required=required_basis(alpha, tol),
        )
    return amps / math.sqrt(kept)


def spinor_from_bloch(theta: float, phi: float = 0.0) -> tuple[complex, complex]:
    """Spin-up/down weights of the pure spin pointing at polar ``theta``, azimuth ``phi``."""
    return complex(math.cos(theta / 2)), complex(np.exp(1j * phi) * math.sin(theta / 2))


def coherent_spinor(alpha: complex, n_basis: int, theta: float = 0.0,
                    phi: float = 0.0, tol: float = TRUNCATION_THRESHOLD) -> SpinorState:
    """Product of a coherent cantilever state and a pure spin."""
    amps = coherent_amplitudes(alpha, n_basis, tol)
    up, down = spinor_from_bloch(theta, phi)
    return SpinorState(up * amps, down * amps, 0.0, tol)


# ---------------------------------------------------------------------------
# effective field and adiabaticity


def effective_field(params: SimParams, schedule: PhaseSchedule, tau: float) -> np.ndarray:
    """Rotating-frame field ``(epsilon, 0, -phidot)`` acting on the spin."""
    return np.array([params.epsilon, 0.0, -schedule.rate(tau)])


def field_direction(params: SimParams, schedule: PhaseSchedule, tau: float) -> np.ndarray:
    f = effective_field(params, schedule, tau)
    return f / np.linalg.norm(f)


def field_angle(params: SimParams, schedule: PhaseSchedule, tau: float) -> float:
    """Polar angle of the effective field, measured from +z."""
    return math.atan2(params.epsilon, -schedule.rate(tau))


@dataclass(frozen=True)
class AdiabaticityReport:
    sweep_ratio: float  # max |phi''| / epsilon^2
    back_action_ratio: float  # 2 eta z_extent / epsilon
    threshold: float
    tau_worst: float = field(default=0.0)

    @property
    def sweep_ok(self) -> bool:
        return self.sweep_ratio < self.threshold

    @property
    def back_action_ok(self) -> bool:
        return self.back_action_ratio < self.threshold

    @property
    def passed(self) -> bool:
        return self.sweep_ok and self.back_action_ok


def adiabaticity_check(params: SimParams, schedule: PhaseSchedule, z_extent: float,
                       horizon: float, threshold: float = 0.1,
                       samples: int = 20001) -> AdiabaticityReport:
    """Check the two smallness conditions for cyclic adiabatic inversion.

    The sweep acceleration is maximised on a dense grid that also contains
    every segment boundary (both one-sided limits).
    """
    if not horizon > 0:
        raise ValidationError("horizon", "must be > 0")
    taus = np.linspace(0.0, horizon, samples)
    acc = np.array([schedule.accel(t) for t in taus])
    worst = int(np.argmax(np.abs(acc)))
    best, tau_worst = abs(acc[worst]), float(taus[worst])
    for seg in schedule.segments:
        for t in (seg.start, seg.stop):
            if 0 <= t <= horizon and math.isfinite(t):
                v = abs(seg.accel(t))
                if v > best:
                    best, tau_worst = v, t
    eps = params.epsilon
    return AdiabaticityReport(
        sweep_ratio=best / eps ** 2 if eps > 0 else math.inf,
        back_action_ratio=2.0 * params.eta * abs(z_extent) / eps if eps > 0 else math.inf,
        threshold=threshold,
        tau_worst=tau_worst,
    )


def schedule_from_rows(rows: Sequence[Sequence[float]], name="custom") -> PhaseSchedule:
    return PhaseSchedule(tuple(Segment(*r) for r in rows), name=name)
