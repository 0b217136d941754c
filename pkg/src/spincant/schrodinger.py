"""Closed cantilever-spin dynamics in the oscillator eigenbasis.

The Hamiltonian in the rotating frame is

    H = (p^2 + z^2)/2 + phidot(tau) S_z - epsilon S_x - 2 eta z S_z

and with ``z = (a + a^dagger)/sqrt(2)`` it couples each Fock amplitude only
to its two neighbours and to the opposite spin component, so the
right-hand side is a banded, matrix-free O(N) stencil.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numba as nb
import numpy as np

from .errors import DriftError, TruncationError, ValidationError
from .integrate import IntegratorConfig, Propagator, schedule_rate
from .model import PhaseSchedule, SimParams, SpinorState

_jit = dict(nogil=True, cache=True)

__all__ = [
    "RhsWorkspace",
    "Snapshot",
    "Trajectory",
    "schrodinger_rhs",
    "evolve",
    "iter_evolve",
    "expectation_z",
    "expectation_pz",
    "norm",
    "energy",
    "spin_matrix",
    "bloch_vector",
    "to_interaction",
    "from_interaction",
    "ConvergenceReport",
    "truncation_convergence",
]


@nb.njit(**_jit)
def _spinor_rhs(t, y, out, par, sched, inter):
    eta = par[0]
    eps = par[1]
    n_basis = y.size // 2
    phid = schedule_rate(t, sched)
    g = eta / math.sqrt(2.0)
    half_eps = 0.5 * eps
    if inter:
        w_up = complex(math.cos(t), -math.sin(t))  # multiplies c_{n+1}
        w_dn = complex(math.cos(t), math.sin(t))  # multiplies c_{n-1}
    else:
        w_up = 1.0 + 0j
        w_dn = 1.0 + 0j
    for n in range(n_basis):
        a = y[n]
        b = y[n_basis + n]
        hop_a = 0j
        hop_b = 0j
        if n > 0:
            sq = math.sqrt(n)
            hop_a += sq * w_dn * y[n - 1]
            hop_b += sq * w_dn * y[n_basis + n - 1]
        if n < n_basis - 1:
            sq = math.sqrt(n + 1)
            hop_a += sq * w_up * y[n + 1]
            hop_b += sq * w_up * y[n_basis + n + 1]
        if inter:
            diag = 0.0
        else:
            diag = n + 0.5
        ha = (diag + 0.5 * phid) * a - g * hop_a - half_eps * b
        hb = (diag - 0.5 * phid) * b + g * hop_b - half_eps * a
        out[n] = complex(ha.imag, -ha.real)  # -i * ha
        out[n_basis + n] = complex(hb.imag, -hb.real)


@dataclass
class RhsWorkspace:
    """Scratch buffers for repeated right-hand-side evaluation."""

    n_basis: int
    packed: np.ndarray = field(init=False)
    out: np.ndarray = field(init=False)

    def __post_init__(self):
        self.packed = np.empty(2 * self.n_basis, dtype=complex)
        self.out = np.empty(2 * self.n_basis, dtype=complex)


def schrodinger_rhs(state: SpinorState, tau: float, params: SimParams,
                    schedule: PhaseSchedule, workspace: RhsWorkspace | None = None):
    """Time derivative ``(dA/dtau, dB/dtau)`` of the spinor amplitudes.

    Neighbours outside ``0..N-1`` are treated as zero.
    """
    ws = workspace if workspace is not None else RhsWorkspace(state.n_basis)
    if ws.n_basis != state.n_basis:
        raise ValidationError("workspace", "size does not match the state")
    ws.packed[: state.n_basis] = state.a
    ws.packed[state.n_basis:] = state.b
    _spinor_rhs(float(tau), ws.packed, ws.out, params.as_array(),
                schedule.as_array(), False)
    n = state.n_basis
    return ws.out[:n].copy(), ws.out[n:].copy()


def _phases(n_basis: int, tau: float) -> np.ndarray:
    return np.exp(1j * (np.arange(n_basis) + 0.5) * tau)


def to_interaction(y: np.ndarray, tau: float) -> np.ndarray:
    n = y.size // 2
    ph = _phases(n, tau)
    return np.concatenate([y[:n] * ph, y[n:] * ph])


def from_interaction(y: np.ndarray, tau: float) -> np.ndarray:
    n = y.size // 2
    ph = np.conj(_phases(n, tau))
    return np.concatenate([y[:n] * ph, y[n:] * ph])


# ---------------------------------------------------------------------------
# observables


def _lowering(c: np.ndarray) -> complex:
    """<a> contribution of one spin component."""
    return complex(np.vdot(c[:-1], np.sqrt(np.arange(1, c.size)) * c[1:]))


def expectation_z(state: SpinorState) -> float:
    return math.sqrt(2.0) * (_lowering(state.a) + _lowering(state.b)).real


def expectation_pz(state: SpinorState) -> float:
    return math.sqrt(2.0) * (_lowering(state.a) + _lowering(state.b)).imag


def norm(state: SpinorState) -> float:
    return state.norm()


def expectation_z2(state: SpinorState) -> float:
    n = np.arange(state.n_basis)
    total = 0.0
    for c in (state.a, state.b):
        diag = float(np.sum((n + 0.5) * np.abs(c) ** 2))
        a2 = complex(np.vdot(c[:-2], np.sqrt((n[:-2] + 1) * (n[:-2] + 2)) * c[2:]))
        total += diag + a2.real
    return total


def energy(state: SpinorState, params: SimParams, schedule: PhaseSchedule) -> float:
    """Expectation of the full Hamiltonian at ``state.tau``."""
    da, db = schrodinger_rhs(state, state.tau, params, schedule)
    # H psi = i dpsi/dtau
    return float((np.vdot(state.a, 1j * da) + np.vdot(state.b, 1j * db)).real)


def spin_matrix(state: SpinorState) -> np.ndarray:
    """Reduced 2x2 spin density matrix (cantilever traced out), order (up, down)."""
    uu = np.vdot(state.a, state.a).real
    dd = np.vdot(state.b, state.b).real
    ud = np.vdot(state.b, state.a)  # sum A_n conj(B_n)
    return np.array([[uu, ud], [np.conj(ud), dd]])


def bloch_vector(rho2: np.ndarray) -> np.ndarray:
    """``(2 Re rho_ud, 2 Im rho_du, rho_uu - rho_dd)`` of a 2x2 spin matrix."""
    return np.array([2 * rho2[0, 1].real, 2 * rho2[1, 0].imag,
                     (rho2[0, 0] - rho2[1, 1]).real])


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class Snapshot:
    state: SpinorState
    norm: float
    z_mean: float
    pz_mean: float
    bloch: np.ndarray

    @classmethod
    def of(cls, state: SpinorState) -> "Snapshot":
        rho2 = spin_matrix(state)
        nrm = float(np.trace(rho2).real)
        return cls(state, nrm, expectation_z(state), expectation_pz(state),
                   bloch_vector(rho2) / nrm)

    def row(self) -> list[float]:
        return [self.state.tau, self.norm, self.z_mean, self.pz_mean, *self.bloch]


@dataclass
class Trajectory:
    snapshots: list[Snapshot]
    steps: int = 0
    rejected: int = 0
    max_norm_drift: float = 0.0
    max_tail: float = 0.0

    @property
    def final(self) -> SpinorState:
        return self.snapshots[-1].state

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.state.tau for s in self.snapshots])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots])


def _output_times(tau0: float, tau_end: float, cadence: float) -> np.ndarray:
    if not tau_end > tau0:
        raise ValidationError("tau_end", f"must exceed the current time {tau0}")
    if not cadence > 0:
        raise ValidationError("cadence", "must be > 0")
    k = int(math.floor((tau_end - tau0) / cadence + 1e-9))
    times = tau0 + cadence * np.arange(1, k + 1)
    if times.size == 0 or times[-1] < tau_end - 1e-12:
        times = np.append(times, tau_end)
    return times


def iter_evolve(state: SpinorState, tau_end: float, params: SimParams,
                schedule: PhaseSchedule, cfg: IntegratorConfig | None = None,
                cadence: float = 0.05, check_drift: bool = True,
                check_truncation: bool = False,
                prop_out: list | None = None) -> Iterator[SpinorState]:
    """Yield the evolved state at every output time, starting with ``state``.

    Raises ``DriftError`` once the norm moves more than ten times the
    integrator tolerance (adaptive methods only).
    """
    cfg = cfg or IntegratorConfig()
    if state.n_basis != params.n_basis:
        raise ValidationError("n_basis", "state and params disagree on the basis size")
    prop = Propagator(_spinor_rhs, params, schedule, cfg)
    if prop_out is not None:
        prop_out.append(prop)
    norm0 = state.norm()
    # absolute floor 1e-6, loosened only for coarse tolerances
    limit = max(1e-6, 10 * cfg.tolerance)
    y = state.packed()
    if cfg.interaction:
        y = to_interaction(y, state.tau)
    t = state.tau
    yield state.copy()
    for t_next in _output_times(state.tau, tau_end, cadence):
        prop.advance(y, t, t_next)
        t = float(t_next)
        lab = from_interaction(y, t) if cfg.interaction else y
        out = SpinorState.from_packed(lab, t)
        out.truncation_threshold = state.truncation_threshold
        drift = abs(out.norm() - norm0)
        if check_drift and cfg.adaptive and drift > limit:
            raise DriftError(f"norm drifted by {drift:.3e} at tau={t:.4f}")
        if check_truncation and not out.truncation_valid:
            raise TruncationError(
                f"tail occupation {out.tail:.3e} at tau={t:.4f} exceeds "
                f"{out.truncation_threshold:g}; increase n_basis")
        yield out


def evolve(state: SpinorState, tau_end: float, params: SimParams,
           schedule: PhaseSchedule, cfg: IntegratorConfig | None = None,
           cadence: float = 0.05, keep_states: bool = True, **kwargs) -> Trajectory:
    """Integrate the closed equations to ``tau_end`` and collect snapshots."""
    props: list = []
    snaps = []
    max_drift = 0.0
    max_tail = 0.0
    norm0 = state.norm()
    for s in iter_evolve(state, tau_end, params, schedule, cfg, cadence,
                         prop_out=props, **kwargs):
        snap = Snapshot.of(s)
        max_drift = max(max_drift, abs(snap.norm - norm0))
        max_tail = max(max_tail, s.tail)
        if not keep_states and len(snaps) > 0:
            snap.state = SpinorState(s.a[:0], s.b[:0], s.tau)
        snaps.append(snap)
    if not keep_states:
        snaps[-1].state = s
    prop = props[0]
    return Trajectory(snaps, prop.steps, prop.rejected, max_drift, max_tail)


# ---------------------------------------------------------------------------
# basis-size convergence


@dataclass
class ConvergenceReport:
    basis_sizes: list[int]
    z_deviation: list[float]  # between successive sizes, relative to max |<z>|
    weight_deviation: list[float]
    tolerance: float
    floor: float = 1e-6  # deviations below this are integrator noise


    @property
    def converged(self) -> bool:
        return bool(self.z_deviation) and self.z_deviation[-1] < self.tolerance \
            and (not self.weight_deviation or self.weight_deviation[-1] < self.tolerance)

    @property
    def monotone(self) -> bool:
        d = self.z_deviation
        return all(b <= max(a, self.floor) for a, b in zip(d, d[1:]))


def truncation_convergence(make_state, tau_end: float, params: SimParams,
                           schedule: PhaseSchedule, basis_sizes: Sequence[int],
                           cfg: IntegratorConfig | None = None, cadence: float = 0.05,
                           weights=None, tol: float = 1e-3, mapper=map) -> ConvergenceReport:
    """Repeat one scenario for increasing basis sizes and compare the results.

    ``make_state(n_basis)`` builds the initial state; a basis too small to
    hold it counts as non-converged.  ``weights(state)`` optionally returns
    peak weights of the final state for comparison.  The runs are
    independent; pass e.g. ``executor.map`` as ``mapper`` to overlap them.
    """
    sizes = list(basis_sizes)
    if len(sizes) < 2 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValidationError("basis_sizes", "need at least two increasing sizes")

    def one(n):
        try:
            s0 = make_state(n)
        except TruncationError:
            return None, None
        traj = evolve(s0, tau_end, params.replace(n_basis=n), schedule, cfg, cadence,
                      keep_states=False, check_drift=False)
        final = None if weights is None else np.asarray(weights(traj.final))
        return traj.column("z_mean"), final

    results = list(mapper(one, sizes))
    curves = [r[0] for r in results]
    finals = [r[1] for r in results]
    z_dev, w_dev = [], []
    for i in range(1, len(sizes)):
        a, b = curves[i - 1], curves[i]
        if a is None or b is None:
            z_dev.append(math.inf)
        else:
            scale = max(np.max(np.abs(b)), 1.0)
            z_dev.append(float(np.max(np.abs(a - b)) / scale))
        if weights is not None:
            wa, wb = finals[i - 1], finals[i]
            if wa is None or wb is None or wa.shape != wb.shape:
                w_dev.append(math.inf)
            else:
                w_dev.append(float(np.max(np.abs(wa - wb) / np.maximum(np.abs(wb), 1e-300))))
    return ConvergenceReport(sizes, z_dev, w_dev, tol)
