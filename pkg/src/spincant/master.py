"""Open cantilever-spin dynamics: high-temperature ohmic master equation.

The density matrix is expanded as ``rho_{s s'}(z, z') = sum A^{s s'}_{n m}
u_n(z) u_m(z')`` and the amplitudes obey a fixed 13-point stencil in
``(n, m)`` per spin pair.  The full ``(2, 2, N, N)`` array is propagated;
Hermiticity is monitored rather than imposed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numba as nb
import numpy as np

from .errors import DriftError, PositivityError, TruncationError, ValidationError
from .integrate import IntegratorConfig, Propagator, schedule_rate
from .model import PhaseSchedule, SimParams, SpinorState, TRUNCATION_THRESHOLD
from .schrodinger import _output_times

_jit = dict(nogil=True, cache=True, fastmath=True)

__all__ = [
    "DensityState",
    "DensitySnapshot",
    "DensityTrajectory",
    "initial_density",
    "master_rhs",
    "evolve_density",
    "iter_evolve_density",
    "trace",
    "purity",
    "hermiticity_defect",
    "min_eigenvalue",
    "expectation_z",
    "expectation_pz",
    "expectation_z2",
    "spin_matrix",
    "NEGATIVE_WARN",
    "NEGATIVE_FAIL",
]

NEGATIVE_WARN = -1e-4
NEGATIVE_FAIL = -1e-2

SPIN = (0.5, -0.5)


@dataclass
class DensityState:
    """Amplitudes ``amps[s, s', n, m]``; spin index 0 is +1/2, 1 is -1/2."""

    amps: np.ndarray
    tau: float = 0.0
    truncation_threshold: float = TRUNCATION_THRESHOLD

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=complex)
        a = self.amps
        if a.ndim != 4 or a.shape[:2] != (2, 2) or a.shape[2] != a.shape[3]:
            raise ValidationError("amps", f"expected shape (2, 2, N, N), got {a.shape}")

    @property
    def n_basis(self) -> int:
        return self.amps.shape[-1]

    def matrix(self) -> np.ndarray:
        """Full ``2N x 2N`` matrix with spin as the outer index."""
        n = self.n_basis
        return self.amps.transpose(0, 2, 1, 3).reshape(2 * n, 2 * n)

    @property
    def tail(self) -> float:
        return float(self.amps[0, 0, -1, -1].real + self.amps[1, 1, -1, -1].real)

    @property
    def truncation_valid(self) -> bool:
        return self.tail < self.truncation_threshold

    def copy(self) -> "DensityState":
        return DensityState(self.amps.copy(), self.tau, self.truncation_threshold)


def initial_density(psi: SpinorState) -> DensityState:
    """Pure-state density ``A^{s s'}_{n m} = c^s_n conj(c^{s'}_m)``."""
    c = np.stack([psi.a, psi.b])
    return DensityState(np.einsum("an,bm->abnm", c, c.conj()), psi.tau,
                        psi.truncation_threshold)


def mixed_density(weights, spin=(1.0, 0.0)) -> DensityState:
    """Diagonal oscillator mixture with the spin in the given pure state."""
    w = np.asarray(weights, dtype=float)
    sp = np.asarray(spin, dtype=complex)
    sp = sp / np.linalg.norm(sp)
    return DensityState(np.einsum("a,b,nm->abnm", sp, sp.conj(), np.diag(w)))


# ---------------------------------------------------------------------------
# right-hand side


# The propagated vector stores real and imaginary parts separately, each as
# (2, 2, N + 4, N + 4) blocks with a zero border of width 2.  The border
# removes every boundary test from the stencil, and real arithmetic on
# contiguous rows lets the inner loop vectorize.


def pack(amps: np.ndarray) -> np.ndarray:
    """Flatten ``(2, 2, N, N)`` complex amplitudes into the padded real layout."""
    n = amps.shape[-1]
    y = np.zeros((2, 2, 2, n + 4, n + 4))
    y[0, :, :, 2:n + 2, 2:n + 2] = amps.real
    y[1, :, :, 2:n + 2, 2:n + 2] = amps.imag
    return y.reshape(-1)


def unpack(y: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack`."""
    p = y.reshape(2, 2, 2, n + 4, n + 4)[:, :, :, 2:n + 2, 2:n + 2]
    return p[0] + 1j * p[1]


@nb.njit(**_jit)
def _density_rhs(t, y, out, par, sched, inter):
    """Stencil right-hand side on the padded real layout of :func:`pack`.

    Border entries of ``out`` are never written and must start at zero.
    """
    eta = par[0]
    eps = par[1]
    beta = par[2]
    bigD = par[3]
    M = int(round(math.sqrt(y.size // 8)))
    N = M - 4
    P = y.reshape((2, 2, 2, M, M))
    dP = out.reshape((2, 2, 2, M, M))
    phid = schedule_rate(t, sched)
    db = bigD * beta
    cp = (bigD + 0.5) * beta
    cm = (bigD - 0.5) * beta
    if inter:
        c1, s1 = math.cos(t), -math.sin(t)
        osc = 0.0
    else:
        c1, s1 = 1.0, 0.0
        osc = 1.0
    c2 = c1 * c1 - s1 * s1
    s2 = 2.0 * c1 * s1
    k = np.arange(N).astype(np.float64)
    r = np.sqrt(k)
    r1 = np.sqrt(k + 1.0)
    r2 = np.sqrt(k + 2.0)
    rm1 = np.sqrt(np.maximum(k - 1.0, 0.0))
    lo2 = -0.5 * cm * r * rm1
    hi2 = -0.5 * cp * r1 * r2
    # m-direction coefficient rows (complex, split)
    l2r, l2i = lo2 * c2, lo2 * s2  # P[n, m-2] * lo2[m] e2
    h2r, h2i = hi2 * c2, -hi2 * s2  # P[n, m+2] * hi2[m] e2c
    e2rr, e2ri = r * c2, r * s2  # r[m] e2
    e2cr, e2ci = r1 * c2, -r1 * s2  # r1[m] e2c
    g = eta * math.sqrt(2.0)
    h = 0.5 * eps
    for a in range(2):
        s = 0.5 - a
        for b in range(2):
            sp = 0.5 - b
            fa = 1 - a
            fb = 1 - b
            # gs = i g s, gsp = -i g sp
            gsp = -g * sp
            gs = g * s
            # gsp * r[m] * e1 = i gsp r (c1 + i s1) = gsp r (-s1 + i c1)
            m1r, m1i = -gsp * r * s1, gsp * r * c1
            # gsp * r1[m] * e1c = i gsp r1 (c1 - i s1) = gsp r1 (s1 + i c1)
            p1r, p1i = gsp * r1 * s1, gsp * r1 * c1
            dmr = -db * k
            dmi = osc * k
            d0r = 0.5 * beta - db
            d0i = phid * (sp - s)
            Pr, Pi = P[0, a, b], P[1, a, b]
            Qr, Qi = P[0, a, fb], P[1, a, fb]
            Sr, Si = P[0, fa, b], P[1, fa, b]
            Or, Oi = dP[0, a, b], dP[1, a, b]
            for n in range(N):
                pn = n + 2
                dnr = d0r - n * db
                dni = d0i - osc * n
                # gs r[n] e1c = i gs r (c1 - i s1) = gs r (s1 + i c1)
                unr, uni = gs * r[n] * s1, gs * r[n] * c1  # P[n-1]
                # gs r1[n] e1 = gs r1 (-s1 + i c1)
                dnr1, dni1 = -gs * r1[n] * s1, gs * r1[n] * c1  # P[n+1]
                lnr, lni = lo2[n] * c2, -lo2[n] * s2  # P[n-2] e2c
                hnr, hni = hi2[n] * c2, hi2[n] * s2  # P[n+2] e2
                x1 = db * r1[n]   # P[n+1, m-1] * (r[m] e2)
                x0 = db * r[n]    # P[n-1, m+1] * (r1[m] e2c)
                cpn = cp * r1[n]
                cmn = cm * r[n]
                p0r, p0i = Pr[pn], Pi[pn]
                pur, pui = Pr[pn - 1], Pi[pn - 1]
                pdr, pdi = Pr[pn + 1], Pi[pn + 1]
                pu2r, pu2i = Pr[pn - 2], Pi[pn - 2]
                pd2r, pd2i = Pr[pn + 2], Pi[pn + 2]
                qr, qi, sr, si = Qr[pn], Qi[pn], Sr[pn], Si[pn]
                orow, irow = Or[pn], Oi[pn]
                for m in range(N):
                    pm = m + 2
                    cr = dnr + dmr[m]
                    ci = dni + dmi[m]
                    ar, ai = p0r[pm], p0i[pm]
                    re = cr * ar - ci * ai
                    im = cr * ai + ci * ar
                    ar, ai = p0r[pm - 1], p0i[pm - 1]
                    re += m1r[m] * ar - m1i[m] * ai
                    im += m1r[m] * ai + m1i[m] * ar
                    ar, ai = p0r[pm + 1], p0i[pm + 1]
                    re += p1r[m] * ar - p1i[m] * ai
                    im += p1r[m] * ai + p1i[m] * ar
                    ar, ai = p0r[pm - 2], p0i[pm - 2]
                    re += l2r[m] * ar - l2i[m] * ai
                    im += l2r[m] * ai + l2i[m] * ar
                    ar, ai = p0r[pm + 2], p0i[pm + 2]
                    re += h2r[m] * ar - h2i[m] * ai
                    im += h2r[m] * ai + h2i[m] * ar
                    ar, ai = pur[pm], pui[pm]
                    re += unr * ar - uni * ai
                    im += unr * ai + uni * ar
                    ar, ai = pdr[pm], pdi[pm]
                    re += dnr1 * ar - dni1 * ai
                    im += dnr1 * ai + dni1 * ar
                    ar, ai = pu2r[pm], pu2i[pm]
                    re += lnr * ar - lni * ai
                    im += lnr * ai + lni * ar
                    ar, ai = pd2r[pm], pd2i[pm]
                    re += hnr * ar - hni * ai
                    im += hnr * ai + hni * ar
                    ar, ai = pdr[pm - 1], pdi[pm - 1]
                    wr, wi = x1 * e2rr[m], x1 * e2ri[m]
                    re += wr * ar - wi * ai
                    im += wr * ai + wi * ar
                    ar, ai = pur[pm + 1], pui[pm + 1]
                    wr, wi = x0 * e2cr[m], x0 * e2ci[m]
                    re += wr * ar - wi * ai
                    im += wr * ai + wi * ar
                    w = cpn * r1[m]
                    re += w * pdr[pm + 1]
                    im += w * pdi[pm + 1]
                    w = cmn * r[m]
                    re += w * pur[pm - 1]
                    im += w * pui[pm - 1]
                    re += h * (qi[pm] - si[pm])
                    im -= h * (qr[pm] - sr[pm])
                    orow[pm] = re
                    irow[pm] = im


def master_rhs(rho: DensityState, tau: float, params: SimParams,
               schedule: PhaseSchedule) -> np.ndarray:
    """Time derivative of the amplitudes, shape ``(2, 2, N, N)``."""
    y = pack(rho.amps)
    out = np.zeros_like(y)
    _density_rhs(float(tau), y, out, params.as_array(), schedule.as_array(), False)
    return unpack(out, rho.n_basis)


def to_interaction(amps: np.ndarray, tau: float) -> np.ndarray:
    n = amps.shape[-1]
    ph = np.exp(1j * np.arange(n) * tau)
    return amps * ph[:, None] * ph.conj()[None, :]


def from_interaction(amps: np.ndarray, tau: float) -> np.ndarray:
    return to_interaction(amps, -tau)


# ---------------------------------------------------------------------------
# diagnostics


def trace(rho: DensityState) -> float:
    a = rho.amps
    return float(np.trace(a[0, 0]).real + np.trace(a[1, 1]).real)


def purity(rho: DensityState) -> float:
    """``Tr rho^2``, using the Hermitian part of the amplitudes."""
    m = rho.matrix()
    h = 0.5 * (m + m.conj().T)
    return float(np.sum(np.abs(h) ** 2))


def hermiticity_defect(rho: DensityState) -> float:
    a = rho.amps
    return float(np.max(np.abs(a - a.transpose(1, 0, 3, 2).conj())))


def min_eigenvalue(rho: DensityState) -> float:
    m = rho.matrix()
    return float(np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0])


def expectation_z(rho: DensityState) -> float:
    n = rho.n_basis
    w = np.sqrt(np.arange(1, n))
    lower = 0j
    for s in range(2):
        lower += np.sum(w * np.diagonal(rho.amps[s, s], offset=-1))
    return math.sqrt(2.0) * lower.real


def expectation_pz(rho: DensityState) -> float:
    n = rho.n_basis
    w = np.sqrt(np.arange(1, n))
    upper = 0j
    for s in range(2):
        upper += np.sum(w * np.diagonal(rho.amps[s, s], offset=1))
    return -math.sqrt(2.0) * upper.imag


def expectation_z2(rho: DensityState) -> float:
    n = rho.n_basis
    k = np.arange(n)
    total = 0.0
    for s in range(2):
        blk = rho.amps[s, s]
        total += float(np.sum((k + 0.5) * np.diagonal(blk).real))
        total += float(np.sum(np.sqrt((k[:-2] + 1) * (k[:-2] + 2))
                              * np.diagonal(blk, offset=-2)).real)
    return total


def mean_occupation(rho: DensityState) -> float:
    k = np.arange(rho.n_basis)
    return float(np.sum(k * (np.diagonal(rho.amps[0, 0]).real
                             + np.diagonal(rho.amps[1, 1]).real)))


def spin_matrix(rho: DensityState) -> np.ndarray:
    return np.einsum("abnn->ab", rho.amps)


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class DensitySnapshot:
    state: DensityState | None
    tau: float
    trace: float
    purity: float
    herm_defect: float
    z_mean: float
    min_eig: float = math.nan

    @classmethod
    def of(cls, rho: DensityState, eig: bool = False) -> "DensitySnapshot":
        return cls(rho, rho.tau, trace(rho), purity(rho), hermiticity_defect(rho),
                   expectation_z(rho), min_eigenvalue(rho) if eig else math.nan)


@dataclass
class DensityTrajectory:
    snapshots: list[DensitySnapshot]
    steps: int = 0
    rejected: int = 0
    max_trace_drift: float = 0.0
    max_herm_defect: float = 0.0

    @property
    def final(self) -> DensityState:
        return self.snapshots[-1].state

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.tau for s in self.snapshots])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots])


def iter_evolve_density(rho: DensityState, tau_end: float, params: SimParams,
                        schedule: PhaseSchedule, cfg: IntegratorConfig | None = None,
                        cadence: float = 0.05, check_drift: bool = True,
                        check_positivity: bool = False, check_truncation: bool = False,
                        prop_out: list | None = None) -> Iterator[DensityState]:
    """Yield the density matrix at each output time, starting with ``rho``."""
    cfg = cfg or IntegratorConfig()
    if rho.n_basis != params.n_basis:
        raise ValidationError("n_basis", "state and params disagree on the basis size")
    prop = Propagator(_density_rhs, params, schedule, cfg)
    if prop_out is not None:
        prop_out.append(prop)
    tr0 = trace(rho)
    limit = max(1e-6, 10 * cfg.tolerance)
    amps = rho.amps
    if cfg.interaction:
        amps = to_interaction(amps, rho.tau)
    y = pack(amps)
    n = rho.n_basis
    t = rho.tau
    yield rho.copy()
    for t_next in _output_times(rho.tau, tau_end, cadence):
        prop.advance(y, t, t_next)
        t = float(t_next)
        a = unpack(y, n)
        if cfg.interaction:
            a = from_interaction(a, t)
        out = DensityState(a, t, rho.truncation_threshold)
        drift = abs(trace(out) - tr0)
        if check_drift and cfg.adaptive and drift > limit:
            raise DriftError(f"trace drifted by {drift:.3e} at tau={t:.4f}")
        if check_truncation and not out.truncation_valid:
            raise TruncationError(
                f"tail occupation {out.tail:.3e} at tau={t:.4f}; increase n_basis")
        if check_positivity:
            lam = min_eigenvalue(out)
            if lam < NEGATIVE_FAIL:
                raise PositivityError(f"eigenvalue {lam:.3e} at tau={t:.4f}")
            if lam < NEGATIVE_WARN:
                warnings.warn(f"density matrix eigenvalue {lam:.3e} at tau={t:.4f}",
                              RuntimeWarning, stacklevel=2)
        yield out


def evolve_density(rho: DensityState, tau_end: float, params: SimParams,
                   schedule: PhaseSchedule, cfg: IntegratorConfig | None = None,
                   cadence: float = 0.05, keep_states: bool = True,
                   **kwargs) -> DensityTrajectory:
    """Integrate the master equation and collect diagnostics at each output time."""
    props: list = []
    snaps = []
    tr0 = trace(rho)
    drift = herm = 0.0
    last = rho
    for r in iter_evolve_density(rho, tau_end, params, schedule, cfg, cadence,
                                 prop_out=props, **kwargs):
        snap = DensitySnapshot.of(r)
        drift = max(drift, abs(snap.trace - tr0))
        herm = max(herm, snap.herm_defect)
        if not keep_states:
            snap.state = None
        snaps.append(snap)
        last = r
    snaps[-1].state = last
    prop = props[0]
    return DensityTrajectory(snaps, prop.steps, prop.rejected, drift, herm)
