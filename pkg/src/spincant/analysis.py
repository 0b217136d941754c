"""Position-space reconstruction and peak analysis.

Fock amplitudes are mapped to wavefunctions and density matrices on a
uniform grid through a table of oscillator eigenfunctions; peaks of the
cantilever distribution are then located, and the spin state carried by
each peak is extracted by quadrature over its support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AnalysisError, BoundaryMassError, ValidationError
from .model import PhaseSchedule, SimParams, SpinorState, field_direction, spinor_from_bloch

__all__ = [
    "hermite_u",
    "hermite_table",
    "Grid",
    "make_grid",
    "grid_for_basis",
    "PositionField",
    "position_density",
    "position_density_matrix",
    "density_diagonal",
    "Peak",
    "PeakSplit",
    "detect_peaks",
    "PeakSpin",
    "peak_spin_state",
    "PeakReport",
    "peak_report",
    "peak_ratio",
    "predicted_ratio",
    "CoherenceValue",
    "coherence_norm",
    "coherence_at",
    "decay_rate",
    "CONTOUR_LEVELS",
]

CONTOUR_LEVELS = (-16.0, -12.0, -8.0, -4.0)
_RESCALE = 1e150


# ---------------------------------------------------------------------------
# oscillator eigenfunctions


def hermite_table(z, n_basis: int) -> np.ndarray:
    """Table ``T[i, n] = u_n(z_i)`` of normalised oscillator eigenfunctions.

    Uses the three-term recurrence for the normalised functions,
    ``u_{n+1} = z sqrt(2/(n+1)) u_n - sqrt(n/(n+1)) u_{n-1}``.  The Gaussian
    prefactor is carried as a separate logarithm per point and the running
    values are rescaled whenever they grow past 1e150, so neither underflow
    of ``exp(-z^2/2)`` nor overflow of the polynomial part occurs far out.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not np.all(np.isfinite(z)):
        raise ValidationError("z", "must be finite")
    if n_basis < 1:
        raise ValidationError("n_basis", "must be >= 1")
    out = np.empty((z.size, n_basis))
    logscale = -0.5 * z * z
    prev = np.zeros_like(z)
    cur = np.full_like(z, math.pi ** -0.25)
    out[:, 0] = cur * np.exp(logscale)
    for n in range(n_basis - 1):
        nxt = z * math.sqrt(2.0 / (n + 1)) * cur - math.sqrt(n / (n + 1)) * prev
        prev, cur = cur, nxt
        big = np.abs(cur) > _RESCALE
        if np.any(big):
            cur[big] /= _RESCALE
            prev[big] /= _RESCALE
            logscale[big] += math.log(_RESCALE)
        out[:, n + 1] = cur * np.exp(logscale)
    return out


def hermite_u(n: int, z):
    """Oscillator eigenfunction ``u_n(z)``; scalar in, scalar out."""
    if n < 0:
        raise ValidationError("n", "must be >= 0")
    scalar = np.ndim(z) == 0
    vals = hermite_table(z, n + 1)[:, n]
    return float(vals[0]) if scalar else vals


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class Grid:
    z: np.ndarray

    @property
    def dz(self) -> float:
        return float(self.z[1] - self.z[0])

    @property
    def size(self) -> int:
        return self.z.size

    def integrate(self, values, axis=-1):
        return np.trapezoid(values, dx=self.dz, axis=axis)

    def table(self, n_basis: int) -> np.ndarray:
        key = n_basis
        cache = self.__dict__.setdefault("_tables", {})
        if key not in cache:
            cache[key] = hermite_table(self.z, n_basis)
        return cache[key]


def make_grid(half_width: float, points: int = 1024, center: float = 0.0) -> Grid:
    if points < 8:
        raise ValidationError("points", "need at least 8 grid points")
    return Grid(np.linspace(center - half_width, center + half_width, points))


def grid_for_basis(n_basis: int, mean_energy: float | None = None,
                   points: int | None = None, pad: float = 8.0) -> Grid:
    """Default grid: half width ``sqrt(2<E>) + pad``, fine enough for the basis.

    Without a mean energy the classical turning point of the highest basis
    function plus 6 is used instead, which covers any state the basis can
    represent.  At least 1024 points; more when the spacing
    would not resolve the fastest basis oscillation.
    """
    if mean_energy is None:
        half = math.sqrt(2 * n_basis + 1) + 6.0
    else:
        half = math.sqrt(2.0 * mean_energy) + pad
    dz_max = 0.8 * math.pi / (2.0 * math.sqrt(2 * n_basis + 1))
    if points is None:
        points = max(1024, int(math.ceil(2 * half / dz_max)) + 1)
    return make_grid(half, points)


def mean_energy(state: SpinorState) -> float:
    n = np.arange(state.n_basis) + 0.5
    return float(np.sum(n * (np.abs(state.a) ** 2 + np.abs(state.b) ** 2)) / state.norm())


@dataclass
class PositionField:
    """Values on a grid: ``P(z)`` (1-D) or ``rho[s, s', z, z']`` blocks."""

    grid: Grid
    values: np.ndarray
    tau: float = 0.0

    @property
    def is_matrix(self) -> bool:
        return self.values.ndim == 4

    def total(self) -> float:
        if self.is_matrix:
            diag = np.einsum("ssii->i", self.values).real
            return float(self.grid.integrate(diag))
        return float(self.grid.integrate(self.values))

    def spin_traced(self) -> np.ndarray:
        """``rho_{up,up} + rho_{dn,dn}`` as a function of (z, z')."""
        return self.values[0, 0] + self.values[1, 1]

    def spin_flip(self) -> np.ndarray:
        """``rho_{up,dn} + rho_{dn,up}``."""
        return self.values[0, 1] + self.values[1, 0]

    def diagonal(self) -> "PositionField":
        if not self.is_matrix:
            return self
        return PositionField(self.grid, np.einsum("ssii->i", self.values).real, self.tau)


def _check_boundary(grid: Grid, density: np.ndarray, rel: float = 1e-10):
    peak = float(np.max(density))
    edge = float(max(density[0], density[-1]))
    if peak <= 0:
        raise AnalysisError("density vanishes on the grid")
    if edge > rel * peak:
        raise BoundaryMassError(
            f"grid [{grid.z[0]:.2f}, {grid.z[-1]:.2f}] too narrow: edge/peak = {edge / peak:.2e}")


def wavefunctions(state: SpinorState, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    table = grid.table(state.n_basis)
    return table @ state.a, table @ state.b


def position_density(state: SpinorState, grid: Grid | None = None,
                     check: bool = True) -> PositionField:
    """``P(z) = |psi_up(z)|^2 + |psi_dn(z)|^2``."""
    if grid is None:
        grid = grid_for_basis(state.n_basis, mean_energy(state))
    up, dn = wavefunctions(state, grid)
    p = np.abs(up) ** 2 + np.abs(dn) ** 2
    if check:
        _check_boundary(grid, p)
    return PositionField(grid, p, state.tau)


def _density_amps(rho):
    amps = getattr(rho, "amps", rho)
    return np.asarray(amps)


def position_density_matrix(rho, grid: Grid, check: bool = True) -> PositionField:
    """All four spin blocks of ``rho(z, z')`` on ``grid x grid``."""
    amps = _density_amps(rho)
    table = grid.table(amps.shape[-1])
    values = np.einsum("in,abnm,jm->abij", table, amps, table, optimize=True)
    out = PositionField(grid, values, getattr(rho, "tau", 0.0))
    if check:
        _check_boundary(grid, out.diagonal().values)
    return out


def density_diagonal(rho, grid: Grid) -> np.ndarray:
    """Spin blocks on the diagonal ``z = z'``, shape ``(2, 2, M)``; O(M N^2)."""
    amps = _density_amps(rho)
    table = grid.table(amps.shape[-1])
    return np.einsum("abnm,in,im->abi", amps, table, table, optimize=True)


# ---------------------------------------------------------------------------
# peak detection


@dataclass(frozen=True)
class Peak:
    lo: int  # inclusive grid index
    hi: int  # inclusive grid index
    weight: float
    centroid: float
    height: float

    def interval(self, grid: Grid) -> tuple[float, float]:
        return float(grid.z[self.lo]), float(grid.z[self.hi])


@dataclass
class PeakSplit:
    peaks: list[Peak]
    separated: bool
    total: float
    grid: Grid

    def __len__(self):
        return len(self.peaks)

    @property
    def remainder(self) -> float:
        return self.total - sum(p.weight for p in self.peaks)

    @property
    def distance(self) -> float:
        if len(self.peaks) < 2:
            return 0.0
        return abs(self.peaks[0].centroid - self.peaks[1].centroid)


def _moving_average(x, width):
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def detect_peaks(field, grid: Grid | None = None, smooth: int = 5,
                 floor: float = 1e-6, merge: float = 0.5,
                 separation: float = 1e-3) -> PeakSplit:
    """Split a 1-D density into peaks.

    Local maxima of the smoothed density above ``floor`` times the global
    maximum are candidates.  Neighbouring candidates whose dip is shallower
    than ``merge`` times the smaller maximum are fused.  Supports are split at
    the deepest minimum between neighbours and returned by weight,
    largest first.  The split counts as separated when every dividing
    minimum is below ``separation`` times the smaller adjacent maximum.
    """
    if isinstance(field, PositionField):
        grid = field.grid
        values = field.diagonal().values
    else:
        values = np.asarray(field, dtype=float)
    if grid is None:
        raise ValidationError("grid", "required for a bare array")
    values = np.asarray(values, dtype=float)
    gmax = float(np.max(values))
    if not gmax > 0:
        raise AnalysisError("zero field: no peaks")
    sm = _moving_average(values, smooth)
    interior = (sm[1:-1] > sm[:-2]) & (sm[1:-1] >= sm[2:]) & (sm[1:-1] > floor * gmax)
    maxima = list(np.nonzero(interior)[0] + 1)
    if not maxima:
        maxima = [int(np.argmax(sm))]

    # fuse maxima separated by shallow dips, keeping the higher one
    changed = True
    while changed and len(maxima) > 1:
        changed = False
        for i in range(len(maxima) - 1):
            a, b = maxima[i], maxima[i + 1]
            dip = float(np.min(sm[a:b + 1]))
            if dip > merge * min(sm[a], sm[b]):
                keep = a if sm[a] >= sm[b] else b
                maxima[i:i + 2] = [keep]
                changed = True
                break

    cuts = []
    separated = True
    for a, b in zip(maxima, maxima[1:]):
        k = a + int(np.argmin(sm[a:b + 1]))
        cuts.append(k)
        if values[k] >= separation * min(values[a], values[b]):
            separated = False
    if len(maxima) < 2:
        separated = False
    edges = [0] + cuts + [values.size - 1]
    z = grid.z
    peaks = []
    for i, m in enumerate(maxima):
        lo, hi = edges[i], edges[i + 1]
        seg = values[lo:hi + 1]
        w = float(grid.integrate(seg)) if hi > lo else 0.0
        c = float(grid.integrate(seg * z[lo:hi + 1]) / w) if w > 0 else float(z[m])
        peaks.append(Peak(lo, hi, w, c, float(values[m])))
    peaks.sort(key=lambda p: -p.weight)
    return PeakSplit(peaks, separated, float(grid.integrate(values)), grid)


# ---------------------------------------------------------------------------
# spin state carried by a peak


@dataclass
class PeakSpin:
    weight: float
    centroid: float
    interval: tuple[float, float]
    spin_matrix: np.ndarray
    purity: float
    bloch: np.ndarray
    alignment_angle: float  # to the unit effective field
    factorization_residual: float

    def record(self) -> dict:
        return {
            "weight": self.weight,
            "centroid": self.centroid,
            "z_lo": self.interval[0],
            "z_hi": self.interval[1],
            "purity": self.purity,
            "bloch_x": self.bloch[0],
            "bloch_y": self.bloch[1],
            "bloch_z": self.bloch[2],
            "alignment_angle": self.alignment_angle,
            "factorization_residual": self.factorization_residual,
        }


def _bloch(m):
    return np.array([2 * m[0, 1].real, 2 * m[1, 0].imag, (m[0, 0] - m[1, 1]).real])


def angle_between(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return math.nan
    c = float(np.dot(u, v) / (nu * nv))
    return math.acos(min(1.0, max(-1.0, c)))


def peak_spin_state(state, peak: Peak, grid: Grid, direction=None,
                    min_weight: float = 1e-10) -> PeakSpin:
    """Reduced spin matrix of the part of ``state`` lying inside ``peak``.

    ``state`` is a ``SpinorState`` or anything with a ``(2, 2, N, N)``
    ``amps`` array.  For a product of a cantilever function and a spin
    state the reduced matrix has rank one, so ``1 - purity`` measures how far
    the peak is from that product form.
    """
    sl = slice(peak.lo, peak.hi + 1)
    sub = Grid(grid.z[sl]) if peak.hi > peak.lo else None
    if sub is None:
        raise AnalysisError("peak support is a single grid point")
    if isinstance(state, SpinorState):
        table = grid.table(state.n_basis)[sl]
        up, dn = table @ state.a, table @ state.b
        m = np.empty((2, 2), dtype=complex)
        m[0, 0] = sub.integrate(np.abs(up) ** 2)
        m[1, 1] = sub.integrate(np.abs(dn) ** 2)
        m[0, 1] = sub.integrate(up * np.conj(dn))
        m[1, 0] = np.conj(m[0, 1])
    else:
        amps = _density_amps(state)
        table = grid.table(amps.shape[-1])[sl]
        diag = np.einsum("abnm,in,im->abi", amps, table, table, optimize=True)
        m = sub.integrate(diag, axis=-1)
        m = 0.5 * (m + m.conj().T)
    weight = float(m[0, 0].real + m[1, 1].real)
    if weight < min_weight:
        raise AnalysisError(f"peak weight {weight:.2e} too small for a spin state")
    m = m / weight
    purity = float(np.real(np.trace(m @ m)))
    bloch = _bloch(m)
    angle = angle_between(bloch, direction) if direction is not None else math.nan
    return PeakSpin(weight, peak.centroid, peak.interval(grid), m, purity, bloch,
                    angle, 1.0 - purity)


@dataclass
class PeakReport:
    tau: float
    peaks: list[PeakSpin]
    separated: bool
    total: float
    field_direction: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def ratio(self) -> float:
        return peak_ratio(self)

    def records(self) -> list[dict]:
        out = []
        for k, p in enumerate(self.peaks, start=1):
            rec = {"tau": self.tau, "peak": k, "separated": int(self.separated)}
            rec.update(p.record())
            out.append(rec)
        return out


def peak_report(state, grid: Grid, params: SimParams, schedule: PhaseSchedule,
                **detect_kwargs) -> PeakReport:
    """Detect peaks and characterise the spin inside each of them.

    The first (largest) peak is compared with the effective-field direction,
    every other peak with its negation.
    """
    if isinstance(state, SpinorState):
        density = position_density(state, grid).values
    else:
        diag = density_diagonal(state, grid)
        density = (diag[0, 0] + diag[1, 1]).real
    split = detect_peaks(density, grid, **detect_kwargs)
    tau = float(state.tau)
    n = field_direction(params, schedule, tau)
    spins = []
    for k, pk in enumerate(split.peaks):
        if pk.weight < 1e-10:
            continue
        spins.append(peak_spin_state(state, pk, grid, n if k == 0 else -n))
    return PeakReport(tau, spins, split.separated, split.total, n)


def peak_ratio(report: PeakReport) -> float:
    """Weight of the second peak over the first."""
    if len(report.peaks) < 2:
        raise AnalysisError("fewer than two peaks")
    return report.peaks[1].weight / report.peaks[0].weight


def predicted_ratio(params: SimParams, schedule: PhaseSchedule,
                    spin_theta: float = 0.0, spin_phi: float = 0.0) -> float:
    """Expected small/big weight ratio from the initial spin-field angle.

    Adiabatic following keeps the projections of the initial spin onto the
    two field eigenstates, ``cos^2(g/2)`` and ``sin^2(g/2)``, with ``g`` the
    angle between spin and field; for a spin along +z, ``g`` is the field's
    polar angle and the ratio is ``tan^2(g/2)``.
    """
    f = np.array([params.epsilon, 0.0, -schedule.rate(0.0)])
    up, dn = spinor_from_bloch(spin_theta, spin_phi)
    s = np.array([2 * (up * np.conj(dn)).real, 2 * (dn * np.conj(up)).imag,
                  abs(up) ** 2 - abs(dn) ** 2])
    if spin_theta == 0.0 and spin_phi == 0.0:
        g = math.atan2(f[0], f[2])
    else:
        g = angle_between(s, f)
    t = math.tan(0.5 * g) ** 2
    return t if t <= 1 else 1.0 / t


# ---------------------------------------------------------------------------
# coherence between separated peaks


@dataclass
class CoherenceValue:
    tau: float
    value: float
    width: float
    separated: bool


def coherence_norm(rho, grid: Grid, width: float | None = None,
                   measure: str = "integrated", component: str = "hs",
                   field: PositionField | None = None) -> CoherenceValue:
    """Off-diagonal coherence of ``rho(z, z')`` outside the band ``|z-z'| <= width``.

    ``component`` selects what is measured at each (z, z'): ``"hs"`` the
    Hilbert-Schmidt norm of the 2x2 spin block (default), ``"trace"`` the
    magnitude of ``rho_uu + rho_dd``, ``"flip"`` that of ``rho_ud + rho_du``.
    ``measure`` is ``"integrated"`` (area integral) or ``"peak"`` (largest
    value).  Without an explicit ``width`` the band is half the distance
    between the two diagonal peaks; before the peaks separate the width is
    zero and the full off-diagonal mass is returned, flagged as such.
    """
    if field is None:
        field = position_density_matrix(rho, grid, check=False)
    vals = field.values
    if component == "hs":
        mag = np.sqrt(np.sum(np.abs(vals) ** 2, axis=(0, 1)))
    elif component == "trace":
        mag = np.abs(field.spin_traced())
    elif component == "flip":
        mag = np.abs(field.spin_flip())
    else:
        raise ValidationError("component", f"unknown component {component!r}")
    separated = True
    if width is None:
        split = detect_peaks(field.diagonal().values, grid)
        separated = split.separated and len(split) >= 2
        width = 0.5 * split.distance if separated else 0.0
    z = grid.z
    mask = np.abs(z[:, None] - z[None, :]) > width
    if measure == "integrated":
        value = float(np.sum(mag * mask) * grid.dz ** 2)
    elif measure == "peak":
        value = float(np.max(np.where(mask, mag, 0.0)))
    else:
        raise ValidationError("measure", f"unknown measure {measure!r}")
    return CoherenceValue(float(getattr(rho, "tau", field.tau)), value, float(width), separated)


def coherence_at(rho, z: float, zprime: float) -> float:
    """Hilbert-Schmidt norm of the spin block of ``rho(z, z')`` at one point.

    The dephasing term multiplies ``rho(z, z')`` by ``exp(-D beta (z-z')^2 t)``
    pointwise, so this value isolates it from peak motion and overlap.
    """
    amps = _density_amps(rho)
    u = hermite_table(np.array([z, zprime], dtype=float), amps.shape[-1])
    blk = np.einsum("abnm,n,m->ab", amps, u[0], u[1])
    return float(np.sqrt(np.sum(np.abs(blk) ** 2)))


def decay_rate(taus, values) -> float:
    """Least-squares rate ``k`` of ``values ~ exp(-k tau)``."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if taus.size < 2 or np.any(values <= 0):
        raise AnalysisError("need at least two positive samples")
    slope = np.polyfit(taus, np.log(values), 1)[0]
    return float(-slope)
