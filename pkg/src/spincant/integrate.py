"""Explicit Runge-Kutta propagation of amplitude vectors.

The stepping loop is compiled with numba and receives the (also compiled)
right-hand side as a first-class function, so one loop serves both the
spinor and the density-matrix equations.  Python only regains control at
output times, which keeps snapshot handling out of the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.integrate import DOP853, RK45

from .errors import StepLimitError, ValidationError

_jit = dict(nogil=True, cache=True, fastmath=False)

FIXED_RK4 = "rk4"
DOPRI5 = "rk45"
DOP8 = "dop853"
METHODS = (FIXED_RK4, DOPRI5, DOP8)


@dataclass(frozen=True)
class IntegratorConfig:
    """How to integrate.

    ``method`` is one of ``"dop853"`` (default), ``"rk45"`` or ``"rk4"``.
    ``dt`` is only used by the fixed-step method, ``rtol``/``atol`` only by
    the adaptive ones.  ``interaction`` removes the free cantilever rotation
    ``exp(-i(n+1/2)tau)`` from the propagated variables.
    """

    method: str = DOP8
    rtol: float = 1e-10
    atol: float = 1e-12
    dt: float = 1e-4
    max_steps: int = 50_000_000
    interaction: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError("method", f"unknown integrator {self.method!r}")
        if self.method == FIXED_RK4:
            if not self.dt > 0:
                raise ValidationError("dt", "must be > 0 for the fixed-step method")
        else:
            for name in ("rtol", "atol"):
                v = getattr(self, name)
                if not (0 < v <= 1e-2):
                    raise ValidationError(name, "must lie in (0, 1e-2]")
        if self.max_steps < 1:
            raise ValidationError("max_steps", "must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method != FIXED_RK4

    @property
    def tolerance(self) -> float:
        return self.rtol if self.adaptive else self.dt ** 4


def _tableau(method):
    if method == DOP8:
        s = DOP853.n_stages
        a = np.zeros((s, s))
        a[:, :] = DOP853.A[:s, :s]
        return (a, DOP853.B.astype(float), DOP853.C[:s].astype(float),
                DOP853.E5.astype(float), DOP853.E3.astype(float), 8)
    if method == DOPRI5:
        s = RK45.n_stages
        a = np.zeros((s, s))
        a[:, : RK45.A.shape[1]] = RK45.A
        return (a, RK45.B.astype(float), RK45.C.astype(float),
                RK45.E.astype(float), np.zeros(s + 1), 5)
    a = np.zeros((4, 4))
    a[1, 0] = a[2, 1] = 0.5
    a[3, 2] = 1.0
    return (a, np.array([1, 2, 2, 1]) / 6.0, np.array([0, 0.5, 0.5, 1.0]),
            np.zeros(5), np.zeros(5), 4)


_TABLEAUX = {m: _tableau(m) for m in METHODS}


@nb.njit(**_jit)
def _error_norm(K, h, y, ynew, e5, e3, rtol, atol, kind):
    n = y.size
    s = K.shape[0]
    acc5 = 0.0
    acc3 = 0.0
    for k in range(n):
        v5 = 0.0 * y[k]
        v3 = 0.0 * y[k]
        for j in range(s):
            v5 += e5[j] * K[j, k]
            v3 += e3[j] * K[j, k]
        sc = atol + rtol * max(abs(y[k]), abs(ynew[k]))
        a5 = abs(v5) / sc
        a3 = abs(v3) / sc
        acc5 += a5 * a5
        acc3 += a3 * a3
    if kind == 8:
        if acc5 == 0.0 and acc3 == 0.0:
            return 0.0
        return abs(h) * acc5 / np.sqrt((acc5 + 0.01 * acc3) * n)
    return abs(h) * np.sqrt(acc5 / n)


@nb.njit(**_jit)
def _combine(K, coef, rows, y, h, out):
    """``out = y + h * sum_j coef[j] K[j]`` over the first ``rows`` stages."""
    out[:] = y
    for j in range(rows):
        if coef[j] != 0.0:
            w = h * coef[j]
            for k in range(y.size):
                out[k] += w * K[j, k]


@nb.njit(**_jit)
def rk_propagate(rhs, y, t0, t1, h, par, sched, inter, a, b, c, e5, e3, kind,
                 adaptive, rtol, atol, max_steps):
    """Advance ``y`` in place from ``t0`` to ``t1``.

    Returns ``(steps_taken, rejected, next_h)``; ``steps_taken`` is
    negative when ``max_steps`` was exhausted.
    """
    n = y.size
    s = b.size
    K = np.zeros((s + 1, n), dtype=y.dtype)
    ytmp = np.zeros(n, dtype=y.dtype)
    ynew = np.zeros(n, dtype=y.dtype)
    t = t0
    steps = 0
    rejected = 0
    safety = 0.9
    if kind == 8:
        exponent = -1.0 / 8.0
    else:
        exponent = -1.0 / 5.0
    have_k0 = False
    while t < t1:
        if steps >= max_steps:
            return -steps, rejected, h
        last = False
        if t + h >= t1:
            h_use = t1 - t
            last = True
        else:
            h_use = h
        if not have_k0:
            rhs(t, y, K[0], par, sched, inter)
            have_k0 = True
        for i in range(1, s):
            _combine(K, a[i], i, y, h_use, ytmp)
            rhs(t + c[i] * h_use, ytmp, K[i], par, sched, inter)
        _combine(K, b, s, y, h_use, ynew)
        if not adaptive:
            y[:] = ynew
            t = t1 if last else t + h_use
            have_k0 = False
            steps += 1
            continue
        rhs(t + h_use, ynew, K[s], par, sched, inter)
        err = _error_norm(K, h_use, y, ynew, e5, e3, rtol, atol, kind)
        if err < 1.0:
            if err == 0.0:
                factor = 10.0
            else:
                factor = min(10.0, safety * err ** exponent)
            y[:] = ynew
            K[0] = K[s]
            t = t1 if last else t + h_use
            steps += 1
            # a step clipped to hit the output time says little about the
            # natural step size
            if not last:
                h = h_use * factor
        else:
            h = h_use * max(0.2, safety * err ** exponent)
            rejected += 1
    return steps, rejected, h


class Propagator:
    """Bind a compiled right-hand side to parameters and a tableau."""

    def __init__(self, rhs, params, schedule, cfg: IntegratorConfig):
        self.rhs = rhs
        self.cfg = cfg
        self.par = params.as_array()
        self.sched = schedule.as_array()
        self.tab = _TABLEAUX[cfg.method]
        self.h = cfg.dt if not cfg.adaptive else 1e-5
        self.steps = 0
        self.rejected = 0

    def advance(self, y, t0, t1):
        """Propagate ``y`` in place from ``t0`` to ``t1``."""
        if t1 <= t0:
            return y
        cfg = self.cfg
        a, b, c, e5, e3, kind = self.tab
        remaining = cfg.max_steps - self.steps
        if remaining <= 0:
            raise StepLimitError(f"step budget {cfg.max_steps} exhausted at tau={t0}")
        if not cfg.adaptive:
            # fixed steps: split the interval into equal pieces no longer than dt
            pieces = max(1, int(np.ceil((t1 - t0) / cfg.dt - 1e-9)))
            h = (t1 - t0) / pieces
        else:
            h = self.h
        steps, rejected, h_next = rk_propagate(
            self.rhs, y, float(t0), float(t1), float(h), self.par, self.sched,
            cfg.interaction, a, b, c, e5, e3, kind, cfg.adaptive,
            cfg.rtol, cfg.atol, remaining)
        if steps < 0:
            raise StepLimitError(
                f"step budget {cfg.max_steps} exhausted between tau={t0} and {t1}")
        self.steps += steps
        self.rejected += rejected
        if cfg.adaptive:
            self.h = h_next
        return y


@nb.njit(**_jit)
def schedule_rate(t, sched):
    """Phase rate at ``t`` from a packed segment table (see ``PhaseSchedule.as_array``)."""
    nseg = sched.shape[0]
    i = 0
    while i < nseg - 1 and t > sched[i, 1]:
        i += 1
    s = t - sched[i, 0]
    return sched[i, 2] + sched[i, 3] * s + sched[i, 4] * np.sin(sched[i, 5] * s + sched[i, 6])
