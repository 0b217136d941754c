"""Scenario drivers behind the command line.

Each driver streams its artifacts into an output directory, finishes with a
checksum manifest and returns an in-memory summary so tests can inspect the
same numbers that were written to disk.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as an
from . import io
from . import master as ms
from . import schrodinger as sd
from .config import Scenario
from .errors import AnalysisError, ResourceError, ValidationError
from .model import adiabaticity_check

__all__ = [
    "RunResult",
    "analysis_grid",
    "run",
    "run_closed",
    "run_open",
    "analyze",
    "convergence",
    "adiabatic",
    "equivalence",
    "longest_run",
    "thread_count",
]

EQUIVALENCE_TOL = 1e-6
WORKING_COPIES = 20  # stage vectors plus scratch held by the open integrator


@dataclass
class RunResult:
    scenario: Scenario
    out: Path
    summary: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    coherence: list = field(default_factory=list)
    passed: bool = True


def thread_count() -> int:
    """Worker cap for sweeps: ``SPINCANT_THREADS`` or the CPU count."""
    env = os.environ.get("SPINCANT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError("SPINCANT_THREADS", f"not an integer: {env!r}") from None
        if n < 1:
            raise ValidationError("SPINCANT_THREADS", "must be >= 1")
        return n
    return os.cpu_count() or 1


def analysis_grid(scn: Scenario) -> an.Grid:
    return an.grid_for_basis(scn.params.n_basis, points=scn.grid_points)


def snapshot_indices(count: int, k: int) -> set[int]:
    """``k`` output indices spread evenly over ``count``, always the last."""
    k = min(k, count)
    if k == 1:
        return {count - 1}
    return {int(round(x)) for x in np.linspace(0, count - 1, k)}


def longest_run(flags) -> int:
    best = cur = 0
    for f in flags:
        cur = cur + 1 if f else 0
        best = max(best, cur)
    return best


def _report(state, grid, scn: Scenario):
    try:
        return an.peak_report(state, grid, scn.params, scn.schedule)
    except AnalysisError:
        return None


def _two_peak(rep) -> bool:
    return rep is not None and rep.separated and len(rep.peaks) >= 2


def _write_summary(path: Path, summary: dict):
    lines = []
    for k, v in summary.items():
        if isinstance(v, str):
            lines.append(f"{k}={v}")
        else:
            lines.append(io.format_record({k: v}))
    path.write_text("\n".join(lines) + "\n")


def _peak_summary(reports, scn: Scenario, angle_tol: float = 0.1,
                  purity_tol: float = 0.01) -> dict:
    sep = [r for r in reports if _two_peak(r)]
    good = [_two_peak(r) and r.peaks[0].factorization_residual <= purity_tol
            and r.peaks[1].factorization_residual <= purity_tol
            and r.peaks[0].alignment_angle <= angle_tol
            and r.peaks[1].alignment_angle <= angle_tol for r in reports]
    out = {
        "separated_snapshots": len(sep),
        "longest_aligned_run": longest_run(good),
        "predicted_ratio": an.predicted_ratio(scn.params, scn.schedule,
                                              scn.spin_theta, scn.spin_phi),
    }
    if sep:
        ratios = np.array([an.peak_ratio(r) for r in sep])
        out["ratio_median"] = float(np.median(ratios))
        out["ratio_min"] = float(ratios.min())
        out["ratio_max"] = float(ratios.max())
        out["max_factorization_residual"] = max(
            max(p.factorization_residual for p in r.peaks[:2]) for r in sep)
        out["max_alignment_big"] = max(r.peaks[0].alignment_angle for r in sep)
        out["max_alignment_small"] = max(r.peaks[1].alignment_angle for r in sep)
    return out


# ---------------------------------------------------------------------------
# dynamics


def run(scn: Scenario, out, mode: str | None = None, snapshots: int | None = None,
        log=print) -> RunResult:
    mode = mode or scn.mode
    if mode == "closed":
        return run_closed(scn, out, snapshots, log)
    if mode == "open":
        return run_open(scn, out, snapshots, log)
    raise ValidationError("mode", f"unknown mode {mode!r}")


def run_closed(scn: Scenario, out, snapshots: int | None = None, log=print) -> RunResult:
    """Integrate the spinor equations and analyse every output time."""
    out = io.ensure_dir(out)
    snap_dir = io.ensure_dir(out / "snapshots")
    k = snapshots or scn.snapshots
    psi0 = scn.initial_state()
    grid = analysis_grid(scn)
    n_out = 1 + len(sd._output_times(0.0, scn.tau_end, scn.cadence))
    dump = snapshot_indices(n_out, k)
    res = RunResult(scn, out)
    props: list = []
    max_drift = max_tail = 0.0
    index = io.CsvWriter(snap_dir / "index.csv", ("index", "tau"))
    with io.CsvWriter(out / "trajectory.csv", io.SPINOR_COLUMNS) as traj:
        states = sd.iter_evolve(psi0, scn.tau_end, scn.params, scn.schedule,
                                scn.integrator, scn.cadence, prop_out=props)
        for i, s in enumerate(states):
            snap = sd.Snapshot.of(s)
            row = snap.row()
            traj.write(row)
            res.rows.append(row)
            max_drift = max(max_drift, abs(snap.norm - 1.0))
            max_tail = max(max_tail, s.tail)
            if s.tau >= scn.analyze_from - 1e-12:
                rep = _report(s, grid, scn)
                if rep is not None:
                    res.reports.append(rep)
            if i in dump:
                io.write_amplitudes(snap_dir / f"amps_{i:05d}.csv", s)
                index.write((i, s.tau))
    index.close()
    io.write_reports(out / "peaks.txt", res.reports)
    prop = props[0]
    res.summary = {
        "scenario": scn.name,
        "mode": "closed",
        "n_basis": scn.params.n_basis,
        "tau_end": scn.tau_end,
        "steps": prop.steps,
        "rejected": prop.rejected,
        "max_norm_drift": max_drift,
        "max_tail": max_tail,
        "truncation_valid": int(max_tail < scn.truncation_threshold),
    }
    res.summary.update(_peak_summary(res.reports, scn))
    analyze(scn, out, mode="closed", manifest=False)
    _write_summary(out / "summary.txt", res.summary)
    io.write_manifest(out)
    log(f"closed run {scn.name}: {prop.steps} steps, max |norm-1| = {max_drift:.2e}, "
        f"{res.summary['separated_snapshots']} separated snapshots")
    return res


def check_memory(scn: Scenario):
    need = WORKING_COPIES * scn.density_bytes()
    points = scn.grid_points or analysis_grid(scn).size
    need += 4 * points * points * 16
    budget = scn.memory_limit_mb * 2 ** 20
    if need > budget:
        raise ResourceError(f"open run needs about {need / 2 ** 20:.0f} MiB, "
                            f"budget is {scn.memory_limit_mb:.0f} MiB")
    return need


def run_open(scn: Scenario, out, snapshots: int | None = None, log=print) -> RunResult:
    """Integrate the master equation; track coherence and peaks on the way."""
    check_memory(scn)
    out = io.ensure_dir(out)
    snap_dir = io.ensure_dir(out / "snapshots")
    k = snapshots or scn.snapshots
    rho0 = ms.initial_density(scn.initial_state())
    grid = analysis_grid(scn)
    n_out = 1 + len(sd._output_times(0.0, scn.tau_end, scn.cadence))
    dump = snapshot_indices(n_out, k)
    res = RunResult(scn, out)
    props: list = []
    tr_drift = herm = 0.0
    min_eig = math.inf
    index = io.CsvWriter(snap_dir / "index.csv", ("index", "tau"))
    coh_file = io.CsvWriter(out / "coherence.csv", ("tau", "value", "width", "separated"))
    with io.CsvWriter(out / "trajectory.csv", io.DENSITY_COLUMNS) as traj, \
            warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        states = ms.iter_evolve_density(rho0, scn.tau_end, scn.params, scn.schedule,
                                        scn.integrator, scn.cadence,
                                        check_positivity=scn.check_positivity,
                                        prop_out=props)
        for i, r in enumerate(states):
            snap = ms.DensitySnapshot.of(r, eig=scn.check_positivity)
            tr_drift = max(tr_drift, abs(snap.trace - 1.0))
            herm = max(herm, snap.herm_defect)
            if scn.check_positivity:
                min_eig = min(min_eig, snap.min_eig)
            coh = math.nan
            if r.tau >= scn.analyze_from - 1e-12:
                field_ = an.position_density_matrix(r, grid, check=False)
                c = an.coherence_norm(r, grid, component=scn.coherence_component,
                                      field=field_)
                coh = c.value
                res.coherence.append(c)
                coh_file.write((c.tau, c.value, c.width, int(c.separated)))
                rep = _report(r, grid, scn)
                if rep is not None:
                    res.reports.append(rep)
            row = [r.tau, snap.trace, snap.purity, snap.herm_defect, snap.z_mean, coh]
            traj.write(row)
            res.rows.append(row)
            if i in dump:
                io.write_density(snap_dir / f"rho_{i:05d}.bin", r)
                index.write((i, r.tau))
    for w in caught:
        log(f"warning: {w.message}")
    index.close()
    coh_file.close()
    io.write_reports(out / "peaks.txt", res.reports)
    prop = props[0]
    res.summary = {
        "scenario": scn.name,
        "mode": "open",
        "n_basis": scn.params.n_basis,
        "tau_end": scn.tau_end,
        "steps": prop.steps,
        "rejected": prop.rejected,
        "max_trace_drift": tr_drift,
        "max_herm_defect": herm,
        "min_eigenvalue": min_eig if scn.check_positivity else math.nan,
        "positivity_warnings": len(caught),
    }
    res.summary.update(_peak_summary(res.reports, scn))
    res.summary.update(coherence_summary(res.coherence))
    analyze(scn, out, mode="open", manifest=False)
    _write_summary(out / "summary.txt", res.summary)
    io.write_manifest(out)
    log(f"open run {scn.name}: {prop.steps} steps, max |trace-1| = {tr_drift:.2e}, "
        f"coherence decay factor {res.summary.get('coherence_decay_factor', math.nan):.3g}")
    return res


def coherence_summary(values) -> dict:
    """Decay of the masked coherence between the first and last separated samples."""
    sep = [c for c in values if c.separated and c.value > 0]
    if len(sep) < 2:
        return {"coherence_samples": len(sep)}
    first, last = sep[0], sep[-1]
    return {
        "coherence_samples": len(sep),
        "coherence_first_tau": first.tau,
        "coherence_first": first.value,
        "coherence_last_tau": last.tau,
        "coherence_last": last.value,
        "coherence_decay_factor": first.value / last.value,
        "coherence_rate": an.decay_rate([c.tau for c in sep], [c.value for c in sep]),
    }


# ---------------------------------------------------------------------------
# post-processing of dumped snapshots


def _load_snapshots(out: Path, mode: str):
    index_path = out / "snapshots" / "index.csv"
    if not index_path.exists():
        raise ValidationError("out", f"no snapshots under {out}; run first")
    _, idx = io.read_csv(index_path)
    for i, tau in idx:
        i = int(i)
        if mode == "closed":
            yield i, io.read_amplitudes(out / "snapshots" / f"amps_{i:05d}.csv", tau)
        else:
            yield i, io.read_density(out / "snapshots" / f"rho_{i:05d}.bin")


def analyze(scn: Scenario, out, mode: str | None = None, manifest: bool = True,
            max_points: int = 128) -> list:
    """Field exports and peak reports for every dumped snapshot.

    Writes ``fields/density_XXXXX.csv`` (``z, P``) per snapshot; for open
    runs also the spin-traced and spin-flip matrix fields as
    ``z, zprime, log10_abs`` on at most ``max_points`` per axis.
    """
    mode = mode or scn.mode
    out = Path(out)
    fields_dir = io.ensure_dir(out / "fields")
    grid = analysis_grid(scn)
    reports = []
    for i, state in _load_snapshots(out, mode):
        if mode == "closed":
            f = an.position_density(state, grid, check=False)
            io.write_density_profile(fields_dir / f"density_{i:05d}.csv", f)
        else:
            f = an.position_density_matrix(state, grid, check=False)
            io.write_density_profile(fields_dir / f"density_{i:05d}.csv", f)
            stride = max(1, int(math.ceil(grid.size / max_points)))
            io.write_matrix_field(fields_dir / f"traced_{i:05d}.csv", f.spin_traced(),
                                  grid, stride)
            io.write_matrix_field(fields_dir / f"flip_{i:05d}.csv", f.spin_flip(),
                                  grid, stride)
        rep = _report(state, grid, scn)
        if rep is not None:
            reports.append(rep)
    io.write_reports(out / "snapshot_peaks.txt", reports)
    if manifest:
        io.write_manifest(out)
    return reports


# ---------------------------------------------------------------------------
# sweeps and checks


def convergence(scn: Scenario, out, basis_sizes, log=print, tol: float = 1e-3) -> RunResult:
    """Closed runs at several basis sizes; passes when deviations shrink."""
    out = io.ensure_dir(out)
    grid_for = {}

    def weights(state):
        g = grid_for.setdefault(state.n_basis, an.grid_for_basis(state.n_basis))
        split = an.detect_peaks(an.position_density(state, g, check=False).values, g)
        w = sorted((p.weight for p in split.peaks), reverse=True)[:2]
        return np.array(w + [0.0] * (2 - len(w)))

    def make(n):
        return scn.with_(params=scn.params.replace(n_basis=n)).initial_state()

    workers = min(thread_count(), len(basis_sizes))
    with ThreadPoolExecutor(max_workers=workers) as ex:
        rep = sd.truncation_convergence(make, scn.tau_end, scn.params, scn.schedule,
                                        basis_sizes, scn.integrator, scn.cadence,
                                        weights=weights, tol=tol, mapper=ex.map)
    res = RunResult(scn, out)
    res.passed = rep.monotone and rep.converged
    with io.CsvWriter(out / "convergence.csv", ("n_from", "n_to", "z_deviation",
                                                 "weight_deviation")) as w:
        for i in range(1, len(rep.basis_sizes)):
            wd = rep.weight_deviation[i - 1] if rep.weight_deviation else math.nan
            w.write((rep.basis_sizes[i - 1], rep.basis_sizes[i], rep.z_deviation[i - 1], wd))
    res.summary = {"scenario": scn.name, "monotone": int(rep.monotone),
                   "converged": int(rep.converged), "tolerance": tol,
                   "passed": int(res.passed)}
    _write_summary(out / "summary.txt", res.summary)
    io.write_manifest(out)
    devs = ", ".join(f"{d:.2e}" for d in rep.z_deviation)
    log(f"convergence {scn.name} N={list(rep.basis_sizes)}: deviations [{devs}] "
        f"-> {'PASS' if res.passed else 'FAIL'}")
    res.rows = list(zip(rep.basis_sizes[1:], rep.z_deviation))
    return res


def adiabatic(scn: Scenario, out, log=print, threshold: float = 0.1) -> RunResult:
    """Both adiabaticity ratios over the scenario horizon."""
    out = io.ensure_dir(out)
    z_extent = abs(scn.z0)
    rep = adiabaticity_check(scn.params, scn.schedule, z_extent, scn.tau_end, threshold)
    res = RunResult(scn, out, passed=rep.passed)
    res.summary = {"scenario": scn.name, "sweep_ratio": rep.sweep_ratio,
                   "back_action_ratio": rep.back_action_ratio, "z_extent": z_extent,
                   "threshold": threshold, "tau_worst": rep.tau_worst,
                   "passed": int(rep.passed)}
    _write_summary(out / "adiabatic.txt", res.summary)
    io.write_manifest(out)
    log(f"adiabatic {scn.name}: sweep {rep.sweep_ratio:.4g}, back-action "
        f"{rep.back_action_ratio:.4g} (threshold {threshold}) -> "
        f"{'PASS' if rep.passed else 'FAIL'}")
    return res


def equivalence(scn: Scenario, out, log=print, tol: float = EQUIVALENCE_TOL) -> RunResult:
    """Closed and open runs without damping must agree elementwise."""
    out = io.ensure_dir(out)
    params = scn.params.replace(beta=0.0, bigD=0.0)
    psi0 = scn.initial_state()
    rho0 = ms.initial_density(psi0)
    closed = sd.iter_evolve(psi0, scn.tau_end, params, scn.schedule, scn.integrator,
                            scn.cadence)
    opened = ms.iter_evolve_density(rho0, scn.tau_end, params, scn.schedule,
                                    scn.integrator, scn.cadence)
    res = RunResult(scn, out)
    worst = 0.0
    with io.CsvWriter(out / "equivalence.csv", ("tau", "max_abs_diff")) as w:
        for s, r in zip(closed, opened):
            d = float(np.max(np.abs(ms.initial_density(s).amps - r.amps)))
            worst = max(worst, d)
            w.write((s.tau, d))
            res.rows.append((s.tau, d))
    res.passed = worst <= tol
    res.summary = {"scenario": scn.name, "max_abs_diff": worst, "tolerance": tol,
                   "passed": int(res.passed)}
    _write_summary(out / "summary.txt", res.summary)
    io.write_manifest(out)
    log(f"equivalence {scn.name}: max |rho - psi psi*| = {worst:.3e} (tol {tol:g}) -> "
        f"{'PASS' if res.passed else 'FAIL'}")
    return res
