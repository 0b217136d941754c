"""Plain-text and binary artifacts.

Every writer is deterministic: floats are written with ``repr`` precision,
no timestamps are embedded, and the manifest is sorted by path.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .analysis import CONTOUR_LEVELS, Grid, PeakReport, PositionField
from .errors import OutputError
from .master import DensityState
from .model import SpinorState

__all__ = [
    "SPINOR_COLUMNS",
    "DENSITY_COLUMNS",
    "CsvWriter",
    "write_amplitudes",
    "read_amplitudes",
    "write_density",
    "read_density",
    "write_density_profile",
    "write_matrix_field",
    "format_record",
    "parse_record",
    "write_manifest",
    "verify_manifest",
]

SPINOR_COLUMNS = ("tau", "norm", "z_mean", "pz_mean", "spin_x", "spin_y", "spin_z")
DENSITY_COLUMNS = ("tau", "trace", "purity", "herm_defect", "z_mean", "coherence_norm")

MAGIC = b"SPNRHO\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIId")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {p}: {exc}") from None
    return p


class CsvWriter:
    """Row-at-a-time CSV writer that flushes as it goes."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        try:
            self._fh = open(self.path, "w", newline="")
        except OSError as exc:
            raise OutputError(f"cannot write {self.path}: {exc}") from None
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)

    def write(self, row):
        if len(row) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(row)}")
        self._w.writerow([_fmt(v) for v in row])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return header, data.reshape(-1, len(header))


def write_amplitudes(path, state: SpinorState):
    """CSV ``n, re_a, im_a, re_b, im_b``."""
    with CsvWriter(path, ("n", "re_a", "im_a", "re_b", "im_b")) as w:
        for n, (a, b) in enumerate(zip(state.a, state.b)):
            w.write((n, a.real, a.imag, b.real, b.imag))


def read_amplitudes(path, tau: float = 0.0) -> SpinorState:
    _, d = read_csv(path)
    return SpinorState(d[:, 1] + 1j * d[:, 2], d[:, 3] + 1j * d[:, 4], tau)


def write_density(path, rho: DensityState):
    """Binary dump: 24-byte header (magic, version, N, tau), then the
    ``(2, 2, N, N)`` complex128 array in C order, little endian."""
    n = rho.n_basis
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n, float(rho.tau)))
            fh.write(np.ascontiguousarray(rho.amps, dtype="<c16").tobytes())
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


def read_density(path) -> DensityState:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise OutputError(f"{path}: truncated header")
    magic, version, n, tau = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise OutputError(f"{path}: not a density dump")
    if version != VERSION:
        raise OutputError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != 4 * n * n * 16:
        raise OutputError(f"{path}: expected {4 * n * n * 16} bytes of data, got {len(body)}")
    amps = np.frombuffer(body, dtype="<c16").reshape(2, 2, n, n).astype(complex)
    return DensityState(amps, tau)


def write_density_profile(path, field: PositionField):
    """CSV ``z, P`` of a 1-D density (or the diagonal of a matrix field)."""
    f = field.diagonal()
    with CsvWriter(path, ("z", "P")) as w:
        for z, p in zip(f.grid.z, f.values):
            w.write((z, p))


def write_matrix_field(path, values: np.ndarray, grid: Grid, stride: int = 1,
                       levels=CONTOUR_LEVELS):
    """CSV ``z, zprime, log10_abs`` for points at or above the lowest level.

    ``log10_abs`` is clipped below at the lowest contour level, so the file
    carries exactly the information of a contour plot with those levels.
    """
    lo = min(levels)
    mag = np.abs(values[::stride, ::stride])
    z = grid.z[::stride]
    with np.errstate(divide="ignore"):
        lg = np.log10(mag)
    with CsvWriter(path, ("z", "zprime", "log10_abs")) as w:
        for i, j in zip(*np.nonzero(lg >= lo)):
            w.write((z[i], z[j], lg[i, j]))


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in rec.items())


def parse_record(line: str) -> dict:
    out = {}
    for item in line.split():
        k, v = item.split("=", 1)
        out[k] = float(v)
    return out


def write_reports(path, reports: list[PeakReport]):
    try:
        with open(path, "w") as fh:
            for rep in reports:
                for rec in rep.records():
                    fh.write(format_record(rec) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, name: str = "manifest.txt") -> Path:
    """List every file below ``out_dir`` as ``sha256  bytes  relative/path``."""
    root = Path(out_dir)
    target = root / name
    lines = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and p != target:
            rel = p.relative_to(root).as_posix()
            lines.append(f"{sha256(p)}  {p.stat().st_size}  {rel}")
    try:
        target.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {target}: {exc}") from None
    return target


def verify_manifest(out_dir, name: str = "manifest.txt") -> list[str]:
    """Paths whose checksum or size no longer match; empty when all agree."""
    root = Path(out_dir)
    bad = []
    for line in (root / name).read_text().splitlines():
        digest, size, rel = line.split("  ", 2)
        p = root / rel
        if not p.is_file() or p.stat().st_size != int(size) or sha256(p) != digest:
            bad.append(rel)
    return bad
