"""Hierarchical QAM constellations.

An HQC point is the sum of a base QAM point and a mode offset,
``points[q1, q2] = base_points[q1] + mode_points[q2]``. The mode lattice
spacing is tuned so that ``d1 / d2`` hits the requested scaling factor.

Point index equals its Gray label: ``base_points[i]`` carries the label
``i`` written MSB first on ``log2(Q1)`` bits (same for modes).

Lattice layouts (unit spacing before normalization):

* square orders ``2**(2k)``: ``2**k x 2**k`` grid, label = Q-axis Gray bits
  followed by I-axis Gray bits.
* ``2``: two points on the real axis, ``-1/2`` (label 0) and ``+1/2``.
* ``8``: 4 x 2 rectangle (I x Q), the MATLAB ``qammod`` layout, Gray per axis.

Non-square mode lattices are rotated a quarter turn, so a binary mode layer
is orthogonal to a binary base layer and ``(Q1, Q2, rho) = (2, 2, 1)`` is
exactly 4-QAM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "Constellation",
    "ConstellationInfeasibleError",
    "qam_lattice",
    "build_hqc",
    "min_distances",
    "nearest_point",
    "dump_table",
    "load_table",
    "parse_table",
    "check_invariants",
    "int_to_bits",
    "bits_to_int",
]


class ConstellationInfeasibleError(ValueError):
    """No mode-lattice spacing achieves the requested scaling factor."""


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def _gray(i: np.ndarray) -> np.ndarray:
    return i ^ (i >> 1)


def int_to_bits(values, width: int) -> np.ndarray:
    """MSB-first bit expansion along a new trailing axis."""
    values = np.asarray(values, dtype=np.int64)
    if width == 0:
        return np.zeros(values.shape + (0,), dtype=np.uint8)
    shifts = np.arange(width - 1, -1, -1)
    return ((values[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_int(bits) -> np.ndarray:
    """Inverse of :func:`int_to_bits` over the trailing axis."""
    bits = np.asarray(bits, dtype=np.int64)
    width = bits.shape[-1]
    if width == 0:
        return np.zeros(bits.shape[:-1], dtype=np.int64)
    weights = 1 << np.arange(width - 1, -1, -1)
    return bits @ weights


def _grid_lattice(n_i: int, n_q: int) -> np.ndarray:
    """Zero-mean unit-spacing n_i x n_q grid indexed by Gray label."""
    bi = int(math.log2(n_i))
    i = np.arange(n_i)
    q = np.arange(n_q)
    ii, qq = np.meshgrid(i, q, indexing="ij")
    coords = (ii - (n_i - 1) / 2) + 1j * (qq - (n_q - 1) / 2)
    labels = (_gray(qq) << bi) | _gray(ii)
    out = np.empty(n_i * n_q, dtype=complex)
    out[labels.ravel()] = coords.ravel()
    return out


def qam_lattice(order: int) -> np.ndarray:
    """Unit-spacing, zero-mean QAM lattice with point ``i`` labeled ``i``."""
    if not _is_pow2(order):
        raise ValueError(f"QAM order must be a power of two, got {order}")
    if order == 1:
        return np.zeros(1, dtype=complex)
    k = int(math.log2(order))
    if k % 2 == 0:
        side = 1 << (k // 2)
        return _grid_lattice(side, side)
    if order == 2:
        return _grid_lattice(2, 1)
    if order == 8:
        return _grid_lattice(4, 2)
    raise ValueError(f"non-square QAM order {order} is not supported (only 2 and 8)")


def _is_square(order: int) -> bool:
    return int(math.log2(order)) % 2 == 0


@dataclass(frozen=True, eq=False)
class Constellation:
    q1_order: int
    q2_order: int
    base_points: np.ndarray
    mode_points: np.ndarray
    rho: float
    d1: float
    d2: float
    points: np.ndarray = field(init=False)

    def __post_init__(self):
        grid = self.base_points[:, None] + self.mode_points[None, :]
        grid.setflags(write=False)
        self.base_points.setflags(write=False)
        self.mode_points.setflags(write=False)
        object.__setattr__(self, "points", grid)

    @property
    def bits_q1(self) -> int:
        return int(math.log2(self.q1_order))

    @property
    def bits_q2(self) -> int:
        return int(math.log2(self.q2_order))

    @property
    def bit_labels_q1(self) -> np.ndarray:
        return int_to_bits(np.arange(self.q1_order), self.bits_q1)

    @property
    def bit_labels_q2(self) -> np.ndarray:
        return int_to_bits(np.arange(self.q2_order), self.bits_q2)

    @property
    def size(self) -> int:
        return self.q1_order * self.q2_order

    @property
    def energy(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))


def _d1(base: np.ndarray, mode: np.ndarray) -> float:
    pts = base[:, None] + mode[None, :]
    q1 = np.repeat(np.arange(base.size), mode.size)
    flat = pts.ravel()
    dist = np.abs(flat[:, None] - flat[None, :])
    mask = q1[:, None] != q1[None, :]
    if not mask.any():
        return math.inf
    return float(dist[mask].min())


def _d2(mode: np.ndarray) -> float:
    if mode.size < 2:
        return math.nan
    dist = np.abs(mode[:, None] - mode[None, :])
    return float(dist[~np.eye(mode.size, dtype=bool)].min())


def min_distances(c: Constellation) -> tuple[float, float]:
    """Recompute ``(d1, d2)`` by exhaustive pairwise enumeration.

    ``d2`` is NaN for a single-mode constellation.
    """
    return _d1(c.base_points, c.mode_points), _d2(c.mode_points)


def _ratio(base: np.ndarray, unit_mode: np.ndarray, delta: float) -> float:
    return _d1(base, delta * unit_mode) / delta


def _solve_spacing(base: np.ndarray, unit_mode: np.ndarray, rho: float) -> float:
    # The ratio decreases from +inf as delta grows; take the first crossing
    # before the mode clouds of neighbouring base points collide.
    grid = np.geomspace(1e-6, 1e3, 361)
    ratios = np.array([_ratio(base, unit_mode, d) for d in grid])
    collapsed = ratios < 1e-9
    stop = int(np.argmax(collapsed)) if collapsed.any() else grid.size
    below = np.nonzero(ratios[:stop] <= rho)[0]
    if below.size == 0:
        lo_rho = float(ratios[:stop].min()) if stop else math.inf
        raise ConstellationInfeasibleError(
            f"rho={rho} not achievable for Q1={base.size}, Q2={unit_mode.size}; "
            f"achievable range is ({lo_rho:.6g}, inf)"
        )
    j = int(below[0])
    if ratios[j] == rho or j == 0:
        return float(grid[j])
    delta = brentq(lambda d: _ratio(base, unit_mode, d) - rho, grid[j - 1], grid[j],
                   xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    # Snap to a round value when that is at least as accurate (keeps e.g. 4-QAM exact).
    snapped = round(delta, 12)
    if abs(_ratio(base, unit_mode, snapped) - rho) <= abs(_ratio(base, unit_mode, delta) - rho):
        delta = snapped
    return float(delta)


def build_hqc(q1_order: int, q2_order: int, rho: float = 1.0) -> Constellation:
    """Build a unit-energy HQC with ``d1 / d2 == rho``.

    ``rho`` is ignored when ``q2_order == 1`` (plain QAM).
    """
    if not (_is_pow2(q1_order) and q1_order >= 2):
        raise ValueError(f"q1_order must be a power of two >= 2, got {q1_order}")
    if not _is_pow2(q2_order):
        raise ValueError(f"q2_order must be a power of two >= 1, got {q2_order}")
    base = qam_lattice(q1_order)
    if q2_order == 1:
        mode = np.zeros(1, dtype=complex)
        rho = math.nan
    else:
        if not rho > 0:
            raise ValueError(f"rho must be positive, got {rho}")
        unit_mode = qam_lattice(q2_order)
        if not _is_square(q2_order):
            unit_mode = 1j * unit_mode
        mode = _solve_spacing(base, unit_mode, rho) * unit_mode
    pts = base[:, None] + mode[None, :]
    scale = 1.0 / math.sqrt(float(np.mean(np.abs(pts) ** 2)))
    base = base * scale
    mode = mode * scale
    d1, d2 = _d1(base, mode), _d2(mode)
    return Constellation(q1_order, q2_order, base, mode, float(rho), d1, d2)


def nearest_point(c: Constellation, x) -> tuple[np.ndarray, np.ndarray]:
    """Hard demap to ``(q1, q2)`` index arrays by minimum distance."""
    x = np.asarray(x)
    d = np.abs(x[..., None] - c.points.ravel()) ** 2
    idx = np.argmin(d, axis=-1)
    return idx // c.q2_order, idx % c.q2_order


def dump_table(c: Constellation, path: str | Path | None = None) -> str:
    """Plain-text table ``index bits_q1 bits_q2 re im``, one point per line."""
    lines = [f"# hqc q1={c.q1_order} q2={c.q2_order} rho={c.rho!r}"]
    for q1 in range(c.q1_order):
        for q2 in range(c.q2_order):
            b1 = "".join(map(str, c.bit_labels_q1[q1])) or "-"
            b2 = "".join(map(str, c.bit_labels_q2[q2])) or "-"
            p = c.points[q1, q2]
            lines.append(f"{q1 * c.q2_order + q2} {b1} {b2} {float(p.real)!r} {float(p.imag)!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_table(text: str) -> Constellation:
    """Parse a table written by :func:`dump_table`.

    The base/mode split is recovered from the first row and column; a grid
    that is not of the form ``base + mode`` is rejected.
    """
    header, *rows = [ln for ln in text.strip().splitlines() if ln.strip()]
    meta = dict(tok.split("=") for tok in header.lstrip("#").split()[1:])
    q1o, q2o, rho = int(meta["q1"]), int(meta["q2"]), float(meta["rho"])
    grid = np.empty((q1o, q2o), dtype=complex)
    for row in rows:
        idx, b1, b2, re, im = row.split()
        q1, q2 = divmod(int(idx), q2o)
        if (b1 != "-" and int(b1, 2) != q1) or (b2 != "-" and int(b2, 2) != q2):
            raise ValueError(f"label mismatch on row {idx}")
        grid[q1, q2] = complex(float(re), float(im))
    mode = grid[0] - grid[0].mean()
    base = grid[:, 0] - mode[0]
    if np.max(np.abs(base[:, None] + mode[None, :] - grid)) > 1e-12:
        raise ValueError("invariant violated: points == base_points + mode_points")
    return Constellation(q1o, q2o, base, mode, rho, _d1(base, mode), _d2(mode))


def load_table(path: str | Path) -> Constellation:
    return parse_table(Path(path).read_text())


def check_invariants(c: Constellation, tol: float = 1e-9) -> list[str]:
    """Names of the constellation invariants that ``c`` violates."""
    failed = []
    if abs(c.energy - 1.0) > 1e-12:
        failed.append("unit average energy")
    flat = c.points.ravel()
    dist = np.abs(flat[:, None] - flat[None, :])
    if flat.size > 1 and dist[~np.eye(flat.size, dtype=bool)].min() <= tol:
        failed.append("distinct points")
    d1, d2 = min_distances(c)
    if abs(d1 - c.d1) > tol or (c.q2_order > 1 and abs(d2 - c.d2) > tol):
        failed.append("stored distances match enumeration")
    if c.q2_order > 1 and abs(d1 / d2 - c.rho) > tol:
        failed.append("d1/d2 == rho")
    q1, q2 = nearest_point(c, c.points)
    if not (np.array_equal(q1, np.arange(c.q1_order)[:, None] + 0 * q2)
            and np.array_equal(q2, np.arange(c.q2_order)[None, :] + 0 * q1)):
        failed.append("noiseless demap identity")
    return failed
