"""Spherical harmonic analysis and synthesis on ring-structured grids.

The fast paths run one FFT per isolatitude ring and contract the result with
a precomputed :class:`~healsht.legendre.LegendreTable`.  Both directions use
the exact periodicity of the ring DFT, so for any ``m`` (including orders
above a short ring's Nyquist limit) they agree with the literal double sums
in :func:`analyze_direct` and :func:`synthesize_direct`.

Coefficients follow the real-field convention: only ``0 <= m <= l`` is
stored and ``a_{l,-m} = (-1)^m conj(a_{lm})`` is implied.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .legendre import LegendreTable, build_legendre_table, column_offset, n_coeffs

__all__ = [
    "GridMismatchError",
    "PowerSpectrum",
    "ScalarField",
    "SphericalCoeffs",
    "analyze",
    "analyze_direct",
    "analyze_iterative",
    "field_energy",
    "load_coeffs",
    "power_spectrum",
    "read_spectrum_csv",
    "ring_table",
    "save_coeffs",
    "synthesize",
    "synthesize_direct",
    "write_spectrum_csv",
]

RING_CHUNK = 16
_POINT_BLOCK = 256
_MAGIC = b"ALM1"
PSD_MODES = ("real-field", "literal")


class GridMismatchError(ValueError):
    """The Legendre table was not built on the grid's ring colatitudes."""


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real samples of one variable on a grid, stored in the grid's native shape."""

    grid: object = field(repr=False)
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.grid.n_pix:
            raise ValueError(
                f"field has {values.size} values but the grid has {self.grid.n_pix} pixels"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values.reshape(self.grid.shape))


@dataclass(frozen=True, eq=False)
class SphericalCoeffs:
    l_max: int
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128).reshape(-1)
        if data.size != n_coeffs(self.l_max):
            raise ValueError(f"expected {n_coeffs(self.l_max)} coefficients, got {data.size}")
        if not np.all(np.isfinite(data)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, l_max: int) -> "SphericalCoeffs":
        return cls(l_max, np.zeros(n_coeffs(l_max), dtype=np.complex128))

    def index(self, l: int, m: int) -> int:
        if not 0 <= m <= l <= self.l_max:
            raise IndexError(f"(l={l}, m={m}) outside triangle of l_max={self.l_max}")
        return column_offset(m, self.l_max) + l - m

    def __getitem__(self, lm: tuple[int, int]) -> complex:
        return complex(self.data[self.index(*lm)])

    def degrees(self) -> np.ndarray:
        """Degree ``l`` of every stored entry."""
        return np.concatenate([np.arange(m, self.l_max + 1) for m in range(self.l_max + 1)])

    def orders(self) -> np.ndarray:
        """Order ``m`` of every stored entry."""
        return _orders(self.l_max)

    def truncate(self, l_max: int) -> "SphericalCoeffs":
        if l_max > self.l_max:
            raise ValueError("cannot truncate to a larger l_max")
        return SphericalCoeffs(l_max, self.data[_sub_index(l_max, self.l_max)])


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    values: np.ndarray
    mode: str = "real-field"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.mode not in PSD_MODES:
            raise ValueError(f"mode must be one of {PSD_MODES}, got {self.mode!r}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("spectrum values must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def l_max(self) -> int:
        return self.values.shape[0] - 1


def _orders(l_max: int) -> np.ndarray:
    return np.repeat(np.arange(l_max + 1), np.arange(l_max + 1, 0, -1))


def _sub_index(l_max: int, table_l_max: int) -> np.ndarray | slice:
    """Positions of the ``l_max`` triangle inside a ``table_l_max`` triangle."""
    if l_max == table_l_max:
        return slice(None)
    return np.concatenate(
        [column_offset(m, table_l_max) + np.arange(l_max + 1 - m) for m in range(l_max + 1)]
    )


def _check_table(grid, table: LegendreTable, l_max: int) -> None:
    if l_max < 0:
        raise ValueError(f"l_max must be >= 0, got {l_max}")
    if l_max > table.l_max:
        raise ValueError(f"l_max={l_max} exceeds the table's l_max={table.l_max}")
    if not np.array_equal(np.asarray(grid.ring_colatitudes), table.colatitudes):
        raise GridMismatchError("Legendre table colatitudes do not match the grid rings")


def _chunks(n: int) -> list[range]:
    return [range(i, min(i + RING_CHUNK, n)) for i in range(0, n, RING_CHUNK)]


def _run(fn, chunks, n_threads: int):
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def analyze(
    field: ScalarField, l_max: int, table: LegendreTable, *, n_threads: int = 1
) -> SphericalCoeffs:
    """Forward transform via one FFT per ring.

    For ring ``j`` with ``N`` pixels the Fourier sum at order ``m`` is read
    from the length-``N`` DFT at ``m mod N`` and rotated by the first-pixel
    phase.  Per-ring products are accumulated in ascending ring order within
    fixed chunks, and chunks are combined in ascending order, so the result
    does not depend on ``n_threads``.
    """
    grid = field.grid
    _check_table(grid, table, l_max)
    flat = field.values.reshape(-1)
    rings = grid.rings
    sub = _sub_index(l_max, table.l_max)
    m = np.arange(l_max + 1)
    m_of = _orders(l_max)

    def work(chunk: range) -> np.ndarray:
        acc = np.zeros(n_coeffs(l_max), dtype=np.complex128)
        for j in chunk:
            ring = rings[j]
            if ring.quadrature_weight == 0.0:
                continue
            spec = np.fft.fft(flat[ring.pixels])
            g = spec[m % ring.count] * np.exp(-1j * m * ring.phi_0) * ring.quadrature_weight
            acc += table.values[j, sub] * g[m_of]
        return acc

    parts = _run(work, _chunks(len(rings)), n_threads)
    total = np.zeros(n_coeffs(l_max), dtype=np.complex128)
    for p in parts:
        total += p
    return SphericalCoeffs(l_max, total)


def analyze_iterative(
    field: ScalarField,
    l_max: int,
    table: LegendreTable,
    iterations: int = 0,
    *,
    n_threads: int = 1,
) -> SphericalCoeffs:
    """Quadrature analysis followed by ``iterations`` Jacobi refinement steps.

    Each step analyses the residual ``f - synthesize(a)`` and adds it back,
    which removes most of the leakage of non-exact quadratures such as the
    HEALPix rings.  ``iterations=0`` is plain :func:`analyze`.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    coeffs = analyze(field, l_max, table, n_threads=n_threads)
    for _ in range(iterations):
        approx = synthesize(coeffs, field.grid, table, n_threads=n_threads)
        residual = ScalarField(field.grid, field.values - approx.values, field.units)
        step = analyze(residual, l_max, table, n_threads=n_threads)
        coeffs = SphericalCoeffs(l_max, coeffs.data + step.data)
    return coeffs


def _ring_index(grid) -> np.ndarray:
    out = np.empty(grid.n_pix, dtype=np.int64)
    for j, ring in enumerate(grid.rings):
        out[ring.pixels] = j
    return out


def analyze_direct(field: ScalarField, l_max: int, table: LegendreTable) -> SphericalCoeffs:
    """Literal pixel-by-pixel quadrature sum of ``f * conj(Y) * weight``.

    Uses each pixel's own longitude; needs no ring regularity.  O(N l_max^2),
    for testing.
    """
    grid = field.grid
    _check_table(grid, table, l_max)
    flat = field.values.reshape(-1)
    ring_of = _ring_index(grid)
    weights = np.array([r.quadrature_weight for r in grid.rings])[ring_of]
    phi = _pixel_longitudes(grid)
    sub = _sub_index(l_max, table.l_max)
    m_of = _orders(l_max)
    lam = table.values[:, sub]

    acc = np.zeros(n_coeffs(l_max), dtype=np.complex128)
    for start in range(0, flat.size, _POINT_BLOCK):
        sl = slice(start, start + _POINT_BLOCK)
        phase = np.exp(-1j * np.outer(phi[sl], m_of))
        acc += ((flat[sl] * weights[sl])[:, None] * lam[ring_of[sl]] * phase).sum(axis=0)
    return SphericalCoeffs(l_max, acc)


def _pixel_longitudes(grid) -> np.ndarray:
    if hasattr(grid, "phi"):
        return grid.phi.reshape(-1)
    return np.tile(grid.longitudes, grid.n_lat)


def synthesize(
    coeffs: SphericalCoeffs, grid, table: LegendreTable, *, n_threads: int = 1
) -> ScalarField:
    """Inverse transform via one inverse FFT per ring.

    Orders above a ring's length are folded onto ``m mod N`` before the
    inverse FFT, which reproduces the direct sum exactly.
    """
    l_max = coeffs.l_max
    _check_table(grid, table, l_max)
    rings = grid.rings
    sub = _sub_index(l_max, table.l_max)
    m = np.arange(l_max + 1)
    starts = np.array([column_offset(k, l_max) for k in m])
    factor = np.where(m == 0, 1.0, 2.0)
    out = np.empty(grid.n_pix)

    def work(chunk: range) -> None:
        for j in chunk:
            ring = rings[j]
            h = np.add.reduceat(table.values[j, sub] * coeffs.data, starts)
            c = factor * h * np.exp(1j * m * ring.phi_0)
            if l_max < ring.count:
                spec = np.zeros(ring.count, dtype=np.complex128)
                spec[: l_max + 1] = c
            else:
                fold = m % ring.count
                spec = np.bincount(fold, c.real, ring.count) + 1j * np.bincount(
                    fold, c.imag, ring.count
                )
            out[ring.pixels] = np.fft.ifft(spec, norm="forward").real

    _run(work, _chunks(len(rings)), n_threads)
    return ScalarField(grid, out)


def synthesize_direct(coeffs: SphericalCoeffs, theta, phi) -> np.ndarray:
    """Evaluate ``Re sum_{l, m>=0} (2 - delta_m0) a_lm Y_m^l`` at scattered points."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if theta.shape != phi.shape:
        raise ValueError("theta and phi must have the same length")
    table = build_legendre_table(coeffs.l_max, theta)
    m_of = _orders(coeffs.l_max)
    weighted = np.where(m_of == 0, 1.0, 2.0) * coeffs.data
    out = np.empty(theta.size)
    for start in range(0, theta.size, _POINT_BLOCK):
        sl = slice(start, start + _POINT_BLOCK)
        phase = np.exp(1j * np.outer(phi[sl], m_of))
        out[sl] = (table.values[sl] * phase * weighted).sum(axis=1).real
    return out


def power_spectrum(coeffs: SphericalCoeffs, mode: str = "real-field") -> PowerSpectrum:
    """Per-degree power ``I_l``.

    ``real-field`` sums ``m = 0..l`` with the ``m > 0`` terms doubled (the
    power of the full ``-l..l`` set).  ``literal`` sums ``m = 0..l-1``
    without doubling, so ``I_0`` is always 0.
    """
    if mode not in PSD_MODES:
        raise ValueError(f"mode must be one of {PSD_MODES}, got {mode!r}")
    l = coeffs.degrees()
    m = coeffs.orders()
    power = np.abs(coeffs.data) ** 2
    if mode == "real-field":
        power = power * np.where(m == 0, 1.0, 2.0)
    else:
        power = np.where(m < l, power, 0.0)
    total = np.bincount(l, power, coeffs.l_max + 1)
    ell = np.arange(coeffs.l_max + 1)
    return PowerSpectrum(total / (2 * ell + 1), mode)


def save_coeffs(coeffs: SphericalCoeffs, path) -> None:
    inter = np.empty(2 * coeffs.data.size, dtype="<f8")
    inter[0::2] = coeffs.data.real
    inter[1::2] = coeffs.data.imag
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", coeffs.l_max) + inter.tobytes())


def load_coeffs(path) -> SphericalCoeffs:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a coefficient file")
    (l_max,) = struct.unpack_from("<I", data, 4)
    n = n_coeffs(l_max)
    if len(data) != 8 + 16 * n:
        raise ValueError(f"{path}: payload size does not match l_max={l_max}")
    inter = np.frombuffer(data, dtype="<f8", offset=8)
    return SphericalCoeffs(l_max, inter[0::2] + 1j * inter[1::2])


def write_spectrum_csv(psd: PowerSpectrum, path) -> None:
    lines = ["l,I_l"] + [f"{l},{v!r}" for l, v in enumerate(psd.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_spectrum_csv(path, mode: str = "real-field") -> PowerSpectrum:
    rows = Path(path).read_text().strip().splitlines()[1:]
    values = np.array([float(r.split(",")[1]) for r in rows])
    return PowerSpectrum(values, mode)


def field_energy(field: ScalarField) -> float:
    """Quadrature estimate of the integral of ``f^2`` over the sphere."""
    flat = field.values.reshape(-1)
    total = 0.0
    for ring in field.grid.rings:
        total += ring.quadrature_weight * float(np.sum(flat[ring.pixels] ** 2))
    return total


def ring_table(grid, l_max: int, **kwargs) -> LegendreTable:
    """Legendre table on a grid's ring colatitudes."""
    return build_legendre_table(l_max, grid.ring_colatitudes, **kwargs)

