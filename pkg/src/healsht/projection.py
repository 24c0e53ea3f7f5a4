"""Moving fields between lat/lon grids and (padded) HEALPix tiles."""

from __future__ import annotations

import numpy as np

from .grids import HealpixGrid, LatLonGrid, PaddedTileGeometry, build_latlon_grid
from .sht import ScalarField, analyze_iterative, ring_table, synthesize

__all__ = [
    "blend_padded_tiles",
    "crop_padded_tiles",
    "healpix_to_latlon",
    "interpolate_latlon",
    "latlon_to_healpix",
    "sample_padded_tiles",
    "seam_discontinuity",
]


def interpolate_latlon(field: ScalarField, theta, phi) -> np.ndarray:
    """Bilinear interpolation in ``(phi, cos theta)`` with longitude wrap-around."""
    grid = field.grid
    if not isinstance(grid, LatLonGrid):
        raise TypeError("interpolate_latlon needs a field on a LatLonGrid")
    colat = grid.colatitudes
    if colat[0] != 0.0 or colat[-1] != np.pi:
        raise ValueError("source grid must include both poles")
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)

    row = np.clip(np.searchsorted(colat, theta, side="right") - 1, 0, grid.n_lat - 2)
    cos_lo = np.cos(colat[row])
    cos_hi = np.cos(colat[row + 1])
    t = (cos_lo - np.cos(theta)) / (cos_lo - cos_hi)

    pos = np.mod(phi, 2.0 * np.pi) * (grid.n_lon / (2.0 * np.pi))
    col = np.floor(pos).astype(np.int64)
    s = pos - col
    col %= grid.n_lon
    col1 = (col + 1) % grid.n_lon

    v = field.values
    top = (1.0 - s) * v[row, col] + s * v[row, col1]
    bottom = (1.0 - s) * v[row + 1, col] + s * v[row + 1, col1]
    return (1.0 - t) * top + t * bottom


def latlon_to_healpix(field: ScalarField, grid: HealpixGrid) -> ScalarField:
    """Sample every HEALPix pixel centre from a lat/lon field."""
    return ScalarField(grid, interpolate_latlon(field, grid.theta, grid.phi), field.units)


def sample_padded_tiles(field: ScalarField, geom: PaddedTileGeometry) -> np.ndarray:
    """Sample a lat/lon field on every padded tile; shape ``(12, t+2p, t+2p)``."""
    return interpolate_latlon(field, geom.theta, geom.phi)


def crop_padded_tiles(tiles: np.ndarray, geom: PaddedTileGeometry) -> np.ndarray:
    """Central ``t x t`` block of each padded tile (no blending)."""
    return np.ascontiguousarray(tiles[(Ellipsis, *geom.central)])


def blend_padded_tiles(tiles, geom: PaddedTileGeometry, units: str = "") -> ScalarField:
    """Stitch padded tiles into one HEALPix field by weighted averaging.

    Each pixel takes its own tile's value with weight 1, plus the value of
    every neighbouring tile whose margin overlaps it, bilinearly interpolated
    in that tile's padded array and weighted by the interpolated blend weight.
    """
    tiles = np.asarray(tiles, dtype=np.float64)
    size = geom.padded_size
    if tiles.shape != (12, size, size):
        raise ValueError(f"expected padded tiles of shape (12, {size}, {size}), got {tiles.shape}")
    n_pix = geom.grid.n_pix
    num = crop_padded_tiles(tiles, geom).reshape(-1).copy()
    den = np.ones(n_pix)
    if geom.blend_target.size:
        values = (tiles.reshape(-1)[geom.blend_source] * geom.blend_coef).sum(axis=1)
        num += np.bincount(geom.blend_target, geom.blend_weight * values, n_pix)
        den += np.bincount(geom.blend_target, geom.blend_weight, n_pix)
    assert np.all(den > 0.0), "blend weights vanished"
    return ScalarField(geom.grid, num / den, units)


def healpix_to_latlon(
    field: ScalarField,
    l_max: int,
    n_lat: int = 721,
    n_lon: int = 1440,
    *,
    allow_high_lmax: bool = False,
    iterations: int = 0,
    n_threads: int = 1,
) -> ScalarField:
    """Analyse a HEALPix field and synthesise it on an equiangular lat/lon grid.

    ``l_max`` is capped at ``2 * nside`` unless ``allow_high_lmax`` is set,
    and must stay below the lat/lon rows' Nyquist order ``n_lon/2``.
    ``iterations`` adds Jacobi refinement steps to the analysis (see
    :func:`healsht.sht.analyze_iterative`).
    """
    grid = field.grid
    if not isinstance(grid, HealpixGrid):
        raise TypeError("healpix_to_latlon needs a field on a HealpixGrid")
    if l_max > 2 * grid.nside and not allow_high_lmax:
        raise ValueError(
            f"l_max={l_max} exceeds 2*nside={2 * grid.nside}; pass allow_high_lmax=True"
        )
    if l_max > n_lon // 2 - 1:
        raise ValueError(f"l_max={l_max} exceeds the n_lon={n_lon} ring Nyquist limit")
    table = ring_table(grid, l_max)
    coeffs = analyze_iterative(field, l_max, table, iterations, n_threads=n_threads)
    target = build_latlon_grid(n_lat, n_lon)
    out = synthesize(coeffs, target, ring_table(target, l_max), n_threads=n_threads)
    return ScalarField(target, out.values, field.units)


def seam_discontinuity(values, pairs: np.ndarray) -> float:
    """Largest absolute jump over pixel pairs straddling tile edges."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(flat[pairs[:, 0]] - flat[pairs[:, 1]])))
