"""Spherical harmonic transforms on HEALPix and lat/lon grids, overset tiles and codec metrics."""

from .grids import (
    HealpixGrid,
    LatLonGrid,
    PaddedTileGeometry,
    build_healpix_grid,
    build_latlon_grid,
    build_padded_geometry,
    cell_area_weights,
)
from .legendre import LegendreTable, build_legendre_table, direct_legendre_oracle
from .projection import blend_padded_tiles, healpix_to_latlon, latlon_to_healpix, sample_padded_tiles
from .sht import (
    PowerSpectrum,
    ScalarField,
    SphericalCoeffs,
    analyze,
    analyze_direct,
    analyze_iterative,
    power_spectrum,
    ring_table,
    synthesize,
    synthesize_direct,
)

__version__ = "0.1.0"

__all__ = [
    "HealpixGrid",
    "LatLonGrid",
    "LegendreTable",
    "PaddedTileGeometry",
    "PowerSpectrum",
    "ScalarField",
    "SphericalCoeffs",
    "analyze",
    "analyze_direct",
    "analyze_iterative",
    "blend_padded_tiles",
    "build_healpix_grid",
    "build_latlon_grid",
    "build_legendre_table",
    "build_padded_geometry",
    "cell_area_weights",
    "direct_legendre_oracle",
    "healpix_to_latlon",
    "latlon_to_healpix",
    "power_spectrum",
    "ring_table",
    "sample_padded_tiles",
    "synthesize",
    "synthesize_direct",
]
