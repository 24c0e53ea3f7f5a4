"""Equiangular lat/lon grids and HEALPix grids with overset tile padding.

Both grid kinds expose their isolatitude rings as a tuple of :class:`Ring`,
each carrying the flat indices of its member pixels in increasing longitude.
That is all the transform code needs to know about a grid.

HEALPix fields are stored tile-major with shape ``(12, nside, nside)``; entry
``[h, ix, iy]`` is pixel ``(ix, iy)`` of base tile ``h`` in the usual nested
face coordinates, so tile anti-diagonals (``ix + iy`` constant) are rings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "HealpixGrid",
    "LatLonGrid",
    "PaddedTileGeometry",
    "Ring",
    "build_healpix_grid",
    "build_latlon_grid",
    "build_padded_geometry",
    "cell_area_weights",
    "grid_descriptor",
    "grid_from_descriptor",
    "healpix_rings",
    "locate_pixels",
    "tile_edge_pairs",
    "unit_vectors",
]

# Base-tile ring and longitude offsets of the nested scheme.
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])


@dataclass(frozen=True, eq=False)
class Ring:
    """One isolatitude ring: equally spaced pixels at a single colatitude."""

    colatitude: float
    count: int
    phi_0: float
    quadrature_weight: float
    pixels: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class LatLonGrid:
    n_lat: int
    n_lon: int
    colatitudes: np.ndarray
    longitudes: np.ndarray
    area_weights: np.ndarray
    rings: tuple[Ring, ...] = field(repr=False)
    quadrature: str = "trapezoid"

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def n_pix(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def ring_colatitudes(self) -> np.ndarray:
        return self.colatitudes


@dataclass(frozen=True, eq=False)
class HealpixGrid:
    nside: int
    theta: np.ndarray
    phi: np.ndarray
    rings: tuple[Ring, ...] = field(repr=False)
    ring_of_pixel: np.ndarray = field(repr=False)

    @property
    def n_pix(self) -> int:
        return 12 * self.nside * self.nside

    @property
    def shape(self) -> tuple[int, int, int]:
        return (12, self.nside, self.nside)

    @property
    def tile_shape(self) -> tuple[int, int]:
        return (self.nside, self.nside)

    @property
    def pixel_area(self) -> float:
        return 4.0 * math.pi / self.n_pix

    @property
    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat ``(theta, phi)`` arrays in tile-major order."""
        return self.theta.reshape(-1), self.phi.reshape(-1)

    @property
    def ring_colatitudes(self) -> np.ndarray:
        return np.array([r.colatitude for r in self.rings])


@dataclass(frozen=True, eq=False)
class PaddedTileGeometry:
    """Overset tiles: each base tile grown by ``pad`` cells on every side.

    ``coords``, ``theta`` and ``phi`` cover the ``(t + 2p) x (t + 2p)`` padded
    tile; ``blend_weights`` is shared by all tiles.  The ``blend_*`` arrays
    list, for every HEALPix pixel that lies under a neighbouring tile's
    margin, a bilinear stencil into that neighbour's padded array
    (``blend_source`` flat indices, ``blend_coef`` coefficients) and the
    interpolated blend weight.
    """

    grid: HealpixGrid = field(repr=False)
    pad: int
    coords: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    blend_weights: np.ndarray = field(repr=False)
    blend_target: np.ndarray = field(repr=False)
    blend_source: np.ndarray = field(repr=False)
    blend_coef: np.ndarray = field(repr=False)
    blend_weight: np.ndarray = field(repr=False)

    @property
    def tile_size(self) -> int:
        return self.grid.nside

    @property
    def padded_size(self) -> int:
        return self.grid.nside + 2 * self.pad

    @property
    def central(self) -> tuple[slice, slice]:
        return (slice(self.pad, self.pad + self.tile_size),) * 2


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


QUADRATURES = ("trapezoid", "fejer2")


def _fejer2(colat: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Fejer's second rule on x = cos(theta): interior nodes only, exact for
    # polynomials of degree < n_lat - 2.
    n = colat.size - 1
    k = 2 * np.arange(1, n // 2 + 1) - 1
    series = (np.sin(np.outer(colat, k)) / k).sum(axis=1)
    w = 4.0 * sin * series / n
    w[[0, -1]] = 0.0
    return w


def build_latlon_grid(
    n_lat: int = 721, n_lon: int = 1440, quadrature: str = "trapezoid"
) -> LatLonGrid:
    """Equiangular grid including both poles.

    Row weights are ``sin(theta) * dtheta * dphi`` with ``dtheta = pi/(n_lat-1)``
    (halved on the pole rows, whose weight is zero anyway).  With
    ``quadrature="fejer2"`` the ``sin(theta) * dtheta`` factor is replaced by
    Fejer's second-rule weights, which integrate band-limited fields exactly.
    """
    if n_lat < 2:
        raise ValueError(f"n_lat must be >= 2, got {n_lat}")
    if n_lon < 1:
        raise ValueError(f"n_lon must be >= 1, got {n_lon}")
    if quadrature not in QUADRATURES:
        raise ValueError(f"quadrature must be one of {QUADRATURES}, got {quadrature!r}")
    colat = np.linspace(0.0, math.pi, n_lat)
    lon = 2.0 * math.pi * np.arange(n_lon) / n_lon
    sin = np.where(colat <= 0.5 * math.pi, np.sin(colat), np.sin(math.pi - colat))
    if quadrature == "fejer2":
        polar = _fejer2(colat, sin)
    else:
        dtheta = np.full(n_lat, math.pi / (n_lat - 1))
        dtheta[[0, -1]] *= 0.5
        polar = sin * dtheta
    weights = polar * (2.0 * math.pi / n_lon)
    rings = tuple(
        Ring(
            colatitude=float(colat[i]),
            count=n_lon,
            phi_0=0.0,
            quadrature_weight=float(weights[i]),
            pixels=np.arange(i * n_lon, (i + 1) * n_lon),
        )
        for i in range(n_lat)
    )
    for r in rings:
        _freeze(r.pixels)
    _freeze(colat, lon, weights)
    return LatLonGrid(n_lat, n_lon, colat, lon, weights, rings, quadrature)


def cell_area_weights(grid: LatLonGrid) -> np.ndarray:
    """Per-row cell weights ``a_i`` proportional to ``sin(colatitude)``.

    Normalized so that the sum over *all cells* (rows times ``n_lon``) is 1.
    """
    sin = np.where(
        grid.colatitudes <= 0.5 * math.pi,
        np.sin(grid.colatitudes),
        np.sin(math.pi - grid.colatitudes),
    )
    if sin.sum() == 0.0:
        raise ValueError("a grid made of pole rows only has no area to weight")
    return sin / (sin.sum() * grid.n_lon)


def _check_nside(nside: int) -> None:
    if nside < 1 or nside & (nside - 1):
        raise ValueError(f"nside must be a power of two, got {nside}")


def _ring_layout(nside: int):
    """Ring number (1-based) and in-ring position of every (h, ix, iy)."""
    h, ix, iy = np.meshgrid(
        np.arange(12), np.arange(nside), np.arange(nside), indexing="ij"
    )
    jr = _JRLL[h] * nside - ix - iy - 1
    nr = np.where(jr < nside, jr, np.where(jr > 3 * nside, 4 * nside - jr, nside))
    kshift = np.where((jr >= nside) & (jr <= 3 * nside), (jr - nside) & 1, 0)
    jp = (_JPLL[h] * nr + ix - iy + 1 + kshift) // 2
    jp = np.where(jp > 4 * nr, jp - 4 * nr, jp)
    jp = np.where(jp < 1, jp + 4 * nr, jp)
    return jr, nr, kshift, jp


def _ring_colatitude(jr: int, nside: int) -> float:
    if jr > 2 * nside:
        return math.pi - _ring_colatitude(4 * nside - jr, nside)
    if jr < nside:
        # 1 - z = jr^2 / (3 nside^2), kept exact through the half-angle form.
        return 2.0 * math.asin(jr / (math.sqrt(6.0) * nside))
    return math.acos((2 * nside - jr) * 2.0 / (3.0 * nside))


def build_healpix_grid(nside: int) -> HealpixGrid:
    """Ring-scheme HEALPix pixel centres organised as 12 ``nside x nside`` tiles."""
    _check_nside(nside)
    jr, nr, kshift, jp = _ring_layout(nside)
    ring_theta = np.array([_ring_colatitude(j, nside) for j in range(1, 4 * nside)])
    theta = ring_theta[jr - 1]
    phi = (jp - 0.5 * (kshift + 1)) * (0.5 * math.pi) / nr

    weight = 4.0 * math.pi / (12 * nside * nside)
    flat_ring = (jr - 1).reshape(-1)
    flat_pos = (jp - 1).reshape(-1)
    order = np.lexsort((flat_pos, flat_ring))
    sorted_ring = flat_ring[order]
    bounds = np.searchsorted(sorted_ring, np.arange(4 * nside))
    rings = []
    for j in range(4 * nside - 1):
        members = order[bounds[j] : bounds[j + 1]]
        count = members.shape[0]
        nr_j = min(j + 1, 4 * nside - j - 1, nside)
        belt = nside <= j + 1 <= 3 * nside
        shifted = belt and ((j + 1 - nside) & 1)
        phi_0 = 0.0 if shifted else 0.25 * math.pi / nr_j
        _freeze(members)
        rings.append(Ring(float(ring_theta[j]), int(count), phi_0, weight, members))

    ring_of_pixel = (jr - 1).astype(np.int64)
    _freeze(theta, phi, ring_of_pixel)
    return HealpixGrid(nside, theta, phi, tuple(rings), ring_of_pixel)


def healpix_rings(grid: HealpixGrid) -> tuple[Ring, ...]:
    return grid.rings


def unit_vectors(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    sin = np.sin(theta)
    return np.stack([sin * np.cos(phi), sin * np.sin(phi), np.cos(theta)], axis=-1)


def _to_angles(vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    theta = np.arctan2(np.hypot(x, y), z)
    phi = np.mod(np.arctan2(y, x), 2.0 * math.pi)
    return theta, phi


def locate_pixels(nside: int, theta, phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base tile and in-tile ``(ix, iy)`` of the pixel containing each point."""
    _check_nside(nside)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    z = np.cos(theta)
    za = np.abs(z)
    tt = np.mod(phi * (2.0 / math.pi), 4.0)

    # equatorial belt
    t1 = nside * (0.5 + tt)
    t2 = nside * z * 0.75
    jp = (t1 - t2).astype(np.int64)
    jm = (t1 + t2).astype(np.int64)
    ifp = jp // nside
    ifm = jm // nside
    face_eq = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))
    ix_eq = jm & (nside - 1)
    iy_eq = nside - (jp & (nside - 1)) - 1

    # polar caps; sqrt(3 (1 - |z|)) via the half-angle for accuracy near poles
    ntt = np.minimum(tt.astype(np.int64), 3)
    tp = tt - ntt
    half = np.where(z >= 0, theta, math.pi - theta) * 0.5
    tmp = nside * math.sqrt(6.0) * np.sin(half)
    jpp = np.minimum((tp * tmp).astype(np.int64), nside - 1)
    jmp = np.minimum(((1.0 - tp) * tmp).astype(np.int64), nside - 1)
    north = z >= 0
    face_p = np.where(north, ntt, ntt + 8)
    ix_p = np.where(north, nside - jmp - 1, jpp)
    iy_p = np.where(north, nside - jpp - 1, jmp)

    polar = za > 2.0 / 3.0
    face = np.where(polar, face_p, face_eq)
    ix = np.where(polar, ix_p, ix_eq)
    iy = np.where(polar, iy_p, iy_eq)
    return face, ix, iy


def _extend_tile(vec: np.ndarray, pad: int) -> np.ndarray:
    """Bilinear extrapolation of a ``(t, t, 3)`` tile to ``(t+2p, t+2p, 3)``."""
    t = vec.shape[0]
    a = np.arange(-pad, t + pad)
    if t == 1:
        return np.broadcast_to(vec[0, 0], (a.size, a.size, 3)).copy()
    cell = np.clip(a, 0, t - 2)
    u = (a - cell).astype(np.float64)
    ca, cb = np.meshgrid(cell, cell, indexing="ij")
    ua, ub = np.meshgrid(u, u, indexing="ij")
    ua, ub = ua[..., None], ub[..., None]
    p00 = vec[ca, cb]
    p10 = vec[ca + 1, cb]
    p01 = vec[ca, cb + 1]
    p11 = vec[ca + 1, cb + 1]
    out = (1 - ua) * (1 - ub) * p00 + ua * (1 - ub) * p10 + (1 - ua) * ub * p01 + ua * ub * p11
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _margin_depth(t: int, pad: int) -> np.ndarray:
    a = np.arange(-pad, t + pad)
    d = np.maximum(np.maximum(-a, a - (t - 1)), 0)
    return np.maximum(d[:, None], d[None, :])


def build_padded_geometry(grid: HealpixGrid, pad: int = 16) -> PaddedTileGeometry:
    """Grow every tile by ``pad`` cells using Cartesian extrapolation.

    Pixel-centre unit vectors are bilinearly extrapolated past the tile edges
    (corner blocks included) and projected back onto the sphere.  The central
    block keeps the exact HEALPix centres.  Blend weights are 1 inside the tile
    and ``1 - k/(pad+1)`` at margin depth ``k``.
    """
    t = grid.nside
    if pad < 0 or pad >= t:
        raise ValueError(f"pad must satisfy 0 <= pad < nside={t}, got {pad}")
    size = t + 2 * pad
    centre = unit_vectors(grid.theta, grid.phi)
    coords = np.empty((12, size, size, 3))
    theta = np.empty((12, size, size))
    phi = np.empty((12, size, size))
    inner = (slice(pad, pad + t),) * 2
    for h in range(12):
        coords[h] = _extend_tile(centre[h], pad)
        theta[h], phi[h] = _to_angles(coords[h])
        coords[h][inner] = centre[h]
        theta[h][inner] = grid.theta[h]
        phi[h][inner] = grid.phi[h]

    depth = _margin_depth(t, pad)
    weights = 1.0 - depth / (pad + 1.0)
    target, source, coef, bw = _blend_map(grid, coords, depth, weights)
    _freeze(coords, theta, phi, weights, target, source, coef, bw)
    return PaddedTileGeometry(grid, pad, coords, theta, phi, weights, target, source, coef, bw)


_NEWTON_STEPS = 3


def _solve_local(ea, eb, d):
    m11 = np.einsum("ij,ij->i", ea, ea)
    m12 = np.einsum("ij,ij->i", ea, eb)
    m22 = np.einsum("ij,ij->i", eb, eb)
    r1 = np.einsum("ij,ij->i", ea, d)
    r2 = np.einsum("ij,ij->i", eb, d)
    det = m11 * m22 - m12 * m12
    return (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det


def _bilinear_stencil(fa, fb, size):
    a0 = np.clip(np.floor(fa).astype(np.int64), 0, size - 2)
    b0 = np.clip(np.floor(fb).astype(np.int64), 0, size - 2)
    u = np.clip(fa - a0, 0.0, 1.0)
    v = np.clip(fb - b0, 0.0, 1.0)
    cells = np.stack([a0 * size + b0, (a0 + 1) * size + b0, a0 * size + b0 + 1, (a0 + 1) * size + b0 + 1], 1)
    coef = np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], 1)
    return cells, coef


def _blend_map(grid, coords, depth, weights):
    """Bilinear stencils into every overlapping neighbour's padded tile.

    A pixel is covered by tile ``g`` when its position, expressed in ``g``'s
    padded index space, lies inside the padded square and its nearest padded
    cell is a margin cell.  The fractional position comes from the local
    affine frame at the nearest cell, refined by Newton steps on the
    bilinear map; stencils that do not reproduce the pixel centre to within
    a tenth of a pixel width are dropped.
    """
    size = depth.shape[0]
    t = grid.nside
    if size == t:
        return np.empty(0, np.int64), np.empty((0, 4), np.int64), np.empty((0, 4)), np.empty(0)
    centre = unit_vectors(grid.theta.reshape(-1), grid.phi.reshape(-1))
    tile_of = np.arange(grid.n_pix) // (t * t)
    bound = 2.0 * math.sin(0.75 * math.sqrt(grid.pixel_area))
    tol = 0.1 * math.sqrt(grid.pixel_area)
    flat_depth = depth.reshape(-1)
    flat_w = weights.reshape(-1)
    out = ([], [], [], [])
    for g in range(12):
        pts = coords[g]
        flat_pts = pts.reshape(-1, 3)
        cand = np.flatnonzero(tile_of != g)
        dist, near = cKDTree(flat_pts).query(centre[cand], distance_upper_bound=bound)
        ok = np.isfinite(dist)
        cand, near = cand[ok], near[ok]
        ok = flat_depth[near] > 0
        cand, near = cand[ok], near[ok]
        a, b = np.divmod(near, size)
        a1 = np.where(a + 1 < size, a + 1, a - 1)
        b1 = np.where(b + 1 < size, b + 1, b - 1)
        ea = (pts[a1, b] - pts[a, b]) * np.where(a1 > a, 1.0, -1.0)[:, None]
        eb = (pts[a, b1] - pts[a, b]) * np.where(b1 > b, 1.0, -1.0)[:, None]
        x = centre[cand]
        da, db = _solve_local(ea, eb, x - pts[a, b])
        fa, fb = a + da, b + db
        for _ in range(_NEWTON_STEPS):
            cells, coef = _bilinear_stencil(fa, fb, size)
            c00, c10, c01 = flat_pts[cells[:, 0]], flat_pts[cells[:, 1]], flat_pts[cells[:, 2]]
            pos = np.einsum("ik,ikj->ij", coef, flat_pts[cells])
            da, db = _solve_local(c10 - c00, c01 - c00, x - pos)
            fa, fb = fa + da, fb + db
        cells, coef = _bilinear_stencil(fa, fb, size)
        pos = np.einsum("ik,ikj->ij", coef, flat_pts[cells])
        # folded extrapolation near the polar corners can defeat the solve
        resid = np.linalg.norm(pos - x, axis=1)
        inside = (fa >= -0.5) & (fa <= size - 0.5) & (fb >= -0.5) & (fb <= size - 0.5)
        inside &= resid <= tol
        out[0].append(cand[inside])
        out[1].append(g * size * size + cells[inside])
        out[2].append(coef[inside])
        out[3].append((coef[inside] * flat_w[cells[inside]]).sum(axis=1))
    target = np.concatenate(out[0]).astype(np.int64)
    source = np.concatenate(out[1]).astype(np.int64)
    coef = np.concatenate(out[2])
    bw = np.concatenate(out[3])
    order = np.lexsort((source[:, 0], target))
    return target[order], source[order], coef[order], bw[order]


def tile_edge_pairs(grid: HealpixGrid) -> np.ndarray:
    """Unique pairs of flat pixel indices that are neighbours across a tile edge."""
    if grid.nside < 2:
        raise ValueError("tile edge pairs need nside >= 2")
    t = grid.nside
    centre = unit_vectors(grid.theta, grid.phi)
    pairs = []
    idx = np.arange(t)
    for h in range(12):
        ext = _extend_tile(centre[h], 1)
        # (padded index of the outside cell, tile index of the edge pixel)
        sides = [
            (ext[0, 1:-1], np.stack([np.zeros(t, int), idx], 1)),
            (ext[-1, 1:-1], np.stack([np.full(t, t - 1), idx], 1)),
            (ext[1:-1, 0], np.stack([idx, np.zeros(t, int)], 1)),
            (ext[1:-1, -1], np.stack([idx, np.full(t, t - 1)], 1)),
        ]
        for outside, edge in sides:
            th, ph = _to_angles(outside)
            face, ix, iy = locate_pixels(t, th, ph)
            own = (h * t + edge[:, 0]) * t + edge[:, 1]
            other = (face * t + ix) * t + iy
            ok = face != h
            pairs.append(np.stack([own[ok], other[ok]], 1))
    pairs = np.sort(np.concatenate(pairs), axis=1)
    return np.unique(pairs, axis=0)


def grid_descriptor(grid, pad: int | None = None) -> dict:
    if isinstance(grid, LatLonGrid):
        desc = {"type": "latlon", "n_lat": grid.n_lat, "n_lon": grid.n_lon}
        if grid.quadrature != "trapezoid":
            desc["quadrature"] = grid.quadrature
        return desc
    desc = {"type": "healpix", "nside": grid.nside}
    if pad is not None:
        desc["pad"] = pad
    return desc


def grid_from_descriptor(desc):
    """Rebuild a grid (and padded geometry when ``pad`` is present)."""
    if isinstance(desc, str):
        desc = json.loads(desc)
    kind = desc.get("type")
    if kind == "latlon":
        return build_latlon_grid(
            int(desc["n_lat"]), int(desc["n_lon"]), desc.get("quadrature", "trapezoid")
        )
    if kind == "healpix":
        grid = build_healpix_grid(int(desc["nside"]))
        if desc.get("pad") is not None:
            return build_padded_geometry(grid, int(desc["pad"]))
        return grid
    raise ValueError(f"unknown grid type {kind!r}")
