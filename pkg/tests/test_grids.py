import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from healsht.grids import (
    QUADRATURES,
    build_healpix_grid,
    build_latlon_grid,
    build_padded_geometry,
    cell_area_weights,
    grid_descriptor,
    grid_from_descriptor,
    healpix_rings,
    locate_pixels,
    tile_edge_pairs,
    unit_vectors,
)

NSIDES = [1, 2, 4, 8, 16, 32, 64]


def ring_z(i, nside):
    # standard ring-scheme closed forms, north half
    if i < nside:
        return 1.0 - i * i / (3.0 * nside * nside)
    return 4.0 / 3.0 - 2.0 * i / (3.0 * nside)


class TestLatLon:
    def test_quarter_degree_grid(self):
        g = build_latlon_grid(721, 1440)
        assert np.degrees(g.colatitudes[1]) == pytest.approx(0.25, abs=1e-12)
        assert np.degrees(g.longitudes[1]) == pytest.approx(0.25, abs=1e-12)
        assert np.degrees(g.longitudes[-1]) == pytest.approx(359.75, abs=1e-12)
        assert g.colatitudes[0] == 0.0 and g.colatitudes[-1] == np.pi
        assert np.all(np.diff(g.colatitudes) > 0)

    def test_poles_only(self):
        g = build_latlon_grid(2, 4)
        np.testing.assert_array_equal(g.colatitudes, [0.0, np.pi])
        np.testing.assert_array_equal(g.area_weights, [0.0, 0.0])

    def test_trapezoid_area_matches_closed_form(self):
        # the trapezoid rule on sin(theta) sums to (pi/(n-1)) cot(pi/(2(n-1))) exactly
        g = build_latlon_grid(181, 360)
        total = float(np.sum(g.area_weights) * g.n_lon)
        h = np.pi / 180
        assert total == pytest.approx(2 * np.pi * h / math.tan(h / 2), rel=1e-13)
        assert abs(total - 4 * np.pi) == pytest.approx(3.19e-4, rel=1e-2)

    def test_area_within_1e6_with_fejer(self):
        g = build_latlon_grid(181, 360, quadrature="fejer2")
        assert abs(np.sum(g.area_weights) * g.n_lon - 4 * np.pi) <= 1e-6
        assert g.area_weights[0] == 0.0 and g.area_weights[-1] == 0.0

    def test_trapezoid_weights_formula(self):
        g = build_latlon_grid(19, 36)
        dth = np.pi / 18
        np.testing.assert_allclose(g.area_weights, np.sin(g.colatitudes) * dth * 2 * np.pi / 36, atol=1e-16)

    def test_rings(self):
        g = build_latlon_grid(5, 8)
        assert len(g.rings) == 5
        flat = np.concatenate([r.pixels for r in g.rings])
        np.testing.assert_array_equal(np.sort(flat), np.arange(40))
        assert all(r.phi_0 == 0.0 and r.count == 8 for r in g.rings)

    def test_errors(self):
        with pytest.raises(ValueError):
            build_latlon_grid(1, 4)
        with pytest.raises(ValueError):
            build_latlon_grid(5, 0)
        with pytest.raises(ValueError):
            build_latlon_grid(5, 8, quadrature="gauss")
        assert "trapezoid" in QUADRATURES


class TestCellAreaWeights:
    @pytest.mark.parametrize("shape", [(721, 1440), (181, 360), (4, 3), (3, 1)])
    def test_normalized(self, shape):
        g = build_latlon_grid(*shape)
        a = cell_area_weights(g)
        assert a.sum() * g.n_lon == pytest.approx(1.0, abs=1e-12)

    def test_pole_only_grid(self):
        with pytest.raises(ValueError):
            cell_area_weights(build_latlon_grid(2, 1))

    def test_pole_rows_zero(self):
        a = cell_area_weights(build_latlon_grid(721, 1440))
        assert a[0] == 0.0 and a[-1] == 0.0

    def test_equator_maximal(self):
        g = build_latlon_grid(181, 360)
        a = cell_area_weights(g)
        assert np.argmax(a) == 90 and a[90] == a.max()

    def test_proportional_to_sin(self):
        g = build_latlon_grid(37, 72)
        a = cell_area_weights(g)
        s = np.sin(g.colatitudes)
        np.testing.assert_allclose(a[1:-1] / s[1:-1], a[18] / s[18], rtol=1e-12)


class TestHealpix:
    @pytest.mark.parametrize("nside", NSIDES)
    def test_counts_and_partition(self, nside):
        g = build_healpix_grid(nside)
        assert g.n_pix == 12 * nside * nside
        assert g.theta.shape == (12, nside, nside)
        assert len(g.rings) == 4 * nside - 1
        flat = np.concatenate([r.pixels for r in g.rings])
        np.testing.assert_array_equal(np.sort(flat), np.arange(g.n_pix))
        assert sum(r.count for r in g.rings) == g.n_pix

    @pytest.mark.parametrize("nside", NSIDES)
    def test_ring_structure(self, nside):
        g = build_healpix_grid(nside)
        phi = g.phi.reshape(-1)
        theta = g.theta.reshape(-1)
        for j, r in enumerate(g.rings, start=1):
            i = min(j, 4 * nside - j)
            z = ring_z(i, nside) * (1 if j <= 2 * nside else -1)
            assert math.cos(r.colatitude) == pytest.approx(z, abs=1e-14)
            assert r.count == (4 * i if i < nside else 4 * nside)
            assert 0 <= r.phi_0 < 2 * np.pi / r.count
            assert 0 < r.colatitude < np.pi
            np.testing.assert_allclose(np.diff(phi[r.pixels]), 2 * np.pi / r.count, atol=1e-12)
            assert phi[r.pixels][0] == pytest.approx(r.phi_0, abs=1e-15)
            assert np.all(theta[r.pixels] == r.colatitude)

    def test_offsets_nside1(self):
        g = build_healpix_grid(1)
        assert [r.count for r in g.rings] == [4, 4, 4]
        np.testing.assert_allclose([r.phi_0 for r in g.rings], [np.pi / 4, 0.0, np.pi / 4], atol=1e-15)

    def test_nside2_equator(self):
        g = build_healpix_grid(2)
        assert len(g.rings) == 7
        eq = g.rings[3]
        assert math.cos(eq.colatitude) == pytest.approx(0.0, abs=1e-15)
        assert eq.count == 8

    def test_nside256_pixel_count(self):
        g = build_healpix_grid(256)
        assert g.n_pix == 786_432
        assert g.pixel_area == pytest.approx(1.5979e-5, rel=1e-4)

    @pytest.mark.parametrize("nside", NSIDES)
    def test_area_accounting(self, nside):
        g = build_healpix_grid(nside)
        assert abs(sum(r.count * r.quadrature_weight for r in g.rings) - 4 * np.pi) <= 1e-9

    @pytest.mark.parametrize("nside", NSIDES)
    def test_symmetric_about_equator(self, nside):
        z = np.cos(build_healpix_grid(nside).ring_colatitudes)
        np.testing.assert_allclose(z, -z[::-1], atol=1e-15)

    @pytest.mark.parametrize("nside", NSIDES)
    def test_antidiagonals_isolatitude(self, nside):
        g = build_healpix_grid(nside)
        ix, iy = np.meshgrid(np.arange(nside), np.arange(nside), indexing="ij")
        for h in range(12):
            for d in range(2 * nside - 1):
                vals = g.theta[h][ix + iy == d]
                assert np.ptp(vals) <= 1e-12

    def test_equal_area_by_counting(self):
        # fraction of pixels north of a cap boundary equals the cap's area fraction
        nside = 16
        g = build_healpix_grid(nside)
        z = np.cos(g.theta.reshape(-1))
        assert np.sum(z > 2 / 3) == 2 * nside * (nside - 1)

    def test_rings_helper(self):
        g = build_healpix_grid(4)
        assert healpix_rings(g) is g.rings

    @pytest.mark.parametrize("bad", [0, 3, 6, -4])
    def test_bad_nside(self, bad):
        with pytest.raises(ValueError):
            build_healpix_grid(bad)

    @pytest.mark.parametrize("nside", [1, 2, 8, 32])
    def test_locate_roundtrip(self, nside):
        g = build_healpix_grid(nside)
        f, ix, iy = locate_pixels(nside, g.theta, g.phi)
        h, a, b = np.indices(g.shape)
        np.testing.assert_array_equal(f, h)
        np.testing.assert_array_equal(ix, a)
        np.testing.assert_array_equal(iy, b)

    @given(st.floats(0, np.pi), st.floats(0, 2 * np.pi, exclude_max=True))
    def test_locate_returns_nearest_pixel_area(self, theta, phi):
        # the located pixel centre is within a pixel diameter of the point
        nside = 16
        g = build_healpix_grid(nside)
        f, ix, iy = locate_pixels(nside, np.array([theta]), np.array([phi]))
        c = unit_vectors(g.theta[f, ix, iy], g.phi[f, ix, iy])
        p = unit_vectors(np.array([theta]), np.array([phi]))
        assert np.arccos(np.clip(np.sum(c * p), -1, 1)) <= 2.5 * math.sqrt(g.pixel_area)


class TestPadding:
    def test_pad_zero_identity(self):
        g = build_healpix_grid(8)
        geo = build_padded_geometry(g, 0)
        np.testing.assert_array_equal(geo.theta, g.theta)
        np.testing.assert_array_equal(geo.phi, g.phi)
        assert np.all(geo.blend_weights == 1.0)
        assert geo.blend_target.size == 0

    def test_padded_size(self):
        # nside=256 geometry is heavier; check size arithmetic on the dataclass
        g = build_healpix_grid(32)
        geo = build_padded_geometry(g, 16)
        assert geo.padded_size == 64
        assert 256 + 2 * 16 == 288

    def test_padded_size_nside256(self):
        geo = build_padded_geometry(build_healpix_grid(256), 16)
        assert geo.coords.shape == (12, 288, 288, 3)

    def test_unit_norm(self):
        geo = build_padded_geometry(build_healpix_grid(64), 2)
        assert np.max(np.abs(np.linalg.norm(geo.coords, axis=-1) - 1)) <= 1e-12

    def test_central_block_exact(self):
        g = build_healpix_grid(16)
        geo = build_padded_geometry(g, 4)
        c = (Ellipsis, *geo.central)
        np.testing.assert_array_equal(geo.theta[c], g.theta)
        np.testing.assert_array_equal(geo.phi[c], g.phi)

    def test_blend_weights(self):
        p = 4
        geo = build_padded_geometry(build_healpix_grid(16), p)
        w = geo.blend_weights
        assert np.all(w[geo.central] == 1.0)
        a = np.arange(-p, 16 + p)
        depth = np.maximum(np.maximum(-a, a - 15), 0)
        k = np.maximum(depth[:, None], depth[None, :])
        np.testing.assert_allclose(w, 1 - k / (p + 1), atol=1e-15)
        assert w.min() == pytest.approx(1 / (p + 1))
        assert np.all((w > 0) & (w <= 1))

    @pytest.mark.parametrize("nside,pad", [(16, 2), (16, 8), (32, 16)])
    def test_padding_continuity(self, nside, pad):
        from scipy.spatial import cKDTree

        g = build_healpix_grid(nside)
        geo = build_padded_geometry(g, pad)
        cen = unit_vectors(*g.pixel_centers)
        width = math.sqrt(g.pixel_area)
        a = np.arange(-pad, nside + pad)
        d = np.maximum(np.maximum(-a, a - (nside - 1)), 0)
        depth1 = np.maximum(d[:, None], d[None, :]) == 1
        tile = np.arange(g.n_pix) // (nside * nside)
        for h in range(12):
            dist, _ = cKDTree(cen[tile != h]).query(geo.coords[h][depth1])
            assert np.max(2 * np.arcsin(dist / 2)) <= 1.5 * width

    def test_blend_map_covers_edges(self):
        # every edge pixel is reached by a neighbour's margin except the tile
        # corners at 3-tile junctions, where extrapolated margins fold over
        g = build_healpix_grid(16)
        geo = build_padded_geometry(g, 4)
        pairs = np.unique(tile_edge_pairs(g))
        covered = np.zeros(g.n_pix, bool)
        covered[geo.blend_target] = True
        missing = pairs[~covered[pairs]]
        _, ix, iy = np.unravel_index(missing, g.shape)
        assert np.all(np.isin(ix, [0, 15]) & np.isin(iy, [0, 15]))
        assert missing.size <= 24
        np.testing.assert_allclose(geo.blend_coef.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(geo.blend_coef >= 0)
        own = geo.blend_source[:, 0] // geo.padded_size**2
        assert np.all(own != geo.blend_target // 256)

    def test_stencils_reproduce_pixel_centres(self):
        g = build_healpix_grid(32)
        geo = build_padded_geometry(g, 8)
        flat = geo.coords.reshape(-1, 3)
        pos = np.einsum("ik,ikj->ij", geo.blend_coef, flat[geo.blend_source])
        x = unit_vectors(*g.pixel_centers)[geo.blend_target]
        assert np.max(np.linalg.norm(pos - x, axis=1)) <= 0.1 * math.sqrt(g.pixel_area) + 1e-12

    def test_pad_too_large(self):
        with pytest.raises(ValueError):
            build_padded_geometry(build_healpix_grid(4), 4)
        with pytest.raises(ValueError):
            build_padded_geometry(build_healpix_grid(4), -1)


class TestEdgePairs:
    def test_pairs_are_neighbours_across_tiles(self):
        g = build_healpix_grid(8)
        pairs = tile_edge_pairs(g)
        assert pairs.shape[1] == 2 and pairs.shape[0] > 0
        assert np.all(pairs[:, 0] // 64 != pairs[:, 1] // 64)
        v = unit_vectors(*g.pixel_centers)
        ang = np.arccos(np.clip(np.sum(v[pairs[:, 0]] * v[pairs[:, 1]], axis=1), -1, 1))
        assert ang.max() <= 2 * math.sqrt(g.pixel_area)
        # each of the 24 shared edges carries nside crossings
        assert pairs.shape[0] >= 24 * 8


class TestDescriptors:
    def test_latlon(self):
        g = build_latlon_grid(19, 36)
        d = grid_descriptor(g)
        assert d == {"type": "latlon", "n_lat": 19, "n_lon": 36}
        h = grid_from_descriptor(json.dumps(d))
        np.testing.assert_array_equal(h.colatitudes, g.colatitudes)

    def test_healpix_and_padded(self):
        g = build_healpix_grid(8)
        assert grid_from_descriptor(grid_descriptor(g)).nside == 8
        geo = grid_from_descriptor(grid_descriptor(g, pad=2))
        assert geo.pad == 2 and geo.grid.nside == 8

    def test_unknown(self):
        with pytest.raises(ValueError):
            grid_from_descriptor({"type": "cubed"})
