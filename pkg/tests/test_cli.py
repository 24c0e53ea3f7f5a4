import csv
import json
import math
import subprocess

import numpy as np
import pytest

from healsht import codec
from healsht.cli import derive_seed, main
from healsht.io import read_field, write_field
from healsht.sht import load_coeffs


def run(tmp_path, command, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


def synth(tmp_path, out, grid, kind="random", **kw):
    cfg = {"grid": grid, "kind": kind, "output": str(tmp_path / out), **kw}
    assert run(tmp_path, "synth-field", cfg, name=f"{out}.json") == 0
    return tmp_path / out


LATLON = {"type": "latlon", "n_lat": 37, "n_lon": 72}


class TestSynthField:
    def test_constant(self, tmp_path):
        p = synth(tmp_path, "c.fld", LATLON, "constant", value=2.5)
        ff = read_field(p)
        assert ff.grid_tag == "latlon" and np.all(ff.data == 2.5)
        assert ff.meta["grid"] == LATLON

    def test_unit_monopole(self, tmp_path):
        p = synth(tmp_path, "u.fld", {"type": "healpix", "nside": 4}, "harmonic",
                  l=0, m=0, amplitude=math.sqrt(4 * math.pi))
        ff = read_field(p)
        assert ff.grid_tag == "healpix" and ff.data.shape == (12, 4, 4)
        np.testing.assert_allclose(ff.data, 1.0, atol=1e-14)

    def test_random_reproducible(self, tmp_path):
        a = synth(tmp_path, "a.fld", LATLON, l_max=10, seed=5, coeffs_output=str(tmp_path / "a.alm"))
        b = synth(tmp_path, "b.fld", LATLON, l_max=10, seed=5)
        c = synth(tmp_path, "c.fld", LATLON, l_max=10, seed=6)
        assert a.read_bytes() == b.read_bytes() != c.read_bytes()
        assert load_coeffs(tmp_path / "a.alm").l_max == 10

    def test_missing_parameters(self, tmp_path):
        cfg = {"grid": LATLON, "kind": "constant", "output": str(tmp_path / "x.fld")}
        assert run(tmp_path, "synth-field", cfg) == 2
        cfg = {"grid": LATLON, "kind": "harmonic", "l": 1, "m": 2, "output": str(tmp_path / "x.fld")}
        assert run(tmp_path, "synth-field", cfg) == 2

    def test_seed_derivation(self):
        assert derive_seed(1, "a") == derive_seed(1, "a")
        assert len({derive_seed(1, "a"), derive_seed(1, "b"), derive_seed(2, "a")}) == 3
        assert 0 <= derive_seed(2**64 - 1, "x") < 2**64


class TestExitCodes:
    def test_bad_json(self, tmp_path):
        (tmp_path / "cfg.json").write_text("{not json")
        assert main(["spectrum", "--config", str(tmp_path / "cfg.json")]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["spectrum", "--config", str(tmp_path / "none.json")]) == 2

    def test_schema_violation(self, tmp_path):
        assert run(tmp_path, "spectrum", {"input": "x", "l_max": -1, "output": "y"}) == 2
        assert run(tmp_path, "spectrum", {"input": "x", "l_max": 4, "output": "y", "bogus": 1}) == 2

    def test_input_flag_on_inputless_command(self, tmp_path):
        cfg = {"grid": LATLON, "kind": "constant", "value": 1, "output": str(tmp_path / "x.fld")}
        assert run(tmp_path, "synth-field", cfg, "--input", "foo") == 2

    def test_bad_threads(self, tmp_path, monkeypatch):
        cfg = {"grid": LATLON, "kind": "constant", "value": 1, "output": str(tmp_path / "x.fld")}
        assert run(tmp_path, "synth-field", cfg, "--threads", "0") == 2
        monkeypatch.setenv("HEALSHT_THREADS", "abc")
        assert run(tmp_path, "synth-field", cfg) == 2

    def test_missing_input_file(self, tmp_path):
        cfg = {"input": str(tmp_path / "none.fld"), "l_max": 4, "output": str(tmp_path / "s.csv")}
        assert run(tmp_path, "spectrum", cfg) == 3

    def test_corrupt_input(self, tmp_path):
        (tmp_path / "bad.fld").write_bytes(b"FLD1\x01")
        cfg = {"input": str(tmp_path / "bad.fld"), "l_max": 4, "output": str(tmp_path / "s.csv")}
        assert run(tmp_path, "spectrum", cfg) == 3

    def test_grid_tag_mismatch(self, tmp_path):
        hp = synth(tmp_path, "h.fld", {"type": "healpix", "nside": 4}, "constant", value=1.0)
        cfg = {"input": str(hp), "nside": 4, "output": str(tmp_path / "o.fld")}
        assert run(tmp_path, "project", cfg) == 3
        ll = synth(tmp_path, "l.fld", LATLON, "constant", value=1.0)
        cfg = {"input": str(ll), "l_max": 4, "n_lat": 10, "n_lon": 20, "output": str(tmp_path / "o.fld")}
        assert run(tmp_path, "reproject", cfg) == 3

    def test_shape_descriptor_mismatch(self, tmp_path):
        write_field(tmp_path / "x.fld", np.zeros((5, 5)), "latlon", {"grid": LATLON})
        cfg = {"input": str(tmp_path / "x.fld"), "l_max": 2, "output": str(tmp_path / "s.csv")}
        assert run(tmp_path, "spectrum", cfg) == 3

    def test_metrics_on_different_grids(self, tmp_path):
        a = synth(tmp_path, "a.fld", LATLON, "constant", value=1.0)
        b = synth(tmp_path, "b.fld", {"type": "latlon", "n_lat": 19, "n_lon": 36}, "constant", value=1.0)
        assert run(tmp_path, "metrics", {"truth": str(a), "recon": str(b), "output": str(tmp_path / "m.json")}) == 3

    def test_numeric_overflow(self, tmp_path):
        grid = {"type": "healpix", "nside": 2}
        write_field(tmp_path / "a.fld", np.full((12, 2, 2), -1e308), "healpix", {"grid": grid})
        write_field(tmp_path / "b.fld", np.full((12, 2, 2), 1e308), "healpix", {"grid": grid})
        cfg = {"truth": str(tmp_path / "a.fld"), "recon": str(tmp_path / "b.fld"),
               "output": str(tmp_path / "m.json")}
        assert run(tmp_path, "metrics", cfg) == 4
        assert not (tmp_path / "m.json").exists()

    def test_high_lmax_refused(self, tmp_path):
        hp = synth(tmp_path, "h.fld", {"type": "healpix", "nside": 4}, "constant", value=1.0)
        cfg = {"input": str(hp), "l_max": 12, "n_lat": 40, "n_lon": 80, "output": str(tmp_path / "o.fld")}
        assert run(tmp_path, "reproject", cfg) == 2
        assert run(tmp_path, "reproject", {**cfg, "allow_high_lmax": True}) == 0


class TestProjectReproject:
    def test_constant_roundtrip(self, tmp_path):
        src = synth(tmp_path, "c.fld", {"type": "latlon", "n_lat": 91, "n_lon": 180}, "constant", value=3.0)
        for mode in ("direct", "padded", "blended"):
            out = tmp_path / f"{mode}.fld"
            assert run(tmp_path, "project", {"input": str(src), "nside": 16, "mode": mode, "pad": 4,
                                             "output": str(out)}) == 0
            ff = read_field(out)
            assert ff.grid_tag == ("healpix_padded" if mode == "padded" else "healpix")
            np.testing.assert_allclose(ff.data, 3.0, atol=1e-12)
        rep = tmp_path / "rep.fld"
        cfg = {"input": str(tmp_path / "padded.fld"), "l_max": 16, "n_lat": 46, "n_lon": 90,
               "iterations": 3, "output": str(rep)}
        assert run(tmp_path, "reproject", cfg) == 0
        ff = read_field(rep)
        assert ff.grid_tag == "latlon" and ff.data.shape == (46, 90)
        np.testing.assert_allclose(ff.data, 3.0, atol=1e-3)

    def test_bandlimited_roundtrip(self, tmp_path):
        src = synth(tmp_path, "r.fld", {"type": "latlon", "n_lat": 181, "n_lon": 360}, l_max=8, seed=3)
        assert run(tmp_path, "project", {"input": str(src), "nside": 32, "output": str(tmp_path / "h.fld")}) == 0
        cfg = {"input": str(tmp_path / "h.fld"), "l_max": 8, "n_lat": 181, "n_lon": 360,
               "iterations": 3, "output": str(tmp_path / "back.fld")}
        assert run(tmp_path, "reproject", cfg) == 0
        a, b = read_field(src).data, read_field(tmp_path / "back.fld").data
        assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-2


class TestSpectrumMetrics:
    def test_spectrum_of_harmonic(self, tmp_path):
        p = synth(tmp_path, "h.fld", {"type": "latlon", "n_lat": 61, "n_lon": 120}, "harmonic",
                  l=3, m=2, amplitude=[1.0, 1.0])
        assert run(tmp_path, "spectrum", {"input": str(p), "l_max": 6, "output": str(tmp_path / "s.csv")}) == 0
        rows = list(csv.reader((tmp_path / "s.csv").open()))[1:]
        vals = np.array([float(r[1]) for r in rows])
        assert len(vals) == 7 and np.argmax(vals) == 3
        assert vals[3] == pytest.approx(2 * 2 / 7, rel=1e-8)  # 2|a|^2 / (2l+1)

    def test_metrics_identical_zero(self, tmp_path):
        a = synth(tmp_path, "a.fld", LATLON, l_max=6, seed=1)
        cfg = {"truth": str(a), "recon": str(a), "output": str(tmp_path / "m.json"),
               "csv_output": str(tmp_path / "m.csv"), "thresholds": [0.1],
               "histogram_bin_width": 0.1, "histogram_output": str(tmp_path / "h.csv")}
        assert run(tmp_path, "metrics", cfg) == 0
        recs = json.loads((tmp_path / "m.json").read_text())
        assert {r["metric"] for r in recs} == {"wmae", "wrmse", "wrmse_trad", "bad_pixel_fraction>0.1"}
        assert all(r["value"] == 0.0 for r in recs)
        assert (tmp_path / "h.csv").read_text().splitlines()[1:] == ["0.0,1.0"]

    def test_metrics_offset_healpix(self, tmp_path):
        a = synth(tmp_path, "a.fld", {"type": "healpix", "nside": 8}, "constant", value=1.0)
        b = synth(tmp_path, "b.fld", {"type": "healpix", "nside": 8}, "constant", value=1.5)
        cfg = {"truth": str(a), "recon": str(b), "output": str(tmp_path / "m.json"), "variable": "t", "level": 2,
               "spectrum": {"l_max": 4, "output": str(tmp_path / "sc.csv")}}
        assert run(tmp_path, "metrics", cfg) == 0
        recs = {r["metric"]: r for r in json.loads((tmp_path / "m.json").read_text())}
        assert recs["mae"]["value"] == pytest.approx(0.5) and recs["rmse"]["value"] == pytest.approx(0.5)
        assert recs["mae"]["variable"] == "t" and recs["mae"]["level"] == 2
        row0 = (tmp_path / "sc.csv").read_text().splitlines()[1].split(",")
        assert float(row0[1]) == pytest.approx(2.25, rel=1e-3)


def _codeword_field(tmp_path, nside=8, p=2):
    rng = np.random.default_rng(0)
    words = rng.standard_normal((6, p * p)).astype(np.float32).astype(np.float64)
    g = nside // p
    idx = rng.integers(0, 6, (12, g * g))
    tiles = np.stack([codec.assemble_patches(words[idx[h]], (g, g), p, 1)[0] for h in range(12)])
    path = tmp_path / "cw.fld"
    write_field(path, tiles, "healpix", {"grid": {"type": "healpix", "nside": nside}, "units": "K"})
    book = codec.Codebook(words, 0)
    codec.save_codebook(book, tmp_path / "book.cbk")
    return path, tiles


class TestCodec:
    def test_lossless_codeword_field(self, tmp_path):
        path, tiles = _codeword_field(tmp_path)
        cfg = {"input": str(path), "output": str(tmp_path / "z"),
               "codec": {"patch_size": 2, "codebook_path": str(tmp_path / "book.cbk"), "standardize": False}}
        assert run(tmp_path, "compress", cfg) == 0
        assert run(tmp_path, "decompress", {"input": str(tmp_path / "z"), "output": str(tmp_path / "d.fld")},
                   name="d.json") == 0
        ff = read_field(tmp_path / "d.fld")
        np.testing.assert_array_equal(ff.data, tiles)
        assert ff.meta["units"] == "K"
        man = json.loads((tmp_path / "z" / "manifest.json").read_text())
        assert round(man["ratios"]["reference_ratio_5x256x256_vs_32x32x13"]) == 788
        assert man["ratios"]["naive_bits_per_index"] == 3

    def test_trained_with_capping_and_determinism(self, tmp_path):
        a = synth(tmp_path, "a.fld", {"type": "healpix", "nside": 16}, l_max=12, seed=2)
        b = synth(tmp_path, "b.fld", {"type": "healpix", "nside": 16}, l_max=12, seed=3)
        base = {"input": [str(a), str(b)], "seed": 9,
                "codec": {"size": 32, "patch_size": 4, "bad_pixel_threshold": [0.3, 0.3], "calibrate": True}}
        assert run(tmp_path, "compress", {**base, "output": str(tmp_path / "z1")}) == 0
        assert run(tmp_path, "compress", {**base, "output": str(tmp_path / "z8")}, "--threads", "8") == 0
        for f in ("codebook.cbk", "indices.qti", "badpixels.csv", "manifest.json"):
            assert (tmp_path / "z1" / f).read_bytes() == (tmp_path / "z8" / f).read_bytes()
        outs = [str(tmp_path / "da.fld"), str(tmp_path / "db.fld")]
        assert run(tmp_path, "decompress", {"input": str(tmp_path / "z1"), "output": outs}, name="d.json") == 0
        for src, out in zip((a, b), outs):
            err = np.abs(read_field(src).data - read_field(out).data)
            assert err.max() <= 0.3
        man = json.loads((tmp_path / "z1" / "manifest.json").read_text())
        r = man["ratios"]
        entries = man["bad_pixels"]["entries"]
        addr = math.ceil(math.log2(12 * 16 * 16 * 2))
        assert r["bad_pixel_table_bits"] == entries * (addr + 32)
        assert r["side_info_bits"] == r["bad_pixel_table_bits"] + 12 * 2 * 64
        bits_in = 12 * 2 * 16 * 16 * 32
        assert r["naive_ratio"] == pytest.approx(bits_in / (12 * 4 * 4 * 5))
        assert r["effective_ratio"] == pytest.approx(
            bits_in / (12 * 4 * 4 * r["entropy_bits_per_index"] + r["side_info_bits"]))

    def test_channel_count_mismatch(self, tmp_path):
        path, _ = _codeword_field(tmp_path)
        cfg = {"input": str(path), "output": str(tmp_path / "z"),
               "codec": {"patch_size": 2, "codebook_path": str(tmp_path / "book.cbk"), "standardize": False}}
        assert run(tmp_path, "compress", cfg) == 0
        cfg = {"input": str(tmp_path / "z"), "output": [str(tmp_path / "1.fld"), str(tmp_path / "2.fld")]}
        assert run(tmp_path, "decompress", cfg, name="d.json") == 2

    def test_corrupt_archive(self, tmp_path):
        path, _ = _codeword_field(tmp_path)
        cfg = {"input": str(path), "output": str(tmp_path / "z"),
               "codec": {"patch_size": 2, "codebook_path": str(tmp_path / "book.cbk")}}
        assert run(tmp_path, "compress", cfg) == 0
        (tmp_path / "z" / "indices.qti").write_bytes(b"QTI1\x00")
        assert run(tmp_path, "decompress", {"input": str(tmp_path / "z"), "output": str(tmp_path / "d.fld")},
                   name="d.json") == 3
        (tmp_path / "z" / "codebook.cbk").unlink()
        assert run(tmp_path, "decompress", {"input": str(tmp_path / "z"), "output": str(tmp_path / "d.fld")},
                   name="d.json") == 3

    def test_patch_size_mismatch(self, tmp_path):
        path, _ = _codeword_field(tmp_path)
        cfg = {"input": str(path), "output": str(tmp_path / "z"), "codec": {"patch_size": 3, "size": 4}}
        assert run(tmp_path, "compress", cfg) == 2


def test_roundtrip_small(tmp_path):
    cfg = {"seed": 1, "nside": 8, "pad": 4, "l_max": 8, "source": {"n_lat": 37, "n_lon": 72},
           "codec": {"size": 16, "patch_size": 2, "bad_pixel_threshold": 0.5},
           "thresholds": [0.5], "histogram_bin_width": 0.1}
    assert run(tmp_path, "roundtrip", cfg, "--out", str(tmp_path / "rt")) == 0
    out = tmp_path / "rt"
    for f in ("source.fld", "source.alm", "padded.fld", "healpix.fld", "healpix_recon.fld", "healpix.alm",
              "reprojected.fld", "source_spectrum.csv", "healpix_spectrum.csv", "spectrum_comparison.csv",
              "metrics.json", "metrics.csv", "error_histogram.csv", "compressed/manifest.json"):
        assert (out / f).exists(), f
    recs = json.loads((out / "metrics.json").read_text())
    assert {r["variable"] for r in recs} == {"healpix", "latlon"}
    hp = {r["metric"]: r["value"] for r in recs if r["variable"] == "healpix"}
    assert hp["mae"] <= hp["rmse"]
    assert hp["bad_pixel_fraction>0.5"] == 0.0


def test_console_script(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(
        {"grid": LATLON, "kind": "constant", "value": 1.0, "output": str(tmp_path / "x.fld")}))
    res = subprocess.run(["healsht", "synth-field", "--config", str(tmp_path / "c.json")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run(["healsht", "spectrum", "--config", str(tmp_path / "c.json")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "invalid config" in res.stderr
