"""Command-line driver.

Every command reads a JSON config (``--config``); flags only override paths
and the thread count.  Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric-contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import jsonschema
import numpy as np

from . import codec, metrics
from .grids import (
    HealpixGrid,
    LatLonGrid,
    PaddedTileGeometry,
    build_healpix_grid,
    build_latlon_grid,
    build_padded_geometry,
    cell_area_weights,
    grid_descriptor,
    grid_from_descriptor,
)
from .io import FieldFormatError, read_field, write_field
from .metrics import NumericContractError
from .projection import (
    blend_padded_tiles,
    latlon_to_healpix,
    sample_padded_tiles,
)
from .sht import (
    GridMismatchError,
    ScalarField,
    SphericalCoeffs,
    analyze_iterative,
    power_spectrum,
    ring_table,
    save_coeffs,
    synthesize,
    write_spectrum_csv,
)

__all__ = ["ConfigError", "DataError", "derive_seed", "main", "random_coeffs"]

log = logging.getLogger("healsht")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
THREADS_ENV = "HEALSHT_THREADS"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# -- schemas ----------------------------------------------------------------------

_INT0 = {"type": "integer", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_PATH = {"type": "string", "minLength": 1}
_NUM = {"type": "number"}
_THRESHOLDS = {"oneOf": [{"type": "number", "minimum": 0},
                         {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}]}
_GRID = {
    "oneOf": [
        {"type": "object", "required": ["type", "n_lat", "n_lon"], "additionalProperties": False,
         "properties": {"type": {"const": "latlon"}, "n_lat": {"type": "integer", "minimum": 2},
                        "n_lon": _INT1, "quadrature": {"enum": ["trapezoid", "fejer2"]}}},
        {"type": "object", "required": ["type", "nside"], "additionalProperties": False,
         "properties": {"type": {"const": "healpix"}, "nside": _INT1}},
    ]
}
_CODEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "size": _INT1,
        "patch_size": _INT1,
        "codebook_path": _PATH,
        "standardize": {"type": "boolean"},
        "calibrate": {"type": "boolean"},
        "bad_pixel_threshold": _THRESHOLDS,
    },
    "required": ["patch_size"],
    "anyOf": [{"required": ["size"]}, {"required": ["codebook_path"]}],
}


def _schema(required, props):
    base = {"threads": _INT1, "seed": _INT0}
    return {"type": "object", "required": required, "additionalProperties": False,
            "properties": {**base, **props}}


SCHEMAS = {
    "synth-field": _schema(["grid", "kind", "output"], {
        "grid": _GRID,
        "kind": {"enum": ["constant", "harmonic", "random"]},
        "value": _NUM,
        "l": _INT0,
        "m": _INT0,
        "amplitude": {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}]},
        "l_max": _INT0,
        "spectral_slope": _NUM,
        "units": {"type": "string"},
        "variable": {"type": "string"},
        "output": _PATH,
        "coeffs_output": _PATH,
    }),
    "project": _schema(["input", "nside", "output"], {
        "input": _PATH,
        "nside": _INT1,
        "mode": {"enum": ["direct", "padded", "blended"]},
        "pad": _INT0,
        "output": _PATH,
    }),
    "reproject": _schema(["input", "l_max", "output"], {
        "input": _PATH,
        "l_max": _INT0,
        "n_lat": {"type": "integer", "minimum": 2},
        "n_lon": _INT1,
        "allow_high_lmax": {"type": "boolean"},
        "iterations": _INT0,
        "output": _PATH,
        "coeffs_output": _PATH,
    }),
    "spectrum": _schema(["input", "l_max", "output"], {
        "input": _PATH,
        "l_max": _INT0,
        "mode": {"enum": ["real-field", "literal"]},
        "iterations": _INT0,
        "output": _PATH,
        "coeffs_output": _PATH,
    }),
    "metrics": _schema(["truth", "recon", "output"], {
        "truth": _PATH,
        "recon": _PATH,
        "thresholds": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "histogram_bin_width": {"type": "number", "exclusiveMinimum": 0},
        "histogram_output": _PATH,
        "spectrum": {"type": "object", "required": ["l_max", "output"], "additionalProperties": False,
                     "properties": {"l_max": _INT0, "mode": {"enum": ["real-field", "literal"]},
                                    "iterations": _INT0, "output": _PATH}},
        "variable": {"type": "string"},
        "level": {"type": ["integer", "number", "string", "null"]},
        "output": _PATH,
        "csv_output": _PATH,
    }),
    "compress": _schema(["input", "output", "codec"], {
        "input": {"oneOf": [_PATH, {"type": "array", "items": _PATH, "minItems": 1}]},
        "codec": _CODEC,
        "output": _PATH,
    }),
    "decompress": _schema(["input", "output"], {
        "input": _PATH,
        "output": {"oneOf": [_PATH, {"type": "array", "items": _PATH, "minItems": 1}]},
    }),
    "roundtrip": _schema(["output"], {
        "source": {"type": "object", "additionalProperties": False,
                   "properties": {"n_lat": {"type": "integer", "minimum": 2}, "n_lon": _INT1,
                                  "l_max": _INT0, "spectral_slope": _NUM}},
        "nside": _INT1,
        "pad": _INT0,
        "l_max": _INT0,
        "n_lat": {"type": "integer", "minimum": 2},
        "n_lon": _INT1,
        "allow_high_lmax": {"type": "boolean"},
        "iterations": _INT0,
        "codec": _CODEC,
        "thresholds": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "histogram_bin_width": {"type": "number", "exclusiveMinimum": 0},
        "output": _PATH,
    }),
}


# -- seeding -------------------------------------------------------------------------


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit sub-seed for the named stage of a run."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int, name: str) -> np.random.Generator:
    sub = derive_seed(seed, name)
    log.info("seed %s -> %d", name, sub)
    return np.random.Generator(np.random.Philox(sub))


def random_coeffs(l_max: int, rng: np.random.Generator, spectral_slope: float = 0.0) -> SphericalCoeffs:
    """Gaussian coefficients of a real field with power scaling like ``(l+1)^-slope``.

    ``m = 0`` entries are real; others have unit variance split over real and
    imaginary parts.
    """
    c = SphericalCoeffs.zeros(l_max)
    m = c.orders()
    l = c.degrees()
    re = rng.standard_normal(c.data.size)
    im = rng.standard_normal(c.data.size)
    scale = np.where(m == 0, 1.0, np.sqrt(0.5)) * (l + 1.0) ** (-0.5 * spectral_slope)
    data = scale * np.where(m == 0, re, re + 1j * im)
    return SphericalCoeffs(l_max, data.astype(np.complex128))


# -- file helpers ----------------------------------------------------------------------


def _require_finite(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericContractError(f"{what} contains NaN or infinity")
    return arr


def _write(path, data, grid, *, units: str = "", variable: str = "", extra: dict | None = None) -> None:
    if isinstance(grid, PaddedTileGeometry):
        tag, desc = "healpix_padded", grid_descriptor(grid.grid, grid.pad)
    elif isinstance(grid, HealpixGrid):
        tag, desc = "healpix", grid_descriptor(grid)
    else:
        tag, desc = "latlon", grid_descriptor(grid)
    meta = {"grid": desc, "units": units, "variable": variable, **(extra or {})}
    _require_finite(data, f"output {path}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_field(path, data, tag, meta)


def _load(path, expect: tuple[str, ...]):
    """Read a field file and rebuild its grid.  Returns ``(data, grid, meta)``."""
    try:
        ff = read_field(path)
    except FileNotFoundError as exc:
        raise DataError(f"input file not found: {path}") from exc
    except (FieldFormatError, OSError) as exc:
        raise DataError(str(exc)) from exc
    if ff.grid_tag not in expect:
        raise DataError(f"{path}: grid tag {ff.grid_tag!r}, expected one of {list(expect)}")
    try:
        grid = grid_from_descriptor(ff.meta["grid"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: missing or invalid grid descriptor") from exc
    if ff.grid_tag == "healpix_padded":
        if not isinstance(grid, PaddedTileGeometry):
            raise DataError(f"{path}: padded field without a pad in its descriptor")
        shape = (12, grid.padded_size, grid.padded_size)
    else:
        if isinstance(grid, PaddedTileGeometry):
            grid = grid.grid
        shape = grid.shape
        if (ff.grid_tag == "latlon") != isinstance(grid, LatLonGrid):
            raise DataError(f"{path}: grid tag and descriptor disagree")
    if ff.data.shape != tuple(shape):
        raise DataError(f"{path}: data shape {ff.data.shape} does not match grid shape {tuple(shape)}")
    return ff.data, grid, ff.meta


def _scalar(path, expect=("latlon", "healpix", "healpix_padded")):
    data, grid, meta = _load(path, expect)
    if isinstance(grid, PaddedTileGeometry):
        field = blend_padded_tiles(data, grid, meta.get("units", ""))
    else:
        field = ScalarField(grid, data, meta.get("units", ""))
    return field, meta


def _dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands ----------------------------------------------------------------------------


def _synth(grid, coeffs, threads):
    return synthesize(coeffs, grid, ring_table(grid, coeffs.l_max, n_threads=threads), n_threads=threads)


def cmd_synth_field(cfg: dict, threads: int) -> None:
    grid = grid_from_descriptor(cfg["grid"])
    kind = cfg["kind"]
    coeffs = None
    if kind == "constant":
        if "value" not in cfg:
            raise ConfigError("constant fields need 'value'")
        values = np.full(grid.shape, float(cfg["value"]))
    elif kind == "harmonic":
        l, m = cfg.get("l"), cfg.get("m")
        if l is None or m is None or m > l:
            raise ConfigError("harmonic fields need 0 <= m <= l")
        amp = cfg.get("amplitude", 1.0)
        amp = complex(*amp) if isinstance(amp, list) else complex(amp)
        if m == 0 and amp.imag != 0:
            raise ConfigError("m = 0 amplitudes of a real field must be real")
        coeffs = SphericalCoeffs.zeros(l)
        data = coeffs.data.copy()
        data[coeffs.index(l, m)] = amp
        coeffs = SphericalCoeffs(l, data)
        values = _synth(grid, coeffs, threads).values
    else:
        if "l_max" not in cfg:
            raise ConfigError("random fields need 'l_max'")
        coeffs = random_coeffs(cfg["l_max"], _rng(cfg.get("seed", 0), "synth-field"),
                               cfg.get("spectral_slope", 0.0))
        values = _synth(grid, coeffs, threads).values
    extra = {"seed": cfg["seed"]} if kind == "random" and "seed" in cfg else None
    _write(cfg["output"], values, grid, units=cfg.get("units", ""), variable=cfg.get("variable", ""),
           extra=extra)
    if coeffs is not None and "coeffs_output" in cfg:
        save_coeffs(coeffs, cfg["coeffs_output"])


def cmd_project(cfg: dict, threads: int) -> None:
    field, meta = _scalar(cfg["input"], ("latlon",))
    grid = build_healpix_grid(cfg["nside"])
    mode = cfg.get("mode", "direct")
    units, var = meta.get("units", ""), meta.get("variable", "")
    if mode == "direct":
        _write(cfg["output"], latlon_to_healpix(field, grid).values, grid, units=units, variable=var)
        return
    geom = build_padded_geometry(grid, cfg.get("pad", 16))
    tiles = sample_padded_tiles(field, geom)
    if mode == "padded":
        _write(cfg["output"], tiles, geom, units=units, variable=var)
    else:
        _write(cfg["output"], blend_padded_tiles(tiles, geom, units).values, grid, units=units, variable=var)


def cmd_reproject(cfg: dict, threads: int) -> None:
    field, meta = _scalar(cfg["input"], ("healpix", "healpix_padded"))
    l_max = cfg["l_max"]
    grid = field.grid
    table = ring_table(grid, l_max, n_threads=threads)
    coeffs = analyze_iterative(field, l_max, table, cfg.get("iterations", 0), n_threads=threads)
    out = _reproject_coeffs(field, coeffs, cfg, threads)
    _write(cfg["output"], out.values, out.grid, units=meta.get("units", ""), variable=meta.get("variable", ""))
    if "coeffs_output" in cfg:
        save_coeffs(coeffs, cfg["coeffs_output"])


def _reproject_coeffs(field, coeffs, cfg, threads):
    # same limits as healpix_to_latlon, without recomputing the analysis
    n_lat, n_lon = cfg.get("n_lat", 721), cfg.get("n_lon", 1440)
    if coeffs.l_max > 2 * field.grid.nside and not cfg.get("allow_high_lmax", False):
        raise ValueError(f"l_max={coeffs.l_max} exceeds 2*nside={2 * field.grid.nside}; "
                         "set allow_high_lmax")
    if coeffs.l_max > n_lon // 2 - 1:
        raise ValueError(f"l_max={coeffs.l_max} exceeds the n_lon={n_lon} ring Nyquist limit")
    target = build_latlon_grid(n_lat, n_lon)
    out = synthesize(coeffs, target, ring_table(target, coeffs.l_max, n_threads=threads), n_threads=threads)
    return ScalarField(target, out.values, field.units)


def cmd_spectrum(cfg: dict, threads: int) -> None:
    field, _ = _scalar(cfg["input"])
    table = ring_table(field.grid, cfg["l_max"], n_threads=threads)
    coeffs = analyze_iterative(field, cfg["l_max"], table, cfg.get("iterations", 0), n_threads=threads)
    psd = power_spectrum(coeffs, cfg.get("mode", "real-field"))
    _require_finite(psd.values, "power spectrum")
    write_spectrum_csv(psd, cfg["output"])
    if "coeffs_output" in cfg:
        save_coeffs(coeffs, cfg["coeffs_output"])


def _metric_records(truth: ScalarField, recon: ScalarField, cfg: dict) -> list[dict]:
    var, level = cfg.get("variable", ""), cfg.get("level")
    t, r = truth.values, recon.values
    if isinstance(truth.grid, HealpixGrid):
        pairs = [("mae", metrics.mae_healpix(t, r)), ("rmse", metrics.rmse_healpix(t, r))]
    else:
        w = cell_area_weights(truth.grid)
        pairs = [("wmae", metrics.wmae(t, r, w)), ("wrmse", metrics.wrmse(t, r, w)),
                 ("wrmse_trad", metrics.wrmse_trad(t, r, w))]
    for thr in cfg.get("thresholds", []):
        pairs.append((f"bad_pixel_fraction>{thr:g}", metrics.bad_pixel_fraction(t, r, thr)))
    for name, v in pairs:
        if not np.isfinite(v):
            raise NumericContractError(f"metric {name} is not finite")
    return [metrics.metric_record(name, v, var, level) for name, v in pairs]


def _check_same_grid(a: ScalarField, b: ScalarField) -> None:
    if grid_descriptor(a.grid) != grid_descriptor(b.grid):
        raise DataError("truth and recon live on different grids")


def cmd_metrics(cfg: dict, threads: int) -> None:
    truth, _ = _scalar(cfg["truth"])
    recon, _ = _scalar(cfg["recon"])
    _check_same_grid(truth, recon)
    records = _metric_records(truth, recon, cfg)
    metrics.write_metrics_json(records, cfg["output"])
    if "csv_output" in cfg:
        metrics.write_metrics_csv(records, cfg["csv_output"])
    if "histogram_bin_width" in cfg:
        centers, frac = metrics.signed_error_histogram(truth.values, recon.values, cfg["histogram_bin_width"])
        metrics.write_histogram_csv(centers, frac, cfg.get("histogram_output", str(cfg["output"]) + ".hist.csv"))
    if "spectrum" in cfg:
        sc = cfg["spectrum"]
        psd = []
        for f in (truth, recon):
            table = ring_table(f.grid, sc["l_max"], n_threads=threads)
            a = analyze_iterative(f, sc["l_max"], table, sc.get("iterations", 0), n_threads=threads)
            psd.append(power_spectrum(a, sc.get("mode", "real-field")))
        metrics.write_spectrum_comparison_csv(metrics.spectrum_comparison(*psd), sc["output"])


# -- codec pipeline ------------------------------------------------------------------------


def _encode(stack: np.ndarray, ccfg: dict, seed: int, threads: int):
    """Quantize a ``(12, C, t, t)`` stack; returns the manifest pieces and the decoded stack."""
    channels, t = stack.shape[1], stack.shape[2]
    p = ccfg["patch_size"]
    if t % p:
        raise ConfigError(f"patch size {p} does not divide the tile size {t}")
    stats = None
    work = stack
    if ccfg.get("standardize", True):
        # one frame; levels are channels
        stats = codec.compute_stats(stack.transpose(1, 0, 2, 3)[None])
        work = codec.standardize(stack.transpose(1, 0, 2, 3), stats).transpose(1, 0, 2, 3)
    if "codebook_path" in ccfg:
        try:
            book = codec.load_codebook(ccfg["codebook_path"])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read codebook: {exc}") from exc
    else:
        patches = np.concatenate([codec.extract_patches(work[h], p) for h in range(12)])
        book = codec.train_codebook(patches, ccfg["size"], derive_seed(seed, "codebook"))
    qts = [codec.quantize(work[h], book, p, keep_calibration=ccfg.get("calibrate", False),
                          n_threads=threads) for h in range(12)]
    manifest = {
        "channels": channels,
        "tile_size": t,
        "patch_size": p,
        "codebook_size": book.size,
        "codebook_seed": book.seed,
        "standardization": None if stats is None else {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        "calibration": None if not ccfg.get("calibrate", False) else
        [{"mean": q.calibration[0].tolist(), "std": q.calibration[1].tolist()} for q in qts],
    }
    return book, [q.index_map for q in qts], manifest


def _decode(book, index_maps, manifest) -> np.ndarray:
    channels, p = manifest["channels"], manifest["patch_size"]
    cal = manifest.get("calibration")
    tiles = []
    for h, m in enumerate(index_maps):
        pair = None if cal is None else (np.array(cal[h]["mean"]), np.array(cal[h]["std"]))
        tiles.append(codec.dequantize(codec.QuantizedTile(m, book, p, channels, pair)))
    out = np.stack(tiles)
    st = manifest.get("standardization")
    if st is not None:
        stats = codec.StandardizationStats(np.array(st["mean"]), np.array(st["std"]), 4)
        out = codec.destandardize(out.transpose(1, 0, 2, 3), stats).transpose(1, 0, 2, 3)
    return out


def _ratio_report(manifest, index_maps, table_bits: int) -> dict:
    c, t, p = manifest["channels"], manifest["tile_size"], manifest["patch_size"]
    g = t // p
    inp = codec.InputSpec(12 * c, t, t, 32)
    naive_bits = codec.naive_index_bits(manifest["codebook_size"])
    entropy = codec.mean_tile_entropy(index_maps)
    side = table_bits
    if manifest.get("calibration") is not None:
        side += 12 * c * 2 * 32
    return {
        "naive_bits_per_index": naive_bits,
        "entropy_bits_per_index": entropy,
        "entropy_definition": "per-tile empirical entropy averaged over tiles",
        "naive_ratio": codec.compression_ratio(inp, codec.CodeSpec(12 * g, g, naive_bits)) if naive_bits else None,
        "effective_ratio": codec.compression_ratio(inp, codec.CodeSpec(12 * g, g, entropy), side)
        if entropy > 0 or side > 0 else None,
        "side_info_bits": side,
        "bad_pixel_table_bits": table_bits,
        "reference_ratio_5x256x256_vs_32x32x13": codec.compression_ratio(
            codec.InputSpec(5, 256, 256, 32), codec.CodeSpec(32, 32, 13)),
    }


def _compress_stack(stack, ccfg, seed, threads, outdir: Path, grid_desc, meta_fields):
    book, maps, manifest = _encode(stack, ccfg, seed, threads)
    recon = _decode(book, maps, manifest)
    table_bits = 0
    outdir.mkdir(parents=True, exist_ok=True)
    codec.save_codebook(book, outdir / "codebook.cbk")
    codec.save_quantized_tiles(maps, book.size, outdir / "indices.qti")
    if "bad_pixel_threshold" in ccfg:
        table = codec.build_bad_pixel_table(recon, stack, ccfg["bad_pixel_threshold"])
        recon = codec.apply_bad_pixel_table(recon, table)
        err = np.abs(recon - stack)
        if np.any(err > table.thresholds[None, :, None, None]):
            raise NumericContractError("bad-pixel capping left an error above threshold")
        codec.save_bad_pixel_table(table, outdir / "badpixels.csv")
        manifest["bad_pixels"] = {"path": "badpixels.csv", "entries": len(table),
                                  "thresholds": table.thresholds.tolist()}
        table_bits = codec.table_storage_bits(table)
    else:
        manifest["bad_pixels"] = None
    manifest["grid"] = grid_desc
    manifest["fields"] = meta_fields
    manifest["ratios"] = _ratio_report(manifest, maps, table_bits)
    _require_finite(recon, "reconstruction")
    _dump_json(manifest, outdir / "manifest.json")
    return recon, manifest


def _decompress_dir(indir: Path) -> tuple[np.ndarray, dict]:
    try:
        manifest = json.loads((indir / "manifest.json").read_text())
        book = codec.load_codebook(indir / "codebook.cbk")
        maps = codec.load_quantized_tiles(indir / "indices.qti")
        if len(maps) != 12:
            raise ValueError(f"expected 12 index maps, found {len(maps)}")
        recon = _decode(book, maps, manifest)
        bp = manifest.get("bad_pixels")
        if bp is not None:
            table = codec.load_bad_pixel_table(indir / bp["path"], recon.shape, bp["thresholds"])
            if len(table) != bp["entries"]:
                raise ValueError("bad-pixel table length disagrees with the manifest")
            recon = codec.apply_bad_pixel_table(recon, table)
    except FileNotFoundError as exc:
        raise DataError(f"missing compressed artifact: {exc.filename}") from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"corrupt compressed artifact in {indir}: {exc}") from exc
    return _require_finite(recon, "reconstruction"), manifest


def cmd_compress(cfg: dict, threads: int) -> None:
    paths = cfg["input"] if isinstance(cfg["input"], list) else [cfg["input"]]
    fields = [_scalar(p, ("healpix",)) for p in paths]
    descs = {json.dumps(grid_descriptor(f.grid), sort_keys=True) for f, _ in fields}
    if len(descs) != 1:
        raise DataError("all compress inputs must share one HEALPix grid")
    stack = np.stack([f.values for f, _ in fields], axis=1)
    meta_fields = [{"units": m.get("units", ""), "variable": m.get("variable", "")} for _, m in fields]
    _compress_stack(stack, cfg["codec"], cfg.get("seed", 0), threads, Path(cfg["output"]),
                    grid_descriptor(fields[0][0].grid), meta_fields)


def cmd_decompress(cfg: dict, threads: int) -> None:
    recon, manifest = _decompress_dir(Path(cfg["input"]))
    outs = cfg["output"] if isinstance(cfg["output"], list) else [cfg["output"]]
    if len(outs) != recon.shape[1]:
        raise ConfigError(f"{recon.shape[1]} channel(s) stored, {len(outs)} output path(s) given")
    grid = grid_from_descriptor(manifest["grid"])
    for c, path in enumerate(outs):
        info = manifest.get("fields", [{}] * len(outs))[c]
        _write(path, recon[:, c], grid, units=info.get("units", ""), variable=info.get("variable", ""))


def cmd_roundtrip(cfg: dict, threads: int) -> None:
    """Synthesize, project through padded tiles, (optionally) compress, reproject, evaluate."""
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.get("seed", 0)
    nside = cfg.get("nside", 64)
    l_max = cfg.get("l_max", 2 * nside)
    src = {"n_lat": 361, "n_lon": 720, "l_max": l_max, "spectral_slope": 2.0, **cfg.get("source", {})}
    n_lat, n_lon = cfg.get("n_lat", src["n_lat"]), cfg.get("n_lon", src["n_lon"])

    source_grid = build_latlon_grid(src["n_lat"], src["n_lon"])
    coeffs = random_coeffs(src["l_max"], _rng(seed, "roundtrip.source"), src["spectral_slope"])
    source = _synth(source_grid, coeffs, threads)
    _write(out / "source.fld", source.values, source_grid, extra={"seed": seed})
    save_coeffs(coeffs, out / "source.alm")

    grid = build_healpix_grid(nside)
    geom = build_padded_geometry(grid, cfg.get("pad", 16))
    tiles = sample_padded_tiles(source, geom)
    _write(out / "padded.fld", tiles, geom)
    blended = blend_padded_tiles(tiles, geom)
    _write(out / "healpix.fld", blended.values, grid)

    hp = blended
    if "codec" in cfg:
        recon, _ = _compress_stack(blended.values[:, None], cfg["codec"], seed, threads, out / "compressed",
                                   grid_descriptor(grid), [{"units": "", "variable": ""}])
        hp = ScalarField(grid, recon[:, 0])
        _write(out / "healpix_recon.fld", hp.values, grid)

    table = ring_table(grid, l_max, n_threads=threads)
    alm = analyze_iterative(hp, l_max, table, cfg.get("iterations", 0), n_threads=threads)
    save_coeffs(alm, out / "healpix.alm")
    rep = _reproject_coeffs(hp, alm, {**cfg, "n_lat": n_lat, "n_lon": n_lon}, threads)
    _write(out / "reprojected.fld", rep.values, rep.grid)

    write_spectrum_csv(power_spectrum(coeffs), out / "source_spectrum.csv")
    psd = power_spectrum(alm)
    _require_finite(psd.values, "power spectrum")
    write_spectrum_csv(psd, out / "healpix_spectrum.csv")
    truth_psd = power_spectrum(coeffs.truncate(l_max)) if coeffs.l_max >= l_max else None
    if truth_psd is not None:
        metrics.write_spectrum_comparison_csv(metrics.spectrum_comparison(truth_psd, psd),
                                              out / "spectrum_comparison.csv")

    # truth in HEALPix space is the direct projection of the source
    records = _metric_records(latlon_to_healpix(source, grid), hp, {**cfg, "variable": "healpix"})
    if (n_lat, n_lon) == (src["n_lat"], src["n_lon"]):
        records += _metric_records(source, rep, {**cfg, "variable": "latlon"})
        if "histogram_bin_width" in cfg:
            centers, frac = metrics.signed_error_histogram(source.values, rep.values, cfg["histogram_bin_width"])
            metrics.write_histogram_csv(centers, frac, out / "error_histogram.csv")
    metrics.write_metrics_json(records, out / "metrics.json")
    metrics.write_metrics_csv(records, out / "metrics.csv")


COMMANDS = {
    "synth-field": cmd_synth_field,
    "project": cmd_project,
    "reproject": cmd_reproject,
    "spectrum": cmd_spectrum,
    "metrics": cmd_metrics,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "roundtrip": cmd_roundtrip,
}


# -- entry point ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="healsht", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--input", help="override the config's input path")
    ap.add_argument("--out", help="override the config's output path")
    ap.add_argument("--threads", type=int, help=f"thread count (overrides ${THREADS_ENV} and the config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _load_config(args) -> dict:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if args.input is not None:
        if "input" not in SCHEMAS[args.command]["properties"]:
            raise ConfigError(f"{args.command} takes no --input")
        cfg["input"] = args.input
    if args.out is not None:
        cfg["output"] = args.out
    try:
        jsonschema.validate(cfg, SCHEMAS[args.command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return cfg


def _threads(args, cfg) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"${THREADS_ENV} must be an integer") from exc
    else:
        n = cfg.get("threads", 1)
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="healsht: %(levelname)s: %(message)s")
    try:
        cfg = _load_config(args)
        threads = _threads(args, cfg)
        with np.errstate(invalid="raise", divide="ignore", over="ignore"):
            COMMANDS[args.command](cfg, threads)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, GridMismatchError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (NumericContractError, FloatingPointError) as exc:
        log.error("numeric contract violated: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, MemoryError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
