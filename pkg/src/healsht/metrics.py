"""Reconstruction-quality metrics in HEALPix and lat/lon space."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericContractError",
    "SpectrumComparison",
    "bad_pixel_fraction",
    "mae_healpix",
    "metric_record",
    "rmse_healpix",
    "signed_error_histogram",
    "spectrum_comparison",
    "wmae",
    "wrmse",
    "wrmse_trad",
    "write_histogram_csv",
    "write_metrics_csv",
    "write_metrics_json",
    "write_spectrum_comparison_csv",
]

_JENSEN_SLACK = 1e-12


class NumericContractError(ArithmeticError):
    """A quantity violated a mathematical guarantee (e.g. MAE > RMSE or NaN)."""


def _pair(truth, recon) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs recon {recon.shape}")
    return truth, recon


def _tile_errors(truth, recon) -> np.ndarray:
    truth, recon = _pair(truth, recon)
    if truth.ndim < 3 or truth.shape[-3] != 12:
        raise ValueError(f"expected (..., 12, t, t) tile stacks, got shape {truth.shape}")
    return (recon - truth).reshape(-1, truth.shape[-2] * truth.shape[-1])


def _per_tile(truth, recon) -> tuple[np.ndarray, np.ndarray]:
    err = _tile_errors(truth, recon)
    mae = np.abs(err).mean(axis=1)
    rmse = np.sqrt(np.mean(err * err, axis=1))
    if not (np.all(np.isfinite(mae)) and np.all(np.isfinite(rmse))):
        raise NumericContractError("non-finite tile error")
    if np.any(mae > rmse * (1.0 + _JENSEN_SLACK) + 1e-300):
        raise NumericContractError("per-tile MAE exceeds RMSE")
    return mae, rmse


def mae_healpix(truth, recon) -> float:
    """Mean over all tiles (and frames) of each tile's mean absolute error.

    Inputs are tile stacks shaped ``(..., 12, t, t)``; leading axes are frames.
    """
    return float(_per_tile(truth, recon)[0].mean())


def rmse_healpix(truth, recon) -> float:
    """Mean over all tiles (and frames) of each tile's root mean squared error."""
    return float(_per_tile(truth, recon)[1].mean())


def _frame_terms(truth, recon, weights) -> tuple[np.ndarray, np.ndarray]:
    truth, recon = _pair(truth, recon)
    if truth.ndim < 2:
        raise ValueError("lat/lon fields need at least 2 dimensions")
    n_lat, n_lon = truth.shape[-2:]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape == (n_lat,):
        w = np.repeat(w[:, None], n_lon, axis=1)
    if w.shape != (n_lat, n_lon):
        raise ValueError(f"weights of shape {w.shape} do not fit a {n_lat}x{n_lon} grid")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 over the grid, got {w.sum()}")
    err = (recon - truth).reshape(-1, n_lat, n_lon)
    abs_term = np.einsum("fij,ij->f", np.abs(err), w)
    sq_term = np.einsum("fij,ij->f", err * err, w)
    return abs_term, sq_term


def wmae(truth, recon, weights) -> float:
    """Frame average of the area-weighted absolute error ``sum_i a_i |x - x_hat|``.

    ``weights`` are per-row (``n_lat``) or per-cell weights summing to 1 over
    all cells, e.g. :func:`healsht.grids.cell_area_weights`.
    """
    return float(_frame_terms(truth, recon, weights)[0].mean())


def wrmse(truth, recon, weights) -> float:
    """Frame average of ``sqrt(sum_i a_i (x - x_hat)^2)``."""
    return float(np.sqrt(_frame_terms(truth, recon, weights)[1]).mean())


def wrmse_trad(truth, recon, weights) -> float:
    """``sqrt`` of the frame-averaged weighted squared error."""
    return float(np.sqrt(_frame_terms(truth, recon, weights)[1].mean()))


def bad_pixel_fraction(truth, recon, threshold: float) -> float:
    """Fraction of samples with ``|x - x_hat| > threshold``."""
    truth, recon = _pair(truth, recon)
    return float(np.mean(np.abs(recon - truth) > threshold))


def signed_error_histogram(truth, recon, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of ``recon - truth`` on zero-centred bins ``[k w - w/2, k w + w/2)``.

    Returns contiguous bin centres from the lowest to the highest occupied bin
    and the fraction of samples in each.
    """
    if not bin_width > 0:
        raise ValueError(f"bin width must be positive, got {bin_width}")
    truth, recon = _pair(truth, recon)
    err = (recon - truth).reshape(-1)
    if err.size == 0:
        raise ValueError("empty input")
    k = np.floor(err / bin_width + 0.5).astype(np.int64)
    lo = int(k.min())
    counts = np.bincount(k - lo)
    centers = (np.arange(counts.size) + lo) * bin_width
    return centers, counts / err.size


@dataclass(frozen=True)
class SpectrumComparison:
    degrees: np.ndarray
    ratio: np.ndarray
    log_difference: np.ndarray


def spectrum_comparison(psd_truth, psd_recon) -> SpectrumComparison:
    """Per-degree ``I_recon / I_truth`` and ``log10 I_recon - log10 I_truth``.

    Accepts arrays or :class:`healsht.sht.PowerSpectrum`; degrees where the
    truth spectrum vanishes give NaN ratios.
    """
    a = np.asarray(getattr(psd_truth, "values", psd_truth), dtype=np.float64)
    b = np.asarray(getattr(psd_recon, "values", psd_recon), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"spectra have different lengths: {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(a > 0, b / np.where(a > 0, a, 1.0), np.nan)
        logdiff = np.log10(b) - np.log10(a)
    return SpectrumComparison(np.arange(a.size), ratio, logdiff)


def metric_record(metric: str, value: float, variable: str = "", level=None) -> dict:
    return {"metric": metric, "variable": variable, "level": level, "value": float(value)}


def write_metrics_json(records, path) -> None:
    with open(path, "w") as fh:
        json.dump(list(records), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "variable", "level", "value"])
        for r in records:
            level = "" if r["level"] is None else r["level"]
            w.writerow([r["metric"], r["variable"], level, repr(float(r["value"]))])


def write_histogram_csv(centers, fractions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center", "fraction"])
        for c, f in zip(centers, fractions):
            w.writerow([repr(float(c)), repr(float(f))])


def write_spectrum_comparison_csv(comp: SpectrumComparison, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "ratio", "log_difference"])
        for l, r, d in zip(comp.degrees, comp.ratio, comp.log_difference):
            w.writerow([int(l), repr(float(r)), repr(float(d))])
