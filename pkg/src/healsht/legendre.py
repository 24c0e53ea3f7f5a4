"""Normalized associated Legendre tables.

The table stores ``lambda_m^l(cos theta)``, i.e. the associated Legendre
function multiplied by ``sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)``, so that
``Y_m^l(theta, phi) = lambda_m^l(cos theta) exp(i m phi)``.  Values are filled
with the stable three-term recurrence seeded from ``lambda_0^0 = 1/sqrt(4 pi)``
and carry the Condon-Shortley phase.

Storage is m-major: for each colatitude the triangle is laid out as
``(m=0, l=0..l_max), (m=1, l=1..l_max), ...`` so that a fixed-m column is a
contiguous slice.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "LegendreTable",
    "RecurrenceCoefficients",
    "build_legendre_table",
    "direct_legendre_oracle",
    "load_legendre_table",
    "n_coeffs",
    "recurrence_coefficients",
    "save_legendre_table",
    "triangle_index",
]

DEFAULT_MAX_BYTES = 2 * 1024**3
_ORACLE_MAX_L = 12
_COLUMN_CHUNK = 64
_MAGIC = b"LGT1"


class RecurrenceCoefficients(NamedTuple):
    mu: float
    nu: float
    alpha: float | None
    beta: float | None


def n_coeffs(l_max: int) -> int:
    """Number of (l, m) pairs with 0 <= m <= l <= l_max."""
    return (l_max + 1) * (l_max + 2) // 2


def column_offset(m: int, l_max: int) -> int:
    return m * (l_max + 1) - m * (m - 1) // 2


def triangle_index(l: int, m: int, l_max: int) -> int:
    """Flat m-major index of ``(l, m)`` in a triangle of degree ``l_max``."""
    if not 0 <= m <= l <= l_max:
        raise ValueError(f"need 0 <= m <= l <= l_max, got l={l}, m={m}, l_max={l_max}")
    return column_offset(m, l_max) + (l - m)


def recurrence_coefficients(l: int, m: int | None = None) -> RecurrenceCoefficients:
    """Closed-form recurrence factors for degree ``l``.

    ``mu`` and ``nu`` only depend on ``l``.  ``alpha`` and ``beta`` belong to
    the three-term step and are only defined for ``l >= 2`` and
    ``0 <= m <= l - 2``; they are returned as ``None`` when ``m`` is omitted.
    """
    if l < 1:
        raise ValueError(f"recurrence coefficients need l >= 1, got {l}")
    mu = math.sqrt(1.0 + 1.0 / (2 * l))
    nu = math.sqrt(1.0 + 2 * l)
    if m is None:
        return RecurrenceCoefficients(mu, nu, None, None)
    if l < 2 or not 0 <= m <= l - 2:
        raise ValueError(f"alpha/beta need l >= 2 and 0 <= m <= l-2, got l={l}, m={m}")
    alpha, beta = _alpha_beta(np.array([l], dtype=np.float64), m)
    return RecurrenceCoefficients(mu, nu, float(alpha[0]), float(beta[0]))


def _alpha_beta(l: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    ratio = (2 * l + 1) / (2 * l - 3)
    denom = l * l - m * m
    alpha = np.sqrt(ratio * (4 * (l - 1) ** 2 - 1) / denom)
    beta = np.sqrt(ratio * ((l - 1) ** 2 - m * m) / denom)
    return alpha, beta


@dataclass(frozen=True, eq=False)
class LegendreTable:
    """Immutable table of ``lambda_m^l(cos theta)`` on a fixed colatitude set.

    ``values`` has shape ``(n_theta, n_coeffs(l_max))``.
    """

    l_max: int
    colatitudes: np.ndarray
    values: np.ndarray

    @property
    def n_theta(self) -> int:
        return self.colatitudes.shape[0]

    def index(self, l: int, m: int) -> int:
        return triangle_index(l, m, self.l_max)

    def column(self, m: int) -> np.ndarray:
        """Values for fixed ``m`` and ``l = m..l_max``, shape ``(n_theta, l_max-m+1)``."""
        start = column_offset(m, self.l_max)
        return self.values[:, start : start + self.l_max + 1 - m]

    def __call__(self, l: int, m: int) -> np.ndarray:
        return self.values[:, self.index(l, m)]


def _sin_cos(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # sin from the nearer pole so sin(pi) is exactly 0; cos via the equator
    # offset so cos(pi/2) is exactly 0.
    sin = np.where(theta <= 0.5 * np.pi, np.sin(theta), np.sin(np.pi - theta))
    near_eq = np.abs(theta - 0.5 * np.pi) <= 0.25 * np.pi
    cos = np.where(near_eq, np.sin(0.5 * np.pi - theta), np.cos(theta))
    return sin, cos


def _fill(l_max: int, theta: np.ndarray) -> np.ndarray:
    sin, x = _sin_cos(theta)
    out = np.empty((n_coeffs(l_max), theta.shape[0]), dtype=np.float64)
    pmm = np.full(theta.shape, math.sqrt(1.0 / (4.0 * math.pi)))
    for m in range(l_max + 1):
        if m > 0:
            pmm = -recurrence_coefficients(m).mu * sin * pmm
        base = column_offset(m, l_max)
        out[base] = pmm
        if m + 1 > l_max:
            continue
        out[base + 1] = recurrence_coefficients(m + 1).nu * x * pmm
        if m + 2 > l_max:
            continue
        alpha, beta = _alpha_beta(np.arange(m + 2, l_max + 1, dtype=np.float64), m)
        for k, l in enumerate(range(m + 2, l_max + 1)):
            i = base + l - m
            out[i] = alpha[k] * x * out[i - 1] - beta[k] * out[i - 2]
    return out


def build_legendre_table(
    l_max: int,
    colatitudes,
    *,
    n_threads: int = 1,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> LegendreTable:
    """Fill a Legendre table for ``l <= l_max`` at the given colatitudes (radians).

    Colatitudes are processed in fixed-size chunks, optionally on a thread
    pool; since each colatitude is independent the result does not depend on
    ``n_threads``.

    Raises:
        ValueError: if ``l_max < 0`` or a colatitude lies outside ``[0, pi]``.
        MemoryError: if the table would exceed ``max_bytes``.
    """
    if l_max < 0:
        raise ValueError(f"l_max must be >= 0, got {l_max}")
    theta = np.array(colatitudes, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(theta)) or np.any(theta < 0.0) or np.any(theta > np.pi):
        raise ValueError("colatitudes must lie in [0, pi]")
    size = theta.shape[0] * n_coeffs(l_max) * 8
    if size > max_bytes:
        raise MemoryError(
            f"Legendre table needs {size} bytes (n_theta={theta.shape[0]}, "
            f"l_max={l_max}), budget is {max_bytes}"
        )

    chunks = [theta[i : i + _COLUMN_CHUNK] for i in range(0, theta.shape[0], _COLUMN_CHUNK)]
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(lambda t: _fill(l_max, t), chunks))
    else:
        parts = [_fill(l_max, t) for t in chunks]
    if parts:
        values = np.ascontiguousarray(np.concatenate(parts, axis=1).T)
    else:
        values = np.empty((0, n_coeffs(l_max)))

    theta.setflags(write=False)
    values.setflags(write=False)
    return LegendreTable(l_max=l_max, colatitudes=theta, values=values)


def direct_legendre_oracle(l: int, m: int, x: float) -> float:
    """Evaluate ``lambda_m^l(x)`` from the explicit Rodrigues expansion.

    Slow and only valid for small degrees; intended as an independent check
    of the recurrence.  Polynomial coefficients are exact rationals.
    """
    if l > _ORACLE_MAX_L:
        raise ValueError(f"oracle is limited to l <= {_ORACLE_MAX_L}, got {l}")
    if not 0 <= m <= l:
        raise ValueError(f"need 0 <= m <= l, got l={l}, m={m}")
    if not -1.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [-1, 1], got {x}")

    # d^(l+m)/dx^(l+m) (x^2 - 1)^l, term by term
    poly = 0.0
    for j in range(l + 1):
        power = 2 * j - l - m
        if power < 0:
            continue
        coef = Fraction(
            math.comb(l, j) * (-1) ** (l - j) * math.factorial(2 * j),
            math.factorial(power),
        )
        poly += float(coef) * x**power
    p_lm = (-1) ** m * (1.0 - x * x) ** (m / 2) * poly / (2**l * math.factorial(l))
    norm = Fraction(2 * l + 1) * Fraction(math.factorial(l - m), math.factorial(l + m))
    return math.sqrt(float(norm) / (4.0 * math.pi)) * p_lm


def save_legendre_table(table: LegendreTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", table.l_max, table.n_theta))
        fh.write(table.colatitudes.astype("<f8").tobytes())
        fh.write(table.values.astype("<f8").tobytes())


def load_legendre_table(path) -> LegendreTable:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a Legendre table file")
    l_max, n_theta = struct.unpack_from("<II", data, 4)
    offset = 12
    theta = np.frombuffer(data, dtype="<f8", count=n_theta, offset=offset).astype(np.float64)
    offset += 8 * n_theta
    count = n_theta * n_coeffs(l_max)
    if len(data) != offset + 8 * count:
        raise ValueError(f"{path}: truncated or oversized payload")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
    values = values.reshape(n_theta, n_coeffs(l_max))
    theta.setflags(write=False)
    values.setflags(write=False)
    return LegendreTable(l_max=l_max, colatitudes=theta, values=values)
