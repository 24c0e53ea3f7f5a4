"""Compression bookkeeping: standardization, codebook quantization, rates, error capping.

Tiles are channel-first arrays ``(C, h, w)``; a 2-D ``(h, w)`` tile is treated
as a single channel.  HEALPix stacks are ``(12, C, t, t)`` or ``(12, t, t)``.
Patches are non-overlapping ``p x p x C`` blocks flattened in (row, col,
channel) order.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "BadPixelTable",
    "CodeSpec",
    "Codebook",
    "InputSpec",
    "QuantizedTile",
    "StandardizationStats",
    "apply_bad_pixel_table",
    "assemble_patches",
    "build_bad_pixel_table",
    "calibrate",
    "compression_ratio",
    "compute_stats",
    "dequantize",
    "destandardize",
    "extract_patches",
    "load_bad_pixel_table",
    "load_codebook",
    "load_quantized_tiles",
    "mean_tile_entropy",
    "naive_index_bits",
    "nearest_codewords",
    "quantize",
    "save_bad_pixel_table",
    "save_codebook",
    "save_quantized_tiles",
    "shannon_entropy",
    "standardize",
    "table_storage_bits",
    "train_codebook",
]

MAX_LLOYD_ITERATIONS = 100
_ASSIGN_CHUNK = 4096
_CBK_MAGIC = b"CBK1"
_QTI_MAGIC = b"QTI1"
_BAD_PIXEL_HEADER = ["tile", "row", "col", "channel", "value"]
VALUE_BITS = 32


# -- standardization ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    """Per-level mean and standard deviation.

    ``mean`` and ``std`` have one entry per level.  ``frame_ndim`` is the rank
    of a single frame ``(levels, *spatial)``; the level axis of any input is
    found from it, so both single frames and frame stacks are accepted.
    """

    mean: np.ndarray
    std: np.ndarray
    frame_ndim: int

    def _level_axis(self, values: np.ndarray) -> int:
        axis = values.ndim - self.frame_ndim
        if axis not in (0, 1) or values.shape[axis] != self.mean.shape[0]:
            raise ValueError(
                f"values of shape {values.shape} do not match {self.mean.shape[0]} levels "
                f"with frames of rank {self.frame_ndim}"
            )
        return axis

    def _broadcast(self, arr: np.ndarray, values: np.ndarray) -> np.ndarray:
        axis = self._level_axis(values)
        shape = [1] * values.ndim
        shape[axis] = arr.shape[0]
        return arr.reshape(shape)


def compute_stats(frames) -> StandardizationStats:
    """Mean and population std per level over frames shaped ``(F, L, *spatial)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[0] < 1:
        raise ValueError("need at least one frame shaped (levels, ...)")
    axes = (0,) + tuple(range(2, frames.ndim))
    mean = frames.mean(axis=axes)
    std = frames.std(axis=axes)
    if np.any(std <= 0.0):
        bad = np.flatnonzero(std <= 0.0).tolist()
        raise ValueError(f"zero-variance level(s) {bad} cannot be standardized")
    return StandardizationStats(mean, std, frames.ndim - 1)


def standardize(values, stats: StandardizationStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return (values - stats._broadcast(stats.mean, values)) / stats._broadcast(stats.std, values)


def destandardize(values, stats: StandardizationStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values * stats._broadcast(stats.std, values) + stats._broadcast(stats.mean, values)


# -- patches and codebooks ----------------------------------------------------


def _as_tile(tile) -> np.ndarray:
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim == 2:
        tile = tile[None]
    if tile.ndim != 3:
        raise ValueError(f"tile must be (h, w) or (C, h, w), got shape {tile.shape}")
    return tile


def extract_patches(tile, patch_size: int) -> np.ndarray:
    """Split a tile into ``p x p x C`` patch vectors, patch grid in row-major order."""
    tile = _as_tile(tile)
    c, h, w = tile.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide tile {h}x{w}")
    blocks = tile.reshape(c, h // p, p, w // p, p).transpose(1, 3, 2, 4, 0)
    return blocks.reshape((h // p) * (w // p), p * p * c)


def assemble_patches(vectors, grid_shape: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`; returns ``(C, h, w)``."""
    gh, gw = grid_shape
    p = patch_size
    blocks = np.asarray(vectors, dtype=np.float64).reshape(gh, gw, p, p, channels)
    return np.ascontiguousarray(blocks.transpose(4, 0, 2, 1, 3).reshape(channels, gh * p, gw * p))


@dataclass(frozen=True, eq=False)
class Codebook:
    """``N`` distinct codewords of length ``dim``; entries are float32-representable."""

    codewords: np.ndarray
    seed: int

    def __post_init__(self):
        words = self.codewords
        if words.ndim != 2 or words.shape[0] < 1:
            raise ValueError("codebook needs at least one codeword")
        if not np.all(np.isfinite(words)):
            raise ValueError("codewords must be finite")
        if np.unique(words, axis=0).shape[0] != words.shape[0]:
            raise ValueError("codewords must be distinct")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


def nearest_codewords(vectors, codewords, *, n_threads: int = 1) -> np.ndarray:
    """Index of the closest codeword per row; ties go to the lowest index."""
    vectors = np.asarray(vectors, dtype=np.float64)
    codewords = np.asarray(codewords, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != codewords.shape[1]:
        raise ValueError(
            f"vectors of shape {vectors.shape} do not match codeword length {codewords.shape[1]}"
        )
    starts = range(0, vectors.shape[0], _ASSIGN_CHUNK)

    def work(i):
        return np.argmin(cdist(vectors[i : i + _ASSIGN_CHUNK], codewords, "sqeuclidean"), axis=1)

    if n_threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(i) for i in starts]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts).astype(np.int64)


def _farthest_point_init(patches: np.ndarray, n: int, start: int) -> np.ndarray:
    chosen = [start]
    dist = cdist(patches, patches[start : start + 1], "sqeuclidean")[:, 0]
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, cdist(patches, patches[nxt : nxt + 1], "sqeuclidean")[:, 0])
    return patches[chosen].copy()


def _to_float32(words: np.ndarray) -> np.ndarray:
    return words.astype(np.float32).astype(np.float64)


def train_codebook(patches, n: int, seed: int, *, max_iterations: int = MAX_LLOYD_ITERATIONS) -> Codebook:
    """Deterministic k-means codebook.

    Farthest-point initialization from a seeded starting patch, then Lloyd
    iterations until the assignment stops changing (at most
    ``max_iterations``).  A cluster that empties keeps its previous codeword.
    Codewords are rounded to float32 so they survive the codebook file.

    Raises:
        ValueError: if there are fewer than ``n`` distinct patches.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError(f"patches must be (M, dim), got shape {patches.shape}")
    if n < 1:
        raise ValueError(f"codebook size must be >= 1, got {n}")
    if patches.shape[0] < n:
        raise ValueError(f"need M >= N patches, got M={patches.shape[0]}, N={n}")
    if np.unique(patches, axis=0).shape[0] < n:
        raise ValueError(f"fewer than N={n} distinct patches")

    rng = np.random.Generator(np.random.Philox(seed))
    words = _farthest_point_init(patches, n, int(rng.integers(patches.shape[0])))
    assign = None
    for _ in range(max_iterations):
        new = nearest_codewords(patches, words)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=n)
        sums = np.zeros_like(words)
        np.add.at(sums, assign, patches)
        filled = counts > 0
        words[filled] = sums[filled] / counts[filled, None]

    words = _make_distinct(_to_float32(words), patches)
    return Codebook(words, int(seed))


def _make_distinct(words: np.ndarray, patches: np.ndarray) -> np.ndarray:
    # Lloyd updates (or float32 rounding) can in principle merge codewords;
    # replace each repeat by the patch farthest from the current codebook.
    _, first = np.unique(words, axis=0, return_index=True)
    repeats = np.setdiff1d(np.arange(words.shape[0]), first)
    for k in repeats:
        keep = np.setdiff1d(np.arange(words.shape[0]), [k])
        dist = cdist(patches, words[keep], "sqeuclidean").min(axis=1)
        words[k] = _to_float32(patches[int(np.argmax(dist))])
    return words


# -- quantization -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTile:
    """Index map over the patch grid plus the parameters needed to decode it.

    ``calibration``, when present, holds per-channel ``(mean, std)`` arrays of
    the original tile.
    """

    index_map: np.ndarray
    codebook: Codebook
    patch_size: int
    channels: int
    calibration: tuple[np.ndarray, np.ndarray] | None = field(default=None)

    def __post_init__(self):
        if self.index_map.ndim != 2:
            raise ValueError("index map must be 2-D")
        if self.index_map.size and (self.index_map.min() < 0 or self.index_map.max() >= self.codebook.size):
            raise ValueError("index map entries out of codebook range")
        if self.patch_size**2 * self.channels != self.codebook.dim:
            raise ValueError(
                f"patch {self.patch_size}x{self.patch_size}x{self.channels} does not match "
                f"codeword length {self.codebook.dim}"
            )

    @property
    def tile_shape(self) -> tuple[int, int, int]:
        gh, gw = self.index_map.shape
        return (self.channels, gh * self.patch_size, gw * self.patch_size)


def quantize(tile, codebook: Codebook, patch_size: int, *, keep_calibration: bool = False,
             n_threads: int = 1) -> QuantizedTile:
    """Map every patch of ``tile`` to its nearest codeword."""
    tile = _as_tile(tile)
    vectors = extract_patches(tile, patch_size)
    if vectors.shape[1] != codebook.dim:
        raise ValueError(f"patch vectors have length {vectors.shape[1]}, codebook expects {codebook.dim}")
    idx = nearest_codewords(vectors, codebook.codewords, n_threads=n_threads)
    grid = (tile.shape[1] // patch_size, tile.shape[2] // patch_size)
    cal = None
    if keep_calibration:
        cal = (tile.mean(axis=(1, 2)), tile.std(axis=(1, 2)))
    return QuantizedTile(idx.reshape(grid), codebook, patch_size, tile.shape[0], cal)


def dequantize(qt: QuantizedTile) -> np.ndarray:
    """Write codewords back; apply the stored calibration if any.  Returns ``(C, h, w)``."""
    vectors = qt.codebook.codewords[qt.index_map.reshape(-1)]
    tile = assemble_patches(vectors, qt.index_map.shape, qt.patch_size, qt.channels)
    if qt.calibration is not None:
        mean, std = qt.calibration
        tile = np.stack([calibrate(tile[c], mean[c], std[c]) for c in range(qt.channels)])
    return tile


def calibrate(recon, target_mean: float, target_std: float) -> np.ndarray:
    """Affinely rescale ``recon`` to the target mean and (population) std."""
    recon = np.asarray(recon, dtype=np.float64)
    std = recon.std()
    if std <= 0.0:
        raise ValueError("cannot calibrate a zero-variance reconstruction")
    return (recon - recon.mean()) * (target_std / std) + target_mean


# -- rates ----------------------------------------------------------------------


def shannon_entropy(index_map) -> float:
    """Empirical entropy ``-sum f_i log2 f_i`` of the index values, in bits."""
    idx = np.asarray(index_map).reshape(-1)
    if idx.size == 0:
        raise ValueError("entropy of an empty index map is undefined")
    _, counts = np.unique(idx, return_counts=True)
    freq = counts / idx.size
    return float(max(0.0, -np.sum(freq * np.log2(freq))))


def mean_tile_entropy(index_maps) -> float:
    """Entropy computed per tile, then averaged over tiles."""
    return float(np.mean([shannon_entropy(m) for m in index_maps]))


def naive_index_bits(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


@dataclass(frozen=True)
class InputSpec:
    channels: int
    height: int
    width: int
    bits_per_sample: float = 32

    @property
    def bits(self) -> float:
        return self.channels * self.height * self.width * self.bits_per_sample


@dataclass(frozen=True)
class CodeSpec:
    height: int
    width: int
    bits_per_index: float

    @property
    def bits(self) -> float:
        return self.height * self.width * self.bits_per_index


def compression_ratio(input_spec: InputSpec, code_spec: CodeSpec, side_info_bits: float = 0.0) -> float:
    """Input bits over code-map bits plus side information."""
    for name, v in [("channels", input_spec.channels), ("height", input_spec.height),
                    ("width", input_spec.width), ("bits_per_sample", input_spec.bits_per_sample),
                    ("code height", code_spec.height), ("code width", code_spec.width)]:
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    if code_spec.bits_per_index < 0 or side_info_bits < 0:
        raise ValueError("bit counts must be non-negative")
    denom = code_spec.bits + side_info_bits
    if denom <= 0:
        raise ValueError("code and side information are both empty")
    return input_spec.bits / denom


# -- bad pixels -----------------------------------------------------------------


def _as_stack(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[:, None]
    if values.ndim != 4 or values.shape[0] != 12 or values.shape[2] != values.shape[3]:
        raise ValueError(f"expected a (12, [C,] t, t) tile stack, got shape {values.shape}")
    return values


@dataclass(frozen=True, eq=False)
class BadPixelTable:
    """Pixels whose reconstruction error exceeded the channel threshold.

    Entry arrays are parallel and sorted by flat address; ``values`` are the
    original samples.  ``shape`` is the ``(12, C, t, t)`` stack shape.
    """

    tile: np.ndarray
    row: np.ndarray
    col: np.ndarray
    channel: np.ndarray
    values: np.ndarray
    thresholds: np.ndarray
    shape: tuple[int, int, int, int]

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def address_bits(self) -> int:
        _, c, t, _ = self.shape
        return math.ceil(math.log2(12 * t * t * c))

    @property
    def flat_index(self) -> np.ndarray:
        _, c, t, _ = self.shape
        return ((self.tile * t + self.row) * t + self.col) * c + self.channel


def _thresholds(thresholds, channels: int) -> np.ndarray:
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (channels,)).copy()
    if np.any(~np.isfinite(thr)) or np.any(thr < 0):
        raise ValueError("thresholds must be finite and non-negative")
    return thr


def build_bad_pixel_table(recon, truth, thresholds) -> BadPixelTable:
    """List every pixel with ``|recon - truth| > threshold`` of its channel."""
    recon = _as_stack(recon)
    truth = _as_stack(truth)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: recon {recon.shape} vs truth {truth.shape}")
    thr = _thresholds(thresholds, recon.shape[1])
    bad = np.abs(recon - truth) > thr[None, :, None, None]
    h, r, q, c = np.nonzero(bad.transpose(0, 2, 3, 1))  # flat-address order
    return BadPixelTable(h, r, q, c, truth.transpose(0, 2, 3, 1)[h, r, q, c], thr, recon.shape)


def apply_bad_pixel_table(recon, table: BadPixelTable) -> np.ndarray:
    """Overwrite listed pixels with their stored originals; same shape as ``recon``."""
    arr = np.asarray(recon, dtype=np.float64)
    out = _as_stack(arr).copy()
    if out.shape != table.shape:
        raise ValueError(f"table is for shape {table.shape}, got {out.shape}")
    out[table.tile, table.channel, table.row, table.col] = table.values
    return out.reshape(arr.shape)


def table_storage_bits(table: BadPixelTable) -> int:
    """Entries times (flat address bits + one 32-bit value)."""
    return len(table) * (table.address_bits + VALUE_BITS)


# -- files ----------------------------------------------------------------------


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CBK_MAGIC)
        fh.write(struct.pack("<IIQ", codebook.size, codebook.dim, codebook.seed))
        fh.write(codebook.codewords.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != _CBK_MAGIC:
        raise ValueError(f"{path}: not a codebook file")
    if len(data) < 20:
        raise ValueError(f"{path}: truncated header")
    n, dim, seed = struct.unpack_from("<IIQ", data, 4)
    if len(data) != 20 + 4 * n * dim:
        raise ValueError(f"{path}: truncated or oversized payload")
    words = np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64).reshape(n, dim)
    return Codebook(words, seed)


def _index_dtype(n: int) -> str:
    if n <= 1 << 8:
        return "<u1"
    if n <= 1 << 16:
        return "<u2"
    return "<u4"


def save_quantized_tiles(index_maps, n: int, path) -> None:
    """Write index maps as consecutive ``QTI1`` records (header ``h, w, N``)."""
    dt = _index_dtype(n)
    with open(path, "wb") as fh:
        for m in index_maps:
            m = np.asarray(m)
            fh.write(_QTI_MAGIC)
            fh.write(struct.pack("<III", m.shape[0], m.shape[1], n))
            fh.write(m.astype(dt).tobytes())


def load_quantized_tiles(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if data[pos : pos + 4] != _QTI_MAGIC:
            raise ValueError(f"{path}: bad record at byte {pos}")
        if pos + 16 > len(data):
            raise ValueError(f"{path}: truncated record header")
        h, w, n = struct.unpack_from("<III", data, pos + 4)
        dt = np.dtype(_index_dtype(n))
        pos += 16
        end = pos + h * w * dt.itemsize
        if end > len(data):
            raise ValueError(f"{path}: truncated record")
        m = np.frombuffer(data[pos:end], dtype=dt).astype(np.int64).reshape(h, w)
        if m.size and m.max() >= n:
            raise ValueError(f"{path}: index out of range for N={n}")
        out.append(m)
        pos = end
    return out


def save_bad_pixel_table(table: BadPixelTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_BAD_PIXEL_HEADER)
        for h, r, c, ch, v in zip(table.tile, table.row, table.col, table.channel, table.values):
            w.writerow([int(h), int(r), int(c), int(ch), repr(float(v))])


def load_bad_pixel_table(path, shape, thresholds) -> BadPixelTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _BAD_PIXEL_HEADER:
        raise ValueError(f"{path}: expected header {','.join(_BAD_PIXEL_HEADER)}")
    body = rows[1:]
    cols = [np.array([int(r[i]) for r in body], dtype=np.int64) for i in range(4)]
    vals = np.array([float(r[4]) for r in body], dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    return BadPixelTable(cols[0], cols[1], cols[2], cols[3], vals, _thresholds(thresholds, shape[1]), shape)
