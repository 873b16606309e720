"""Nested Brownian increments on the fine grid, with reproducible streams.

Every replicate owns a fixed block of a Philox4x64 counter stream. The
128-bit Philox key is derived from (master_seed, purpose, level_index); the
replicate index selects the counter offset. Any contiguous range of
replicates can therefore be generated in one call and the values do not
depend on how work is split into chunks or threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import ndtri

PURPOSES = ("rates", "noise", "mlmc-level", "clt-replicate", "ablation")

_U64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    purpose: str
    level_index: int = 0
    replicate_index: int = 0

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown stream purpose {self.purpose!r}")
        if not 0 <= self.master_seed <= _U64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.level_index < 0 or self.replicate_index < 0:
            raise ValueError("level and replicate indices must be non-negative")

    def philox_key(self) -> np.ndarray:
        ss = np.random.SeedSequence(
            [self.master_seed, PURPOSES.index(self.purpose) + 1, self.level_index]
        )
        return ss.generate_state(2, dtype=np.uint64)

    def with_replicate(self, replicate_index: int) -> "StreamKey":
        return StreamKey(self.master_seed, self.purpose, self.level_index, replicate_index)


def derive_seed(master_seed: int, *labels: int) -> int:
    """Deterministic 64-bit child seed, e.g. one per CLT replicate."""
    return int(np.random.SeedSequence([master_seed, *labels]).generate_state(1, np.uint64)[0])


def _block_counters(size: int) -> int:
    # Philox4x64 emits four 64-bit words per counter step
    return -(-size // 4)


def standard_normals(key: StreamKey, size: int, count: int = 1) -> np.ndarray:
    """(count, size) N(0,1) draws for replicates key.replicate_index + [0, count).

    Uniforms are (k + 1/2) / 2^53 from the top 53 bits of each Philox word and
    are mapped through the inverse normal CDF.
    """
    block = _block_counters(size)
    start = key.replicate_index * block
    counter = np.array([start & _U64, start >> 64, 0, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=key.philox_key(), counter=counter)
    raw = bitgen.random_raw(count * block * 4).reshape(count, block * 4)[:, :size]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    return ndtri(u)


@dataclass(frozen=True)
class FineIncrementGrid:
    """delta[i, k, j] = W^j at fine time (m*i + k + 1)/(nm) minus W^j at (m*i + k)/(nm).

    Indices are zero-based; time horizon is [0, 1] and the coarse step is 1/n.
    """

    n: int
    m: int
    q: int
    delta: np.ndarray

    def __post_init__(self):
        arr = np.array(self.delta, dtype=float)
        if arr.shape != (self.n, self.m, self.q):
            raise ValueError(f"delta shape {arr.shape} != {(self.n, self.m, self.q)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid increments must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "delta", arr)

    @property
    def dt_coarse(self) -> float:
        return 1.0 / self.n

    @property
    def dt_fine(self) -> float:
        return 1.0 / (self.n * self.m)


def _check_dims(n: int, m: int, q: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if m < 2:
        raise ValueError(f"refinement factor m must be >= 2, got {m}")
    if q < 1:
        raise ValueError(f"noise dimension q must be >= 1, got {q}")


def sample_grids(key: StreamKey, n: int, m: int, q: int, count: int) -> np.ndarray:
    """Increment tensors of shape (count, n, m, q), each entry N(0, 1/(nm))."""
    _check_dims(n, m, q)
    z = standard_normals(key, n * m * q, count)
    z *= np.sqrt(1.0 / (n * m))
    return z.reshape(count, n, m, q)


def sample_grid(key: StreamKey, n: int, m: int, q: int) -> FineIncrementGrid:
    return FineIncrementGrid(n, m, q, sample_grids(key, n, m, q, 1)[0])


def iter_cells(key: StreamKey, n: int, m: int, q: int, cells_per_chunk: int = 4096) -> Iterator[np.ndarray]:
    """Yield the (m, q) cells of ``sample_grid(key, n, m, q)`` one at a time.

    Bit-identical to the materialised grid; memory stays O(cells_per_chunk).
    """
    _check_dims(n, m, q)
    block = _block_counters(n * m * q)
    start = key.replicate_index * block
    counter = np.array([start & _U64, start >> 64, 0, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=key.philox_key(), counter=counter)
    scale = np.sqrt(1.0 / (n * m))
    cell = m * q
    for first in range(0, n, cells_per_chunk):
        k = min(cells_per_chunk, n - first)
        raw = bitgen.random_raw(k * cell)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
        yield from (ndtri(u) * scale).reshape(k, m, q)


def coarse_increments(grid) -> np.ndarray:
    """Delta W_i = sum_k delta W_ik, summed in increasing k.

    Accepts a FineIncrementGrid or a raw (..., n, m, q) array.
    """
    delta = grid.delta if isinstance(grid, FineIncrementGrid) else np.asarray(grid)
    out = delta[..., 0, :].copy()
    for k in range(1, delta.shape[-2]):
        out += delta[..., k, :]
    return out


@dataclass(frozen=True)
class Permutation:
    """A bijection of {1..m}; ``images[k-1]`` is sigma(k)."""

    images: tuple

    def __post_init__(self):
        imgs = tuple(int(v) for v in self.images)
        if sorted(imgs) != list(range(1, len(imgs) + 1)):
            raise ValueError(f"{imgs} is not a permutation of 1..{len(imgs)}")
        object.__setattr__(self, "images", imgs)

    @property
    def m(self) -> int:
        return len(self.images)

    @property
    def index(self) -> np.ndarray:
        return np.asarray(self.images) - 1

    @property
    def is_identity(self) -> bool:
        return self.images == tuple(range(1, self.m + 1))

    @property
    def is_reversal(self) -> bool:
        return self.images == tuple(range(self.m, 0, -1))

    @classmethod
    def identity(cls, m: int) -> "Permutation":
        return cls(tuple(range(1, m + 1)))

    @classmethod
    def reversal(cls, m: int) -> "Permutation":
        return cls(tuple(range(m, 0, -1)))

    @classmethod
    def parse(cls, text: str) -> "Permutation":
        """Parse '3,2,1' or '321' (single digit images only in the latter)."""
        text = text.strip().strip("()[]")
        parts = text.split(",") if "," in text else list(text)
        return cls(tuple(int(p) for p in parts))

    def __str__(self) -> str:
        return "(" + ",".join(map(str, self.images)) + ")"


def permute_grid(grid: FineIncrementGrid, sigma: Permutation) -> FineIncrementGrid:
    """Cell-wise reordering: out.delta[i, k] = grid.delta[i, sigma(k)]."""
    if sigma.m != grid.m:
        raise ValueError(f"permutation order {sigma.m} != grid refinement {grid.m}")
    return FineIncrementGrid(grid.n, grid.m, grid.q, grid.delta[:, sigma.index, :])


def grid_from_increments(increments, m: int) -> FineIncrementGrid:
    """Group an (N, q) sequence of fine increments into N/m cells of size m."""
    inc = np.asarray(increments, dtype=float)
    total, q = inc.shape
    if total % m:
        raise ValueError(f"{total} increments do not split into cells of {m}")
    return FineIncrementGrid(total // m, m, q, inc.reshape(total // m, m, q))


def aggregate_increments(increments, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` rows of an (N, q) increment array."""
    inc = np.asarray(increments, dtype=float)
    cells = inc.reshape(inc.shape[0] // factor, factor, inc.shape[1])
    return coarse_increments(cells)


def write_grid_csv(grid: FineIncrementGrid, path) -> None:
    """Debug dump with columns (i, k, j, delta), indices 1-based."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "k", "j", "delta"])
        for i in range(grid.n):
            for k in range(grid.m):
                for j in range(grid.q):
                    w.writerow([i + 1, k + 1, j + 1, f"{grid.delta[i, k, j]:.17g}"])
