"""Hierarchical data partitioning over a process grid.

Data is described at three levels: level 0 is the whole object, level 1 is a
B x B grid of blocks distributed block-cyclically over a p x q process grid,
and level 2 splits each block into b x b node-local tiles of edge n, so the
global edge is N = B * b * n with exact divisibility.  Block content is laid
out as contiguous row-major tiles of row-major elements, so any tile and any
block is one contiguous byte range (offset arithmetic, no per-tile pointers).

Lower-triangular data stores only blocks with i >= j.  Diagonal blocks keep
the full b x b tile layout (tiles above the diagonal exist but are zero and
never touched); task enumeration over a diagonal block still yields only the
lower tiles.  Keeping the byte length uniform across blocks is what makes
communication volume depend only on the process grid, not on which blocks
happen to sit on the diagonal.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ELEM = 8  # float64 bytes


class ProcessGrid:
    """A p x q block-cyclic process grid: owner(i, j) = (i mod p) * q + (j mod q)."""

    def __init__(self, p: int, q: int):
        if p < 1 or q < 1:
            raise ConfigError(f"grid dimensions must be positive, got {p}x{q}")
        self.p = p
        self.q = q

    @property
    def nranks(self) -> int:
        return self.p * self.q

    def owner(self, i: int, j: int) -> int:
        return (i % self.p) * self.q + (j % self.q)

    def __repr__(self):
        return f"ProcessGrid({self.p}x{self.q})"


@dataclass(frozen=True)
class PartitionId:
    """Identifies one partition of a data object at some level."""

    data_id: int
    level: int
    i: int
    j: int = 0


class MatrixDescriptor:
    """Square dense matrix split into B x B blocks of b x b tiles of edge n."""

    def __init__(self, data_id: int, n_global: int, blocks: int, subblocks: int,
                 grid: ProcessGrid, symmetry: str = "full"):
        if symmetry not in ("full", "lower"):
            raise ConfigError(f"unknown symmetry {symmetry!r}")
        if n_global % (blocks * subblocks) != 0:
            raise ConfigError(
                f"N={n_global} not divisible by B*b={blocks}*{subblocks}")
        self.data_id = data_id
        self.n_global = n_global
        self.blocks = blocks
        self.subblocks = subblocks
        self.tile = n_global // (blocks * subblocks)
        self.grid = grid
        self.symmetry = symmetry

    @property
    def block_edge(self) -> int:
        """Elements per block edge."""
        return self.subblocks * self.tile

    def stored(self, i: int, j: int) -> bool:
        self._check(i, j)
        return self.symmetry == "full" or i >= j

    def _check(self, i: int, j: int):
        if not (0 <= i < self.blocks and 0 <= j < self.blocks):
            raise ConfigError(
                f"block ({i},{j}) out of range for B={self.blocks}")

    def owner_of(self, i: int, j: int) -> int:
        """Rank owning level-1 block (i, j)."""
        if not self.stored(i, j):
            raise ConfigError(f"block ({i},{j}) not stored (symmetry={self.symmetry})")
        return self.grid.owner(i, j)

    def stored_blocks(self):
        """All stored level-1 block indices, row-major."""
        for i in range(self.blocks):
            for j in range(self.blocks):
                if self.symmetry == "full" or i >= j:
                    yield (i, j)

    def content_length(self, i: int, j: int) -> int:
        """Bytes of one block's content: uniform full tile layout."""
        self._check(i, j)
        return self.subblocks * self.subblocks * self.tile * self.tile * ELEM

    def tile_range(self, i2: int, j2: int):
        """(offset, length) in bytes of tile (i2, j2) within its block."""
        b, n = self.subblocks, self.tile
        if not (0 <= i2 < b and 0 <= j2 < b):
            raise ConfigError(f"tile ({i2},{j2}) out of range for b={b}")
        return (i2 * b + j2) * n * n * ELEM, n * n * ELEM

    def split(self, part: PartitionId):
        """Children of a partition one level down.

        Level 0 yields the stored blocks; a level-1 block yields its tiles,
        restricted to the lower triangle for diagonal blocks of a triangular
        matrix.  Splitting a leaf is an error.
        """
        if part.level == 0:
            return [PartitionId(self.data_id, 1, i, j) for i, j in self.stored_blocks()]
        if part.level == 1:
            self._check(part.i, part.j)
            tri = self.symmetry == "lower" and part.i == part.j
            b = self.subblocks
            return [PartitionId(self.data_id, 2, i2, j2)
                    for i2 in range(b) for j2 in range(b)
                    if not tri or i2 >= j2]
        raise ConfigError(f"cannot split a level-{part.level} partition")


class VectorDescriptor:
    """Vector of length N split into B block rows of b sub-chunks each."""

    def __init__(self, data_id: int, n_global: int, blocks: int, subblocks: int,
                 nranks: int):
        if n_global % (blocks * subblocks) != 0:
            raise ConfigError(
                f"N={n_global} not divisible by B*b={blocks}*{subblocks}")
        self.data_id = data_id
        self.n_global = n_global
        self.blocks = blocks
        self.subblocks = subblocks
        self.chunk = n_global // blocks
        self.sub = self.chunk // subblocks
        self.nranks = nranks

    def owner_of(self, i: int) -> int:
        if not 0 <= i < self.blocks:
            raise ConfigError(f"block row {i} out of range for B={self.blocks}")
        return i % self.nranks

    def content_length(self, i: int) -> int:
        return self.chunk * ELEM

    def chunk_range(self, r: int):
        """(offset, length) in bytes of sub-chunk r within its block row."""
        if not 0 <= r < self.subblocks:
            raise ConfigError(f"sub-chunk {r} out of range for b={self.subblocks}")
        return r * self.sub * ELEM, self.sub * ELEM


def pack_block(m: np.ndarray, desc: MatrixDescriptor, i: int, j: int) -> np.ndarray:
    """Extract block (i, j) of a global matrix as its tiled content array.

    Returns a float64 array of shape (b*b*n*n,) in tile-major order.  For the
    diagonal block of a triangular matrix, elements above the global diagonal
    are zeroed so the stored content is exactly the lower triangle.
    """
    be, b, n = desc.block_edge, desc.subblocks, desc.tile
    sub = np.array(m[i * be:(i + 1) * be, j * be:(j + 1) * be], dtype=np.float64)
    if desc.symmetry == "lower" and i == j:
        sub = np.tril(sub)
    tiles = sub.reshape(b, n, b, n).swapaxes(1, 2)
    return np.ascontiguousarray(tiles).reshape(-1)


def unpack_block(content: np.ndarray, desc: MatrixDescriptor) -> np.ndarray:
    """Inverse of pack_block: tiled content back to a (block_edge, block_edge) array."""
    b, n = desc.subblocks, desc.tile
    tiles = np.asarray(content, dtype=np.float64).reshape(b, b, n, n)
    return np.ascontiguousarray(tiles.swapaxes(1, 2)).reshape(b * n, b * n)


def assemble_matrix(blocks: dict, desc: MatrixDescriptor) -> np.ndarray:
    """Rebuild the global matrix from {(i, j): content} block contents.

    Missing blocks (the unstored upper triangle) are left zero.
    """
    be = desc.block_edge
    m = np.zeros((desc.n_global, desc.n_global))
    for (i, j), content in blocks.items():
        m[i * be:(i + 1) * be, j * be:(j + 1) * be] = unpack_block(content, desc)
    return m


def save_dense(path: str, m: np.ndarray, symmetry: str = "full"):
    """Write a matrix as flat little-endian float64 plus a text sidecar."""
    arr = np.ascontiguousarray(m, dtype="<f8")
    arr.tofile(path)
    with open(path + ".meta", "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]} {symmetry}\n")


def load_dense(path: str):
    """Read a matrix written by save_dense; returns (matrix, symmetry)."""
    if not os.path.exists(path + ".meta"):
        raise ConfigError(f"missing sidecar {path}.meta")
    with open(path + ".meta") as fh:
        rows_s, cols_s, symmetry = fh.read().split()
    rows, cols = int(rows_s), int(cols_s)
    m = np.fromfile(path, dtype="<f8").reshape(rows, cols)
    return m, symmetry
