"""Structured-grid finite-difference model problems and rank partitioning.

The model family is the 2D 5-point stencil with per-axis diffusion
coefficients and eliminated homogeneous Dirichlet boundary: unknowns live on
the nx x ny interior nodes, boundary couplings are truncated.  Ranks are
1D strips of contiguous grid rows; the halo of a rank is exactly the set of
indices coupled to its owned set through the stencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPartitionError
from .sparse import CsrMatrix


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    h: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs nx >= 2 and ny >= 2")
        if self.h <= 0:
            raise ValueError("mesh width must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix


@dataclass(frozen=True)
class Anisotropy:
    eps_x: float = 1.0
    eps_y: float = 1.0

    def __post_init__(self):
        if self.eps_x <= 0 or self.eps_y <= 0:
            raise ValueError("diffusion coefficients must be positive")


@dataclass
class Partition:
    """Strip partition: per-rank owned index sets, halos and neighbor map."""

    num_ranks: int
    owned: list            # rank -> np.ndarray of owned global indices
    halo: list             # rank -> np.ndarray of halo global indices
    neighbors: list        # rank -> list of (neighbor rank, shared global indices)
    row_ranges: list       # rank -> (first grid row, last grid row + 1)

    def rank_of(self, index: int) -> int:
        for r, idx in enumerate(self.owned):
            if index in idx:
                return r
        raise KeyError(index)


def assemble_poisson(grid: StructuredGrid, aniso: Anisotropy | None = None) -> CsrMatrix:
    """5-point stencil matrix, SPD, Dirichlet boundary eliminated."""
    aniso = aniso or Anisotropy()
    ex, ey = aniso.eps_x, aniso.eps_y
    s = 1.0 / (grid.h * grid.h)
    nx, ny = grid.nx, grid.ny
    rows, cols, vals = [], [], []
    for iy in range(ny):
        for ix in range(nx):
            i = grid.index(ix, iy)
            rows.append(i)
            cols.append(i)
            vals.append((2.0 * ex + 2.0 * ey) * s)
            if ix > 0:
                rows.append(i)
                cols.append(grid.index(ix - 1, iy))
                vals.append(-ex * s)
            if ix < nx - 1:
                rows.append(i)
                cols.append(grid.index(ix + 1, iy))
                vals.append(-ex * s)
            if iy > 0:
                rows.append(i)
                cols.append(grid.index(ix, iy - 1))
                vals.append(-ey * s)
            if iy < ny - 1:
                rows.append(i)
                cols.append(grid.index(ix, iy + 1))
                vals.append(-ey * s)
    return CsrMatrix.from_coo(grid.n, grid.n, rows, cols, vals)


def partition_1d_strips(grid: StructuredGrid, p: int) -> Partition:
    """Split the grid into p contiguous row strips along y.

    Strip heights differ by at most one grid row; each internal interface
    contributes one halo line per side (the 5-point stencil couples only
    adjacent rows).
    """
    if p < 1:
        raise InvalidPartitionError("need at least one rank")
    if p > grid.ny:
        raise InvalidPartitionError(
            f"cannot split {grid.ny} grid rows into {p} strips"
        )
    base, extra = divmod(grid.ny, p)
    row_ranges = []
    start = 0
    for r in range(p):
        height = base + (1 if r < extra else 0)
        row_ranges.append((start, start + height))
        start += height

    def line(iy):
        return np.arange(grid.index(0, iy), grid.index(0, iy) + grid.nx, dtype=np.int64)

    owned, halo, neighbors = [], [], []
    for r, (lo, hi) in enumerate(row_ranges):
        owned.append(np.arange(grid.index(0, lo), grid.index(0, hi), dtype=np.int64))
        h_parts, nbrs = [], []
        if r > 0:
            shared = line(lo - 1)
            h_parts.append(shared)
            nbrs.append((r - 1, shared))
        if r < p - 1:
            shared = line(hi)
            h_parts.append(shared)
            nbrs.append((r + 1, shared))
        halo.append(
            np.concatenate(h_parts) if h_parts else np.empty(0, dtype=np.int64)
        )
        neighbors.append(nbrs)
    return Partition(p, owned, halo, neighbors, row_ranges)


def extract_local_system(A: CsrMatrix, part: Partition, rank: int):
    """Return (A_FF, A_FH): the owned principal block and the halo couplings.

    Columns of A_FH are ordered like ``part.halo[rank]``; stacking
    [A_FF | A_FH] reproduces the global rows on owned indices exactly.
    """
    if rank >= part.num_ranks:
        raise InvalidPartitionError(f"rank {rank} out of range")
    owned = part.owned[rank]
    halo = part.halo[rank]
    a_ff = A.submatrix(owned, owned)
    if len(halo):
        a_fh = A.submatrix(owned, halo)
    else:
        a_fh = CsrMatrix(len(owned), 0, np.zeros(len(owned) + 1, dtype=np.int64),
                         np.empty(0, dtype=np.int64), np.empty(0))
    return a_ff, a_fh


def make_rhs(grid: StructuredGrid, A: CsrMatrix, mode: str = "ones",
             seed: int = 0) -> np.ndarray:
    """Experiment right-hand sides: b = A x* with x* = 1, or a seeded random b."""
    from .sparse import spmv

    if mode == "ones":
        return spmv(A, np.ones(grid.n))
    if mode == "random":
        return np.random.default_rng(seed).standard_normal(grid.n)
    raise ValueError(f"unknown rhs mode {mode!r}")
