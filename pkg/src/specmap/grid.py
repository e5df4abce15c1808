"""Square area discretized into rectangular cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Regular ``n1 x n2`` grid over ``[x0, x0 + side] x [y0, y0 + side]``.

    Row index ``i`` runs along x, column index ``j`` along y. Cell ``(i, j)``
    has center ``(x0 + (i + 0.5) * side / n1, y0 + (j + 0.5) * side / n2)``.
    """

    n1: int
    n2: int
    side: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.side > 0:
            raise ValueError("grid side must be positive")

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def n_cells(self):
        return self.n1 * self.n2

    @property
    def centers(self):
        """Cell centers, shape ``(n1, n2, 2)``."""
        xs = self.x0 + (np.arange(self.n1) + 0.5) * (self.side / self.n1)
        ys = self.y0 + (np.arange(self.n2) + 0.5) * (self.side / self.n2)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def flat_centers(self):
        return self.centers.reshape(-1, 2)

    def cell_of(self, points):
        """Row-major flat index of the cell containing each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.floor((points[:, 0] - self.x0) / (self.side / self.n1)).astype(int)
        j = np.floor((points[:, 1] - self.y0) / (self.side / self.n2)).astype(int)
        i = np.clip(i, 0, self.n1 - 1)
        j = np.clip(j, 0, self.n2 - 1)
        return i * self.n2 + j

    def snap(self, points):
        """Move each point to the center of its cell."""
        return self.flat_centers()[self.cell_of(points)]
