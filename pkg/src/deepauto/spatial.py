"""Correlation-based spatial graph over cells and top-k neighbor
augmentation of per-cell inputs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataprep import KpiSeries
from .errors import DataError, ShapeError


@dataclass
class SpatialGraph:
    """Cells and a symmetric |Pearson r| weight matrix (zero diagonal)."""

    cells: list
    weights: np.ndarray  # (N, N)

    def weight(self, a, b):
        return float(self.weights[self._index(a), self._index(b)])

    def _index(self, cell):
        try:
            return self.cells.index(cell)
        except ValueError:
            raise DataError(f"unknown cell {cell!r}") from None

    def to_json(self):
        adj = {cell: {other: float(self.weights[i, j])
                      for j, other in enumerate(self.cells)
                      if j != i and self.weights[i, j] > 0.0}
               for i, cell in enumerate(self.cells)}
        return json.dumps(adj, sort_keys=True)


def build_graph(series_by_cell, channel, train_range=None):
    """Pairwise |Pearson r| of one channel over the training slice.

    `train_range` is a (start, stop) index pair; weights use only that
    slice so no test-period information leaks into the graph.
    Zero-variance cells get weight 0 to everyone.
    """
    cells = sorted(series_by_cell)
    if len(cells) < 2:
        raise DataError("need at least 2 cells to build a spatial graph")
    columns = []
    length = None
    for cell in cells:
        series = series_by_cell[cell]
        col = series.values[:, series.channel_index(channel)]
        if train_range is not None:
            col = col[train_range[0]:train_range[1]]
        if length is None:
            length = col.shape[0]
        elif col.shape[0] != length:
            raise ShapeError(f"cell {cell}: series length {col.shape[0]} != {length}")
        columns.append(col)
    X = np.stack(columns)  # (N, T)
    stds = X.std(axis=1)
    # a numerically-constant column can carry a ~1e-17 mean residual; don't
    # let that masquerade as perfect correlation
    stds[stds <= 1e-12 * (1.0 + np.abs(X).max(axis=1))] = 0.0
    centered = X - X.mean(axis=1, keepdims=True)
    weights = np.zeros((len(cells), len(cells)))
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = centered @ centered.T / X.shape[1]
        denom = np.outer(stds, stds)
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    weights = np.abs(corr)
    weights = np.clip((weights + weights.T) / 2.0, 0.0, 1.0)  # enforce exact symmetry
    np.fill_diagonal(weights, 0.0)
    return SpatialGraph(cells=cells, weights=weights)


def topk_neighbors(graph, cell, k):
    """k highest-weight neighbors, descending; ties broken by cell id."""
    if k < 0:
        raise ShapeError("k must be >= 0")
    i = graph._index(cell)
    others = [(float(-graph.weights[i, j]), other)
              for j, other in enumerate(graph.cells) if j != i]
    others.sort()
    return [cell_id for _, cell_id in others[:k]]


def augment_inputs(series, neighbor_series):
    """Concatenate neighbor channels onto a cell's series, ranking order.

    Channel names of neighbor n become "nb{n}_{channel}". Values are copied
    bit-exactly; no rescaling.
    """
    values = [series.values]
    masks = [series.missing_mask]
    channels = list(series.channels)
    for n, nb in enumerate(neighbor_series, start=1):
        if nb.length != series.length:
            raise ShapeError(
                f"neighbor {nb.cell_id} length {nb.length} != {series.length}")
        values.append(nb.values)
        masks.append(nb.missing_mask)
        channels.extend(f"nb{n}_{ch}" for ch in nb.channels)
    return KpiSeries(
        cell_id=series.cell_id, start_ts=series.start_ts,
        step_seconds=series.step_seconds, channels=channels,
        values=np.concatenate(values, axis=1),
        missing_mask=np.concatenate(masks, axis=1),
    )
