"""End-to-end dataset assembly shared by the CLI, tests, and experiments:
records -> per-cell series -> interpolation -> leakage-safe scaling ->
windowed samples -> temporal split.
"""

from __future__ import annotations

import numpy as np

from . import dataprep
from .dataprep import (KpiSeries, apply_scaler, fit_scaler, interpolate_missing,
                       make_windows, records_to_series, rsrq_series, split_4_1_1)
from .errors import DataError


def load_series(records, step_seconds, channels=("load", "ue")):
    """Records -> interpolated per-cell KpiSeries."""
    series = records_to_series(records, step_seconds, channels)
    if not series:
        raise DataError("no load/ue records found")
    return {cell: interpolate_missing(s) for cell, s in series.items()}


def _scaled(series, scaler):
    return KpiSeries(
        cell_id=series.cell_id, start_ts=series.start_ts,
        step_seconds=series.step_seconds, channels=list(series.channels),
        values=apply_scaler(series.values, scaler),
        missing_mask=series.missing_mask,
    )


def _anchor_bounds(series, window, max_h):
    first = window.history_span()
    last = series.length - max_h
    return first, last


def prepare_load_dataset(series_by_cell, window, horizons, target_channel="load"):
    """Build scaled WindowedSamples across cells with a 4:1:1 temporal split.

    The scaler is fitted only on timesteps strictly before the first
    validation anchor, so no validation/test information leaks into it.
    Returns (train, val, test, scaler).
    """
    max_h = max(horizons)
    pairs = []
    for cell in sorted(series_by_cell):
        first, last = _anchor_bounds(series_by_cell[cell], window, max_h)
        pairs.extend((t, cell) for t in range(first, last + 1))
    if len(pairs) < 6:
        raise DataError("not enough anchors for a 4:1:1 split")
    pairs.sort()
    boundary = pairs[(4 * len(pairs)) // 6][0]  # first validation anchor

    any_series = next(iter(series_by_cell.values()))
    train_rows = np.concatenate(
        [s.values[:min(boundary, s.length)] for _, s in sorted(series_by_cell.items())])
    scaler = fit_scaler(train_rows, any_series.channels)

    samples = []
    for cell in sorted(series_by_cell):
        scaled = _scaled(series_by_cell[cell], scaler)
        samples.extend(make_windows(scaled, window, horizons,
                                    target_channel=target_channel))
    samples.sort(key=lambda s: (s.anchor_t, s.cell_id))
    train, val, test = split_4_1_1(samples)
    return train, val, test, scaler


def prepare_pdf_dataset(records, window, bucket_seconds=300):
    """RSRQ records -> histogram WindowedSamples with a 4:1:1 split.

    Histogram rows are already normalized, so there is no scaler (None).
    """
    cells = sorted({r["cell"] for r in records if r["topic"] == "rsrq"})
    if not cells:
        raise DataError("no rsrq records found")
    samples = []
    for cell in cells:
        series = interpolate_missing(rsrq_series(records, cell, bucket_seconds))
        samples.extend(make_windows(series, window, pdf_target=True))
    samples.sort(key=lambda s: (s.anchor_t, s.cell_id))
    train, val, test = split_4_1_1(samples)
    return train, val, test, None


def prediction_samples(series_by_cell, window, scaler, target_channel="load"):
    """Inference-mode samples (no targets) for batch prediction; the same
    windows the streaming engine builds online."""
    samples = []
    for cell in sorted(series_by_cell):
        s = series_by_cell[cell]
        scaled = _scaled(s, scaler) if scaler is not None else s
        samples.extend(make_windows(scaled, window, require_targets=False,
                                    target_channel=target_channel))
    samples.sort(key=lambda s: (s.anchor_t, s.cell_id))
    return samples
