"""Temporal compositing: dated scenes to the 36-channel feature stack.

A growing season is six consecutive 32-day windows starting (by default) on
May 1. Within each window the per-pixel, per-band mean of every scene whose
validity mask is set becomes one 6-band slab; the six slabs concatenate
window-major into the 36-channel stack the model consumes.

Clouds are deliberately NOT masked: a cloudy pixel is valid data and flows
into the mean. Only hard nodata (scan-line gaps) is excluded. Pixels that
end up with zero valid observations in a window are filled with 0 and
flagged by a zero in the per-window count raster.
"""

from __future__ import annotations

import datetime as dt
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .geodata import RasterGrid

BAND_NAMES = ("blue", "green", "red", "nir", "swir1", "swir2")
NUM_BANDS = len(BAND_NAMES)
NUM_WINDOWS = 6
WINDOW_DAYS = 32
SEASON_DAYS = NUM_WINDOWS * WINDOW_DAYS  # 192


@dataclass
class SceneObservation:
    """One dated acquisition: 6 bands plus a shared per-pixel validity mask."""

    date: dt.date
    bands: np.ndarray  # (6, h, w) float32
    valid: np.ndarray  # (h, w) bool, True where the pixel carries data
    grid: RasterGrid

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.bands.shape[0] != NUM_BANDS:
            raise ShapeError(f"scene must have exactly {NUM_BANDS} bands, got {self.bands.shape[0]}")
        if self.bands.shape[1:] != self.valid.shape:
            raise ShapeError(
                f"validity mask shape {self.valid.shape} does not match bands {self.bands.shape[1:]}"
            )
        if self.bands.shape[1:] != (self.grid.height, self.grid.width):
            raise ShapeError("scene shape does not match its grid")


@dataclass
class CompositeStack:
    """36-channel feature raster, channels ordered (window 0..5) x (band 0..5)."""

    data: np.ndarray  # (36, h, w) float32
    counts: np.ndarray  # (6, h, w) int32 valid observations per window
    grid: RasterGrid
    year_start: dt.date
    windows: list[tuple[dt.date, dt.date]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.counts = np.asarray(self.counts, dtype=np.int32)
        if self.data.shape[0] != NUM_WINDOWS * NUM_BANDS:
            raise ShapeError(f"stack must have {NUM_WINDOWS * NUM_BANDS} channels")


def window_partition(year_start: dt.date) -> list[tuple[dt.date, dt.date]]:
    """Six consecutive 32-day windows covering 192 days; ends are exclusive."""
    return [
        (
            year_start + dt.timedelta(days=k * WINDOW_DAYS),
            year_start + dt.timedelta(days=(k + 1) * WINDOW_DAYS),
        )
        for k in range(NUM_WINDOWS)
    ]


def temporal_mean(
    observations: list[SceneObservation], window: tuple[dt.date, dt.date]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel, per-band mean of valid observations dated within the window.

    Returns (mean (6, h, w) float32, count (h, w) int32). Pixels with no
    valid observation get mean 0 and count 0. Scenes are accumulated in a
    content-determined order, so any input permutation produces bit-identical
    output.
    """
    if not observations:
        raise ValueError("temporal_mean needs at least one observation")
    grid = observations[0].grid
    for obs in observations[1:]:
        if obs.grid != grid:
            raise ShapeError("observations do not share a georeference")
    start, end = window
    hits = [o for o in observations if start <= o.date < end]
    hits.sort(key=lambda o: (o.date.toordinal(), hashlib.sha256(o.bands.tobytes()).hexdigest()))
    h, w = grid.height, grid.width
    total = np.zeros((NUM_BANDS, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int32)
    for obs in hits:
        total += np.where(obs.valid[None, :, :], obs.bands.astype(np.float64), 0.0)
        count += obs.valid
    mean = np.divide(total, count[None, :, :], out=np.zeros_like(total), where=count[None, :, :] > 0)
    return mean.astype(np.float32), count


def build_stack(scenes: list[SceneObservation], year_start: dt.date) -> CompositeStack:
    """Assemble the full season stack from an arbitrary pile of scenes.

    Raises if no scene falls in any window; windows with no scenes are
    zero-filled with a warning record (the real archives have such gaps and
    the model has to tolerate them).
    """
    if not scenes:
        raise ValueError("build_stack needs at least one scene")
    grid = scenes[0].grid
    windows = window_partition(year_start)
    slabs = []
    counts = []
    warnings = []
    any_scene = False
    for k, window in enumerate(windows):
        in_window = [s for s in scenes if window[0] <= s.date < window[1]]
        if in_window:
            any_scene = True
            mean, count = temporal_mean(scenes, window)
        else:
            mean = np.zeros((NUM_BANDS, grid.height, grid.width), dtype=np.float32)
            count = np.zeros((grid.height, grid.width), dtype=np.int32)
            warnings.append(f"window {k} [{window[0]}, {window[1]}) has no scenes; zero-filled")
        slabs.append(mean)
        counts.append(count)
    if not any_scene:
        raise ValueError("no scene falls inside any compositing window")
    return CompositeStack(
        data=np.concatenate(slabs, axis=0),
        counts=np.stack(counts, axis=0),
        grid=grid,
        year_start=year_start,
        windows=windows,
        warnings=warnings,
    )
