"""Synthetic worlds and scene stacks for exercising the full pipeline.

A world is a set of non-overlapping fields (rectangles plus center-pivot
circles for the irrigated class), road polylines running between them, and
a rectangular county partition. Scenes render per-pixel band values from
per-class seasonal trajectories plus Gaussian noise, then overlay two kinds
of trouble the real archives have:

  * cloud blobs: bright across all bands but VALID data (clouds are never
    masked; the model has to learn around them);
  * scan-line stripes: hard nodata in every second scene, striping out a
    configurable fraction of pixels.

Roads are laid out first and fields keep a margin away from them, so road
masking can never delete labeled irrigated pixels. Everything is a pure
function of (config, seed).
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .compositing import NUM_BANDS, SceneObservation, WINDOW_DAYS
from .geodata import (
    CLASS_CODES,
    Feature,
    RasterGrid,
    UNCULTIVATED,
    VectorLayer,
    SQM_PER_ACRE,
    _polygon_area_centroid,
    clip_ring_to_rect,
    point_in_polygon_mask,
)

# Seasonal mean reflectance per class, rows = 6 windows, cols = 6 bands
# (blue, green, red, nir, swir1, swir2). Irrigated canopies green up hard
# mid-season and stay wet (low swir); dryland greens early then senesces
# bright red and dry; uncultivated prairie stays flat with low NIR.
DEFAULT_TRAJECTORIES = {
    "irrigated": np.array([
        [0.04, 0.07, 0.08, 0.25, 0.18, 0.12],
        [0.04, 0.08, 0.06, 0.38, 0.16, 0.10],
        [0.03, 0.07, 0.04, 0.52, 0.13, 0.08],
        [0.03, 0.07, 0.04, 0.56, 0.12, 0.07],
        [0.03, 0.06, 0.05, 0.48, 0.14, 0.09],
        [0.04, 0.06, 0.07, 0.32, 0.17, 0.11],
    ], dtype=np.float32),
    "unirrigated": np.array([
        [0.05, 0.08, 0.09, 0.30, 0.22, 0.14],
        [0.05, 0.09, 0.07, 0.38, 0.20, 0.13],
        [0.05, 0.08, 0.10, 0.32, 0.26, 0.18],
        [0.06, 0.09, 0.15, 0.25, 0.32, 0.24],
        [0.07, 0.10, 0.19, 0.21, 0.36, 0.28],
        [0.07, 0.09, 0.18, 0.20, 0.35, 0.27],
    ], dtype=np.float32),
    "uncultivated": np.array([
        [0.06, 0.09, 0.12, 0.16, 0.32, 0.24],
        [0.06, 0.09, 0.12, 0.17, 0.32, 0.24],
        [0.06, 0.09, 0.12, 0.17, 0.33, 0.24],
        [0.06, 0.09, 0.12, 0.16, 0.33, 0.25],
        [0.06, 0.09, 0.12, 0.16, 0.32, 0.24],
        [0.06, 0.09, 0.13, 0.16, 0.32, 0.24],
    ], dtype=np.float32),
}

CLOUD_REFLECTANCE = 0.65
SCANLINE_PERIOD = 25


# how far a field's spectrum may drift toward its confusable neighbor class:
# sub-irrigated fields shade toward dryland, lush dryland toward irrigated,
# shrubby uncultivated toward dryland. Each field draws one flat mix, so
# fields stay internally consistent and learnable.
DEFAULT_SPECTRAL_MIX = {"irrigated": 0.2, "unirrigated": 0.35, "uncultivated": 0.2}

# stale fields render between the two crop classes, in spectrum territory the
# consistent training data never covers, so ensemble members genuinely
# disagree there
STALE_MIX_RANGE = (0.7, 0.85)
MIX_TARGET = {"irrigated": "unirrigated", "unirrigated": "irrigated",
              "uncultivated": "unirrigated"}


@dataclass
class SynthConfig:
    extent_px: int = 160
    pixel_size: float = 30.0
    seed: int = 0
    n_irrigated: int = 10
    n_unirrigated: int = 8
    n_uncultivated: int = 8
    # stale labels: small fields recorded as unirrigated whose spectra are
    # essentially irrigated (land converted after the label was made). These
    # are the guaranteed commission errors with elevated ensemble spread.
    n_stale_unirrigated: int = 0
    stale_px_min: int = 5
    stale_px_max: int = 8
    field_px_min: int = 8
    field_px_max: int = 16
    cloud_fraction: float = 0.1
    scanline_fraction: float = 0.2
    noise_level: float = 0.02
    counties_per_side: int = 2
    n_dates: int = 12
    trajectories: dict = field(default_factory=lambda: {
        k: v.copy() for k, v in DEFAULT_TRAJECTORIES.items()
    })
    spectral_mix: dict = field(default_factory=lambda: dict(DEFAULT_SPECTRAL_MIX))

    def __post_init__(self):
        for name in ("cloud_fraction", "scanline_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def grid(self) -> RasterGrid:
        return RasterGrid(
            width=self.extent_px,
            height=self.extent_px,
            origin_x=0.0,
            origin_y=self.extent_px * self.pixel_size,
            pixel_size=self.pixel_size,
        )


def _rect_ring(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _circle_ring(cx, cy, r, sides=24):
    ang = np.linspace(0.0, 2 * np.pi, sides, endpoint=False)
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]


def gen_world(config: SynthConfig) -> tuple[VectorLayer, VectorLayer, VectorLayer]:
    """Deterministic (labels, roads, counties) for the configured extent."""
    rng = np.random.default_rng(config.seed)
    px = config.pixel_size
    side = config.extent_px * px

    road_margin = 2.5 * px
    n_roads = max(1, config.extent_px // 64)
    road_pos = []
    roads = VectorLayer()
    for axis in ("v", "h"):
        for _ in range(n_roads):
            pos = float(rng.uniform(0.15, 0.85)) * side
            road_pos.append((axis, pos))
            if axis == "v":
                roads.features.append(Feature("polyline", [(pos, 0.0), (pos, side)],
                                              {"kind": "road"}))
            else:
                roads.features.append(Feature("polyline", [(0.0, pos), (side, pos)],
                                              {"kind": "road"}))

    def clear_of_roads(x0, y0, x1, y1):
        for axis, pos in road_pos:
            lo, hi = (x0, x1) if axis == "v" else (y0, y1)
            if lo - road_margin < pos < hi + road_margin:
                return False
        return True

    placed_boxes: list[tuple[float, float, float, float]] = []
    labels = VectorLayer()
    sep = 2.0 * px

    def place(cls_name: str, count: int, circles_allowed: bool,
              stale: bool = False):
        mix_max = float(config.spectral_mix.get(cls_name, 0.0))
        lo_px = config.stale_px_min if stale else config.field_px_min
        hi_px = config.stale_px_max if stale else config.field_px_max
        for k in range(count):
            for _ in range(400):
                size = float(rng.uniform(lo_px, hi_px)) * px
                x0 = float(rng.uniform(px, side - size - px))
                y0 = float(rng.uniform(px, side - size - px))
                box = (x0 - sep, y0 - sep, x0 + size + sep, y0 + size + sep)
                if not clear_of_roads(*box):
                    continue
                if any(not (box[2] <= b[0] or box[0] >= b[2] or box[3] <= b[1] or box[1] >= b[3])
                       for b in placed_boxes):
                    continue
                placed_boxes.append(box)
                if circles_allowed and k % 2 == 1:
                    r = size / 2.0
                    ring = _circle_ring(x0 + r, y0 + r, r)
                else:
                    ring = _rect_ring(x0, y0, x0 + size, y0 + size)
                if stale:
                    # field converted toward irrigation; label never updated
                    mix = float(rng.uniform(*STALE_MIX_RANGE))
                    props = {"class": cls_name, "mix": round(mix, 4), "stale": True}
                else:
                    props = {"class": cls_name,
                             "mix": round(mix_max * float(rng.uniform(0.0, 1.0)), 4)}
                labels.features.append(Feature("polygon", [ring], props))
                break
            else:
                raise ValueError(
                    f"extent {config.extent_px}px too small to place {count} {cls_name} fields"
                )

    place("irrigated", config.n_irrigated, circles_allowed=True)
    place("unirrigated", config.n_unirrigated, circles_allowed=False)
    place("uncultivated", config.n_uncultivated, circles_allowed=False)
    place("unirrigated", config.n_stale_unirrigated, circles_allowed=False, stale=True)

    counties = VectorLayer()
    k = config.counties_per_side
    step = side / k
    for i in range(k):
        for j in range(k):
            ring = _rect_ring(j * step, i * step, (j + 1) * step, (i + 1) * step)
            counties.features.append(Feature("polygon", [ring], {"county": f"C{i}{j}"}))
    return labels, roads, counties


def _render_maps(labels: VectorLayer, grid: RasterGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (class code, confusable-class code, mix weight).

    Each field renders with its own flat mix toward its confusable class;
    background pixels render as pure uncultivated.
    """
    cls_map = np.full((grid.height, grid.width), UNCULTIVATED, dtype=np.int32)
    other_map = np.full_like(cls_map, CLASS_CODES[MIX_TARGET["uncultivated"]])
    mix_map = np.zeros((grid.height, grid.width), dtype=np.float32)
    for feat in labels.polygons():
        mask = point_in_polygon_mask(feat, grid)
        if not mask.any():
            continue
        cls = feat.properties["class"]
        cls_map[mask] = CLASS_CODES[cls]
        other_map[mask] = CLASS_CODES[MIX_TARGET[cls]]
        mix_map[mask] = float(feat.properties.get("mix", 0.0))
    return cls_map, other_map, mix_map


def gen_scenes(
    world: tuple[VectorLayer, VectorLayer, VectorLayer],
    config: SynthConfig,
    year: int,
) -> list[SceneObservation]:
    """Render ~12 dated scenes across the 192-day season starting May 1.

    Band values come from the material's trajectory for the window the date
    falls in, plus N(0, noise_level). Cloud disks overwrite values but stay
    valid; scan-line stripes (every second scene) are nodata.
    """
    labels, _, _ = world
    grid = config.grid()
    cls_map, other_map, mix_map = _render_maps(labels, grid)
    rng = np.random.default_rng(config.seed + 1)
    start = dt.date(year, 5, 1)
    h = w = config.extent_px

    lut = np.zeros((4, 6, NUM_BANDS), dtype=np.float32)
    for name, code in CLASS_CODES.items():
        lut[code] = np.asarray(config.trajectories[name], dtype=np.float32)

    scenes = []
    spacing = (6 * WINDOW_DAYS - 1) // max(1, config.n_dates - 1) if config.n_dates > 1 else 0
    for k in range(config.n_dates):
        days = min(k * spacing, 6 * WINDOW_DAYS - 1) if config.n_dates > 1 else 0
        window = days // WINDOW_DAYS
        own = lut[cls_map, window, :]  # (h, w, bands)
        other = lut[other_map, window, :]
        base = (1.0 - mix_map[..., None]) * own + mix_map[..., None] * other
        bands = base.transpose(2, 0, 1).astype(np.float32)
        if config.noise_level > 0:
            bands += rng.normal(0.0, config.noise_level, size=bands.shape).astype(np.float32)

        if config.cloud_fraction > 0:
            cloud = np.zeros((h, w), dtype=bool)
            target = config.cloud_fraction * h * w
            yy, xx = np.mgrid[0:h, 0:w]
            while cloud.sum() < target:
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = rng.uniform(4, max(5, h // 12))
                cloud |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            puff = rng.normal(0.0, 0.02, size=(NUM_BANDS, h, w)).astype(np.float32)
            bands = np.where(cloud[None, :, :], CLOUD_REFLECTANCE + puff, bands)

        valid = np.ones((h, w), dtype=bool)
        if config.scanline_fraction > 0 and k % 2 == 1:
            stripe = int(round(SCANLINE_PERIOD * config.scanline_fraction))
            yy, xx = np.mgrid[0:h, 0:w]
            offset = int(rng.integers(SCANLINE_PERIOD))
            valid = ((yy + xx + offset) % SCANLINE_PERIOD) >= stripe

        scenes.append(
            SceneObservation(
                date=start + dt.timedelta(days=int(days)),
                bands=np.clip(bands, 0.0, 1.0).astype(np.float32),
                valid=valid,
                grid=grid,
            )
        )
    return scenes


def true_county_acres(labels: VectorLayer, counties: VectorLayer) -> dict[str, float]:
    """Closed-form irrigated acres per county from the world geometry."""
    out: dict[str, float] = {}
    for county in counties.polygons():
        name = county.properties["county"]
        cx = [p[0] for p in county.coordinates[0]]
        cy = [p[1] for p in county.coordinates[0]]
        rect = (min(cx), min(cy), max(cx), max(cy))
        acres = 0.0
        for feat in labels.polygons():
            if feat.properties.get("class") != "irrigated":
                continue
            clipped = clip_ring_to_rect(feat.coordinates[0], *rect)
            if len(clipped) >= 3:
                area, _, _ = _polygon_area_centroid(clipped)
                acres += abs(area) / SQM_PER_ACRE
        out[name] = out.get(name, 0.0) + acres
    return out
