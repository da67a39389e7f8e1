"""Overlap-tile inference and ensemble reduction.

`overlap_tile_predict` mosaics per-tile interiors: tiles of size `tile_size`
advance by tile_size - 2 * overlap, and only the interior (the tile minus
its overlap margin) lands in the output, so convolution edge effects never
reach the mosaic. Tile origins stay aligned with the pooling grid, which
makes the stitched result bit-equal to whole-image inference everywhere the
receptive field fits inside the extent. Tiles protruding past the extent
are zero-padded, matching the network's zero-padded convolutions.

Ensemble reduction happens in quantized uint8 space (probabilities scaled
0..255 first), keeping median and IQR integer-exact: the even-count median
floors the midpoint average, and quartiles are nearest-rank order
statistics, so for 10 models IQR = v(8) - v(3) in 1-based sorted order.
"""

from __future__ import annotations

import numpy as np

from .compositing import CompositeStack
from .errors import ShapeError
from .geodata import IRRIGATED, LabelRaster, RasterGrid
from .tensor import Tensor
from .unet import UNet, min_overlap


def overlap_tile_predict(
    model: UNet, stack: CompositeStack | np.ndarray, tile_size: int, overlap: int
) -> np.ndarray:
    """Seamless full-extent class probabilities, shape (classes, h, w) float32.

    `stack` may be a CompositeStack or any (channels, h, w) feature array.
    """
    depth = model.config.depth
    grain = 2 ** depth
    if tile_size % grain:
        raise ShapeError(f"tile_size {tile_size} must be divisible by 2^depth = {grain}")
    needed = min_overlap(depth)
    if overlap < needed:
        raise ValueError(
            f"overlap {overlap} is below the receptive-field margin; "
            f"depth {depth} needs at least {needed}"
        )
    if overlap % (grain // 2 or 1):
        raise ValueError(
            f"overlap must be a multiple of 2^(depth-1) = {grain // 2} to keep pooling aligned"
        )
    if tile_size <= 2 * overlap:
        raise ValueError(f"tile_size {tile_size} leaves no interior at overlap {overlap}")

    data = stack.data if isinstance(stack, CompositeStack) else np.asarray(stack, dtype=np.float32)
    if data.ndim != 3:
        raise ShapeError(f"feature raster must be (channels, h, w), got {data.shape}")
    c, h, w = data.shape
    classes = model.config.num_classes

    if h <= tile_size and w <= tile_size and h % grain == 0 and w % grain == 0:
        probs = model.forward(Tensor(data[None, ...]), "infer")
        return probs.data[0]

    step = tile_size - 2 * overlap
    out = np.zeros((classes, h, w), dtype=np.float32)

    def starts(extent):
        pos, res = 0, []
        while True:
            res.append(pos)
            if pos + tile_size - overlap >= extent:
                break
            pos += step
        return res

    for y0 in starts(h):
        for x0 in starts(w):
            tile = np.zeros((c, tile_size, tile_size), dtype=np.float32)
            ys, xs = min(tile_size, h - y0), min(tile_size, w - x0)
            tile[:, :ys, :xs] = data[:, y0:y0 + ys, x0:x0 + xs]
            probs = model.forward(Tensor(tile[None, ...]), "infer").data[0]
            # interior bounds, stretched to the extent border on edge tiles
            iy0 = 0 if y0 == 0 else overlap
            ix0 = 0 if x0 == 0 else overlap
            iy1 = min(tile_size, h - y0) if y0 + tile_size - overlap >= h else tile_size - overlap
            ix1 = min(tile_size, w - x0) if x0 + tile_size - overlap >= w else tile_size - overlap
            out[:, y0 + iy0:y0 + iy1, x0 + ix0:x0 + ix1] = probs[:, iy0:iy1, ix0:ix1]
    return out


def quantize(p: np.ndarray) -> np.ndarray:
    """Probability [0, 1] to uint8 0..255, round-half-up."""
    arr = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (np.asarray(q, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def _stack_models(models_probs: list[np.ndarray]) -> np.ndarray:
    if not models_probs:
        raise ValueError("no model rasters given")
    shape = models_probs[0].shape
    for m in models_probs[1:]:
        if m.shape != shape:
            raise ShapeError(f"model raster shapes differ: {m.shape} vs {shape}")
    return np.stack([np.asarray(m, dtype=np.uint8) for m in models_probs])


def ensemble_median(models_probs: list[np.ndarray]) -> np.ndarray:
    """Per-pixel, per-class median of quantized probabilities.

    Odd counts take the middle order statistic; even counts floor the mean
    of the two middle values, staying in uint8.
    """
    stacked = _stack_models(models_probs)
    k = stacked.shape[0]
    s = np.sort(stacked, axis=0)
    if k % 2:
        return s[k // 2]
    lo = s[k // 2 - 1].astype(np.uint16)
    hi = s[k // 2].astype(np.uint16)
    return ((lo + hi) // 2).astype(np.uint8)


def ensemble_iqr(models_probs: list[np.ndarray]) -> np.ndarray:
    """Nearest-rank interquartile range: v(ceil(0.75k)) - v(ceil(0.25k)).

    Defined for any k >= 2 (for 10 models that is v(8) - v(3); for small
    ensembles the quartiles collapse toward the extremes).
    """
    stacked = _stack_models(models_probs)
    k = stacked.shape[0]
    if k < 2:
        raise ValueError(f"IQR needs at least 2 models, got {k}")
    s = np.sort(stacked, axis=0)
    q1 = int(np.ceil(0.25 * k)) - 1
    q3 = int(np.ceil(0.75 * k)) - 1
    return (s[q3].astype(np.int16) - s[q1].astype(np.int16)).astype(np.uint8)


def classify(median: np.ndarray) -> np.ndarray:
    """Argmax class codes (1-based); ties resolve to the lowest class index."""
    med = np.asarray(median)
    if med.ndim != 3:
        raise ShapeError(f"median raster must be (classes, h, w), got {med.shape}")
    return (med.argmax(axis=0) + 1).astype(np.uint8)


def binarize(classes: np.ndarray) -> np.ndarray:
    """Irrigated -> 1; everything else (incl. unlabeled) -> 0."""
    return (np.asarray(classes) == IRRIGATED).astype(np.uint8)


class EnsembleRaster:
    """Reduced ensemble product: per-class median and IQR plus final classes."""

    def __init__(self, median: np.ndarray, iqr: np.ndarray, grid: RasterGrid):
        self.median = np.asarray(median, dtype=np.uint8)
        self.iqr = np.asarray(iqr, dtype=np.uint8)
        if self.median.shape != self.iqr.shape:
            raise ShapeError("median and IQR shapes differ")
        self.grid = grid
        self.final_class = classify(self.median)

    def final_labels(self) -> LabelRaster:
        return LabelRaster(self.final_class, self.grid)


def reduce_ensemble(models_probs: list[np.ndarray], grid: RasterGrid) -> EnsembleRaster:
    return EnsembleRaster(ensemble_median(models_probs), ensemble_iqr(models_probs), grid)
