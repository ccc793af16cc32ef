"""Turn a large single-tissue image into an r x c grid of fixed-size cells.

Pixels are float64 RGB in [0, 1]. Background is "white enough": mean
channel value at or above the white threshold. Partial edge cells are
zero-padded up to cell_size rather than dropped, so lesions at tissue
borders are never discarded; the padded area counts as background when
the tissue mask is computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from gridattn.errors import ConfigError, EmptyTissueError

DEFAULT_WHITE_THRESHOLD = 0.92
DEFAULT_TISSUE_FRACTION = 0.05


@dataclass
class SlideImage:
    """A single-tissue image with its class label and source-slide group."""

    pixels: np.ndarray  # h x w x 3 in [0, 1]
    label: int
    group_id: str


@dataclass
class CellGrid:
    cells: np.ndarray  # r x c x cell_size x cell_size x 3
    tissue_mask: np.ndarray  # r x c bool
    cell_size: int
    overlap: int
    source_shape: tuple  # (h, w) of the tiled image


def grid_shape(h: int, w: int, cell_size: int, overlap: int = 0) -> tuple:
    """Grid dimensions covering an h x w image.

    With no overlap this is ceil(h/cell_size) x ceil(w/cell_size); with
    overlapping cells the stride shrinks to cell_size - overlap.
    """
    if cell_size < 8:
        raise ConfigError(f"cell_size must be >= 8, got {cell_size}")
    if not 0 <= overlap < cell_size:
        raise ConfigError(f"overlap must be in [0, cell_size), got {overlap}")
    stride = cell_size - overlap
    r = max(1, math.ceil(max(h - overlap, 0) / stride))
    c = max(1, math.ceil(max(w - overlap, 0) / stride))
    return r, c


def remove_background(pixels: np.ndarray, white_threshold: float = DEFAULT_WHITE_THRESHOLD) -> np.ndarray:
    """Tight bounding crop around non-background pixels.

    A pixel is background when its mean channel value is >= the white
    threshold. Does not split multi-blob tissue: the crop spans all
    non-background pixels.
    """
    if pixels.size == 0:
        raise EmptyTissueError("empty image")
    mask = pixels.mean(axis=2) < white_threshold
    if not mask.any():
        raise EmptyTissueError("no non-background pixels found")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return pixels[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def tile(
    image: SlideImage,
    cell_size: int,
    overlap: int = 0,
    white_threshold: float = DEFAULT_WHITE_THRESHOLD,
    tissue_fraction: float = DEFAULT_TISSUE_FRACTION,
) -> CellGrid:
    """Cut the image into cell_size cells at stride cell_size - overlap.

    Images smaller than one cell are padded up, never rejected. The
    tissue mask marks cells whose non-background share of the full cell
    area is at least ``tissue_fraction``.
    """
    px = image.pixels
    h, w = px.shape[:2]
    r, c = grid_shape(h, w, cell_size, overlap)
    stride = cell_size - overlap

    need_h = (r - 1) * stride + cell_size
    need_w = (c - 1) * stride + cell_size
    padded = np.zeros((need_h, need_w, 3), dtype=np.float64)
    padded[:h, :w] = px
    # zero padding is dark, not white; count it as background explicitly
    tissue = np.zeros((need_h, need_w), dtype=bool)
    tissue[:h, :w] = px.mean(axis=2) < white_threshold

    cells = np.empty((r, c, cell_size, cell_size, 3), dtype=np.float64)
    mask = np.empty((r, c), dtype=bool)
    area = float(cell_size * cell_size)
    for i in range(r):
        y = i * stride
        for j in range(c):
            x = j * stride
            cells[i, j] = padded[y : y + cell_size, x : x + cell_size]
            frac = tissue[y : y + cell_size, x : x + cell_size].sum() / area
            mask[i, j] = frac >= tissue_fraction
    return CellGrid(cells=cells, tissue_mask=mask, cell_size=cell_size, overlap=overlap, source_shape=(h, w))


def normalize_cells(grid: CellGrid, mean, std) -> CellGrid:
    """Per-channel (x - mean)/std over every cell."""
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    std = np.asarray(std, dtype=np.float64).reshape(3)
    if np.any(std <= 0):
        raise ConfigError(f"std components must be positive, got {std}")
    cells = (grid.cells - mean) / std
    return CellGrid(
        cells=cells,
        tissue_mask=grid.tissue_mask.copy(),
        cell_size=grid.cell_size,
        overlap=grid.overlap,
        source_shape=grid.source_shape,
    )


def tissue_stats(pixel_arrays, white_threshold: float = DEFAULT_WHITE_THRESHOLD):
    """Per-channel mean and std over the tissue pixels of many images.

    Single pass over sums/sums-of-squares; used once on the training set.
    """
    n = 0
    s = np.zeros(3)
    ss = np.zeros(3)
    for px in pixel_arrays:
        sel = px[px.mean(axis=2) < white_threshold]
        if sel.size == 0:
            continue
        n += sel.shape[0]
        s += sel.sum(axis=0)
        ss += (sel * sel).sum(axis=0)
    if n == 0:
        raise EmptyTissueError("no tissue pixels in the corpus")
    mean = s / n
    var = np.maximum(ss / n - mean * mean, 1e-12)
    return mean, np.sqrt(var)


def resize_nn(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; only needed by configs that mimic large-cell
    extraction at a smaller input size."""
    h, w = pixels.shape[:2]
    ys = np.minimum((np.arange(out_h) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum((np.arange(out_w) * (w / out_w)).astype(np.int64), w - 1)
    return pixels[ys[:, None], xs[None, :]]


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM (P6) file as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(pixels: np.ndarray, path):
    """Write float RGB in [0, 1] as an 8-bit PNG/PPM (by extension)."""
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
