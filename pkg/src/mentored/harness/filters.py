"""Filter grids as binary PGM (P5) images.

Layout: ``n`` tiles are arranged in ``rows = floor(sqrt(n))`` rows and
``cols = ceil(n / rows)`` columns, separated by 1-pixel black lines, with no
outer border. A grid of ``rows x cols`` tiles of size ``h x w`` is therefore
``rows*h + rows-1`` pixels tall and ``cols*w + cols-1`` wide. Unused cells
stay black. Each tile is min-max scaled to 0..255 on its own; a constant
tile is drawn mid-gray (128).
"""
from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from .. import net as netlib
from ..errors import NotVisualizable

MID_GRAY = 128
SEPARATOR = 0


def write_pgm(path, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8 arrays")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
    return path


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    body = raw[m.end():]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile, dtype=np.float64)
    lo, hi = tile.min(), tile.max()
    if hi == lo:
        return np.full(tile.shape, MID_GRAY, dtype=np.uint8)
    return np.round((tile - lo) / (hi - lo) * 255).astype(np.uint8)


def grid_shape(n: int) -> tuple[int, int]:
    rows = max(math.isqrt(n), 1)
    return rows, math.ceil(n / rows)


def tile_grid(tiles) -> np.ndarray:
    """Lay equally sized 2-D tiles out on a grid with 1-pixel separators."""
    tiles = [np.asarray(t) for t in tiles]
    if not tiles:
        raise NotVisualizable("no filters to draw")
    h, w = tiles[0].shape
    rows, cols = grid_shape(len(tiles))
    out = np.full((rows * h + rows - 1, cols * w + cols - 1), SEPARATOR, dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        out[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = normalize_tile(tile)
    return out


def layer_tiles(layer: netlib.Layer) -> list[np.ndarray]:
    if isinstance(layer, netlib.Conv):
        w = layer.params["W"]
        return [w[f, c] for f in range(w.shape[0]) for c in range(w.shape[1])]
    if isinstance(layer, netlib.Dense):
        w = layer.params["W"]  # in x out
        geom = tuple(s for s in layer.in_shape if s != 1)
        if len(geom) == 2:
            h, wd = geom
        else:
            side = math.isqrt(w.shape[0])
            if side * side != w.shape[0]:
                raise NotVisualizable(f"dense layer with {w.shape[0]} inputs has no square geometry")
            h = wd = side
        return [w[:, u].reshape(h, wd) for u in range(w.shape[1])]
    raise NotVisualizable(f"layer kind {layer.kind!r} has no filters")


def export_filters(checkpoint, layer_index: int, path) -> Path:
    net = checkpoint if isinstance(checkpoint, netlib.Network) else netlib.load(checkpoint)
    if not -len(net) <= layer_index < len(net):
        raise NotVisualizable(f"layer {layer_index} out of range for a {len(net)}-layer network")
    return write_pgm(path, tile_grid(layer_tiles(net.layers[layer_index])))
