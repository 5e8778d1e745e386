"""Write the secondary IDX dataset used by the feature-transfer runs.

The 8x8 handwritten digits bundled with scikit-learn are upscaled to 20x20,
centred on a 28x28 canvas (the MNIST convention), scaled to 0..255 and split
into train/test IDX files under ``data/digits``.

    python scripts/prepare_data.py [--out data/digits] [--test 500] [--seed 0]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

from mentored.data import Dataset, save_idx

CANVAS = 28
GLYPH = 20


def render(images8: np.ndarray) -> np.ndarray:
    """[N,8,8] values 0..16 -> [N,28,28] uint8."""
    big = zoom(images8.astype(np.float64), (1, GLYPH / 8, GLYPH / 8), order=1)
    big = np.clip(big / 16.0, 0.0, 1.0) * 255.0
    out = np.zeros((len(images8), CANVAS, CANVAS), dtype=np.uint8)
    off = (CANVAS - GLYPH) // 2
    out[:, off:off + GLYPH, off:off + GLYPH] = np.round(big).astype(np.uint8)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/digits"))
    ap.add_argument("--test", type=int, default=500, help="held-out images")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    digits = load_digits()
    images = render(digits.images)
    labels = digits.target.astype(np.int64)
    order = np.random.default_rng(args.seed).permutation(len(images))
    test, train = order[:args.test], order[args.test:]
    for name, idx in (("train", train), ("t10k", test)):
        ds = Dataset(images[idx][:, None].astype(np.float32), labels[idx], 10, name)
        save_idx(ds, args.out / f"{name}-images-idx3-ubyte.gz", args.out / f"{name}-labels-idx1-ubyte.gz")
        print(f"{name}: {len(idx)} images -> {args.out}")


if __name__ == "__main__":
    main()
