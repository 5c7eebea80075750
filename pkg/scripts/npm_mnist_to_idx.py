"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package (``npm pack mnist``) carries 10,000 MNIST digits stored as
per-class JSON arrays of pixel intensities already divided by 255 and rounded
to three decimals. This script re-quantizes them to bytes, interleaves the
classes with a fixed permutation, and writes a gzip-compressed IDX pair.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/npm_mnist_to_idx.py package/src/digits data/mnist10k
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from hnca.bandit import Dataset, save_idx

SIDE = 28


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    images, labels = [], []
    for digit in range(10):
        raw = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        arr = np.asarray(raw, dtype=np.float64)
        n = arr.size // (SIDE * SIDE)
        images.append(arr[: n * SIDE * SIDE].reshape(n, SIDE * SIDE))
        labels.append(np.full(n, digit, dtype=np.int64))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(y))
    pixels = np.clip(np.rint(x[order] * 255.0), 0, 255) / 255.0
    ds = Dataset(pixels, y[order], 10, "mnist10k")

    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_idx(
        ds,
        args.out_dir / "train-images-idx3-ubyte.gz",
        args.out_dir / "train-labels-idx1-ubyte.gz",
        image_shape=(SIDE, SIDE),
    )
    print(f"wrote {len(y)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
