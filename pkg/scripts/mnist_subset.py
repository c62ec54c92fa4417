#!/usr/bin/env python3
"""Write the 5000-image MNIST sample bundled with ``mlxtend`` as IDX files.

The sample holds 500 images per digit. It is split per class into 400 train
and 100 test images, giving a 4000/1000 stand-in for the full MNIST files
when those are not available offline::

    python scripts/mnist_subset.py data/mnist-5k
    sparsefl run --preset fig1-s01 --data-dir data/mnist-5k --out runs/s01
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from sparsefl.data import Dataset, write_idx

TRAIN_PER_CLASS = 400
FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def export(out_dir: Path, seed: int = 0) -> Path:
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X / 255.0
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in range(10):
        idx = rng.permutation(np.flatnonzero(y == label))
        train_idx.append(idx[:TRAIN_PER_CLASS])
        test_idx.append(idx[TRAIN_PER_CLASS:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f for f in FILES]
    write_idx(Dataset(X[train_idx], y[train_idx], 10), paths[0], paths[1], (28, 28))
    write_idx(Dataset(X[test_idx], y[test_idx], 10), paths[2], paths[3], (28, 28))
    return out_dir


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    print(export(args.out_dir, args.seed))


if __name__ == "__main__":
    main()
