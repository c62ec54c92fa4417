from __future__ import annotations

import importlib.util
import os
from pathlib import Path

import numpy as np
import pytest

from sparsefl.data import load_idx, synth_dataset

ROOT = Path(__file__).resolve().parents[1]


def _mnist_subset_module():
    loader_spec = importlib.util.spec_from_file_location("mnist_subset", ROOT / "scripts" / "mnist_subset.py")
    mod = importlib.util.module_from_spec(loader_spec)
    loader_spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory) -> Path:
    """Full MNIST when ``SPARSEFL_MNIST_DIR`` is set, else the bundled 5k sample."""
    env = os.environ.get("SPARSEFL_MNIST_DIR")
    if env:
        return Path(env)
    return _mnist_subset_module().export(tmp_path_factory.mktemp("mnist5k"))


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    def pick(name):
        p = mnist_dir / name
        return p if p.exists() else p.with_name(name + ".gz")

    train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))
    test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"))
    return train, test


@pytest.fixture(scope="session")
def blobs():
    train = synth_dataset(10, 100, 20, seed=11)
    test = synth_dataset(10, 50, 20, seed=11, sample_seed=1)
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
