import os
import struct
from pathlib import Path

import numpy as np
import pytest

CIFAR_DIR = Path(os.environ.get("WAS_DATA_ROOT", "/root/data")) / "cifar-10-batches-bin"


def write_cifar10(root: Path, n_train: int = 20, n_test: int = 10, seed: int = 0) -> Path:
    """Write data_batch_1..5 and test_batch in the CIFAR-10 binary layout."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    sizes = [n_train // 5 + (1 if i < n_train % 5 else 0) for i in range(5)]
    for name, n in [(f"data_batch_{i + 1}.bin", s) for i, s in enumerate(sizes)] + [("test_batch.bin", n_test)]:
        labels = (np.arange(n) % 10).astype(np.uint8)
        pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        (root / name).write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return root


def write_mnist(root: Path, n_train: int = 200, n_test: int = 50, seed: int = 0,
                structured: bool = True) -> Path:
    """Write IDX files; with ``structured`` each class is a distinct blob so it is learnable."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    protos = rng.integers(0, 256, size=(10, 28, 28)).astype(np.float64)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        y = (np.arange(n) % 10).astype(np.uint8)
        if structured:
            x = np.clip(protos[y] * 0.7 + rng.normal(0, 40, size=(n, 28, 28)), 0, 255).astype(np.uint8)
        else:
            x = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        (root / f"{prefix}-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 2051, n, 28, 28) + x.tobytes())
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(struct.pack(">II", 2049, n) + y.tobytes())
    return root


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist(tmp_path / "mnist")


@pytest.fixture
def cifar_dir(tmp_path):
    return write_cifar10(tmp_path / "cifar")


def rel_err(a, n, floor):
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
