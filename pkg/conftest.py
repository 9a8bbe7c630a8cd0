import os

import numpy as np
import pytest

from data_processing import DATASET_FILES, write_idx


def synthetic_images(labels: np.ndarray, seed: int) -> np.ndarray:
    """Noisy 28x28 byte images with a bright block whose position depends on the class."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 60, size=(len(labels), 28, 28))
    for i, c in enumerate(labels):
        row, col = 2 + 2 * (c % 5), 4 + 10 * (c // 5)
        images[i, row:row + 8, col:col + 8] += 180
    return np.clip(images, 0, 255).astype(np.uint8)


def write_synthetic_dataset(directory: str, per_class_train: int = 40, per_class_test: int = 10) -> str:
    os.makedirs(directory, exist_ok=True)
    train_labels = np.repeat(np.arange(10), per_class_train).astype(np.uint8)
    test_labels = np.repeat(np.arange(10), per_class_test).astype(np.uint8)
    write_idx(os.path.join(directory, DATASET_FILES["train_images"]), synthetic_images(train_labels, 1))
    write_idx(os.path.join(directory, DATASET_FILES["train_labels"]), train_labels)
    write_idx(os.path.join(directory, DATASET_FILES["test_images"]), synthetic_images(test_labels, 2))
    write_idx(os.path.join(directory, DATASET_FILES["test_labels"]), test_labels)
    return directory


@pytest.fixture
def synthetic_mnist(tmp_path):
    """Directory holding a small MNIST-shaped dataset in IDX format."""
    return write_synthetic_dataset(str(tmp_path / "mnist"))
