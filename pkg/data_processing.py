"""
QuantumLeak Lab - Data Processing Module

This module contains functions to read MNIST / Fashion-MNIST files in IDX format,
reduce each 28x28 image to an 8-feature vector (2x2 average pooling followed by
PCA) and build the seeded task splits used by the victim and the attacks.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

MNIST_DIR = os.environ.get("QLEAK_MNIST_DIR", os.path.join("data", "mnist"))
FMNIST_DIR = os.environ.get("QLEAK_FMNIST_DIR", os.path.join("data", "fmnist"))

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
N_FEATURES = 8
CACHE_FORMAT_VERSION = 1

DATASET_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
DATASETS = ("mnist", "fmnist")
PRETRAIN_CLASSES = (4, 5, 6, 7, 8, 9)


class IdxFormatError(ValueError):
    """Malformed IDX file."""


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _open(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path: str, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Read an unsigned-byte IDX file (images or labels).

    Raises:
        IdxFormatError: on a bad magic number or a truncated file; the message
            names the byte offset
    """
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: offset 0: file too short for a magic number")
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: offset 0: bad magic number {magic}, expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: offset 0: unsupported IDX type 0x{magic:08x} (only unsigned bytes)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: offset 4: header truncated, expected {ndim} dimension sizes")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims)) if dims else 0
    if len(data) - header < size:
        raise IdxFormatError(f"{path}: offset {header}: expected {size} data bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path: str, array: np.ndarray) -> str:
    """Write an unsigned-byte array as IDX (gzip when the path ends with .gz)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 + array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())
    return path


def load_idx(images_path: str, labels_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a matching images/labels pair.

    Returns:
        Tuple of (images (N, rows, cols) uint8, labels (N,) uint8)

    Raises:
        IdxFormatError: on format errors or an image/label count mismatch
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError(f"Unexpected IDX shapes {images.shape} / {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"Image count {images.shape[0]} does not match label count {labels.shape[0]}")
    return images, labels


@dataclass(frozen=True)
class SourceData:
    name: str
    train_images: np.ndarray = field(repr=False)
    train_labels: np.ndarray = field(repr=False)
    test_images: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)


def _find(directory: str, stem: str) -> str:
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"Missing {stem}[.gz] in {directory}")


def load_dataset(name: str, directory: Optional[str] = None) -> SourceData:
    """Load the four standard IDX files of MNIST or Fashion-MNIST from a directory."""
    if name not in DATASETS:
        raise ValueError(f"Unknown dataset '{name}'. Available: {', '.join(DATASETS)}")
    directory = directory or (MNIST_DIR if name == "mnist" else FMNIST_DIR)
    paths = {key: _find(directory, stem) for key, stem in DATASET_FILES.items()}
    train_images, train_labels = load_idx(paths["train_images"], paths["train_labels"])
    test_images, test_labels = load_idx(paths["test_images"], paths["test_labels"])
    return SourceData(name, train_images, train_labels, test_images, test_labels)


# ---------------------------------------------------------------------------
# Pooling and PCA
# ---------------------------------------------------------------------------

def average_pool(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling of (N, 28, 28) byte images to (N, 196) floats in [0, 1]."""
    x = np.asarray(images, dtype=float) / 255.0
    if x.ndim == 2:
        x = x[None]
    n, rows, cols = x.shape
    if rows % 2 or cols % 2:
        raise ValueError(f"Image size {rows}x{cols} is not divisible by 2")
    pooled = x.reshape(n, rows // 2, 2, cols // 2, 2).mean(axis=(2, 4))
    return pooled.reshape(n, -1)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)
    explained_variance: np.ndarray = field(repr=False)
    fit_id: str = ""

    def transform(self, pooled: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(pooled) - self.mean) @ self.components.T


def fit_pca(images: np.ndarray, fit_id: str, n_components: int = N_FEATURES) -> PcaModel:
    """
    Fit PCA on pooled images.

    Components are the top eigenvectors of the sample covariance, sorted by
    decreasing variance, each signed so its largest-magnitude coordinate is positive.

    Raises:
        ValueError: when the covariance rank is below n_components
    """
    pooled = average_pool(images)
    if pooled.shape[0] < 2:
        raise ValueError("PCA needs at least two images")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    cov = centered.T @ centered / (pooled.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    rank = int(np.sum(eigvals > max(1e-10 * eigvals[0], 1e-15)))
    if rank < n_components:
        raise ValueError(f"Degenerate covariance: rank {rank} < {n_components} components")
    components = eigvecs[:, :n_components].T.copy()
    for k in range(n_components):
        if components[k, np.argmax(np.abs(components[k]))] < 0:
            components[k] = -components[k]
    return PcaModel(mean, components, eigvals[:n_components].copy(), fit_id)


def preprocess(images: np.ndarray, pca: PcaModel) -> np.ndarray:
    """Pool, center and project images onto the PCA components: (N, 8) features."""
    return pca.transform(average_pool(images))


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    dataset: str = "mnist"
    class_pair: Tuple[int, int] = (0, 1)
    n_query: int = 3000
    n_test: int = 500
    n_pretrain: int = 3000
    n_victim: int = 3000

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"Unknown dataset '{self.dataset}'. Available: {', '.join(DATASETS)}")
        a, b = self.class_pair
        if a == b or not (0 <= a <= 9 and 0 <= b <= 9):
            raise ValueError(f"Invalid class pair {self.class_pair}")
        if not 1 <= self.n_query <= 3000:
            raise ValueError(f"n_query must be in 1..3000, got {self.n_query}")
        if self.n_test < 1 or self.n_pretrain < 1 or self.n_victim < 1:
            raise ValueError("n_test, n_pretrain and n_victim must be positive")

    @property
    def name(self) -> str:
        return f"{self.dataset}-{self.class_pair[0]}{self.class_pair[1]}"


TASK_PRESETS: Dict[str, TaskSpec] = {
    "mnist-01": TaskSpec("mnist", (0, 1)),
    "mnist-23": TaskSpec("mnist", (2, 3)),
    "fmnist-01": TaskSpec("fmnist", (0, 1)),
    "fmnist-23": TaskSpec("fmnist", (2, 3)),
}


def task_preset(name: str) -> TaskSpec:
    if name not in TASK_PRESETS:
        raise ValueError(f"Unknown task '{name}'. Available: {', '.join(TASK_PRESETS)}")
    return TASK_PRESETS[name]


@dataclass(frozen=True)
class FeatureSet:
    """Features with task labels and their provenance (partition, source index)."""
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    index: np.ndarray = field(repr=False)
    partition: str = "train"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TaskSplit:
    spec: TaskSpec
    seed: int
    pca: PcaModel
    victim: FeatureSet
    query: FeatureSet
    test: FeatureSet
    pretrain: FeatureSet


def _draw(rng: np.random.Generator, pool: np.ndarray, n: int, what: str) -> np.ndarray:
    if len(pool) < n:
        raise ValueError(f"Insufficient source data for {what}: need {n}, have {len(pool)}")
    return np.sort(rng.choice(pool, size=n, replace=False))


def _feature_set(images, labels, index, partition, pca, label_map) -> FeatureSet:
    features = preprocess(images[index], pca)
    keep = np.any(features != 0, axis=1)
    mapped = np.array([label_map[int(v)] for v in labels[index]], dtype=int)
    return FeatureSet(features[keep], mapped[keep], index[keep], partition)


def make_task(spec: TaskSpec, seed: int, source: SourceData) -> TaskSplit:
    """
    Build seeded, disjoint task splits.

    victim and query sets come from the training partition of the task classes,
    the test set from the test partition and the pretrain set from the held-out
    classes 4-9 of the training partition. PCA is fit on the victim set only.
    Labels are remapped to task indices {0, 1}; pretrain labels are the parity of
    the held-out class position.

    Raises:
        ValueError: when a partition holds too few images
    """
    if source.name != spec.dataset:
        raise ValueError(f"Task needs dataset '{spec.dataset}', got '{source.name}'")
    rng = np.random.default_rng(seed)
    a, b = spec.class_pair
    pair_train = np.flatnonzero(np.isin(source.train_labels, spec.class_pair))
    victim_idx = _draw(rng, pair_train, spec.n_victim, "victim training set")
    remaining = np.setdiff1d(pair_train, victim_idx)
    query_idx = _draw(rng, remaining, spec.n_query, "query set")
    pair_test = np.flatnonzero(np.isin(source.test_labels, spec.class_pair))
    test_idx = _draw(rng, pair_test, spec.n_test, "test set")
    holdout = [c for c in PRETRAIN_CLASSES if c not in spec.class_pair]
    pretrain_pool = np.flatnonzero(np.isin(source.train_labels, holdout))
    pretrain_idx = _draw(rng, pretrain_pool, spec.n_pretrain, "pretrain set")

    fit_id = f"{spec.name}-train-seed{seed}"
    pca = fit_pca(source.train_images[victim_idx], fit_id)
    pair_map = {a: 0, b: 1}
    holdout_map = {c: i % 2 for i, c in enumerate(holdout)}
    return TaskSplit(
        spec=spec,
        seed=seed,
        pca=pca,
        victim=_feature_set(source.train_images, source.train_labels, victim_idx, "train", pca, pair_map),
        query=_feature_set(source.train_images, source.train_labels, query_idx, "train", pca, pair_map),
        test=_feature_set(source.test_images, source.test_labels, test_idx, "test", pca, pair_map),
        pretrain=_feature_set(source.train_images, source.train_labels, pretrain_idx, "train", pca, holdout_map),
    )


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

_SET_NAMES = ("victim", "query", "test", "pretrain")


def save_task_cache(split: TaskSplit, path: str) -> str:
    """Write a task split to a compressed .npz sidecar with a format version."""
    arrays = {
        "format_version": np.array(CACHE_FORMAT_VERSION),
        "task": np.array(split.spec.name),
        "seed": np.array(split.seed),
        "pca_mean": split.pca.mean,
        "pca_components": split.pca.components,
        "pca_variance": split.pca.explained_variance,
        "pca_fit_id": np.array(split.pca.fit_id),
    }
    for name in _SET_NAMES:
        fs = getattr(split, name)
        arrays[f"{name}_features"] = fs.features
        arrays[f"{name}_labels"] = fs.labels
        arrays[f"{name}_index"] = fs.index
        arrays[f"{name}_partition"] = np.array(fs.partition)
    np.savez_compressed(path, **arrays)
    return path


def load_task_cache(path: str, spec: TaskSpec, seed: int) -> TaskSplit:
    """
    Read a cached task split.

    Raises:
        ValueError: on a version, task or seed mismatch
    """
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CACHE_FORMAT_VERSION:
            raise ValueError(f"{path}: cache format version {version}, expected {CACHE_FORMAT_VERSION}")
        if str(data["task"]) != spec.name or int(data["seed"]) != seed:
            raise ValueError(f"{path}: cache is for {data['task']} seed {int(data['seed'])}, not {spec.name} seed {seed}")
        pca = PcaModel(data["pca_mean"], data["pca_components"], data["pca_variance"], str(data["pca_fit_id"]))
        sets = {
            name: FeatureSet(data[f"{name}_features"], data[f"{name}_labels"], data[f"{name}_index"],
                             str(data[f"{name}_partition"]))
            for name in _SET_NAMES
        }
    return TaskSplit(spec=spec, seed=seed, pca=pca, **sets)


def cached_task(spec: TaskSpec, seed: int, cache_dir: str, data_dir: Optional[str] = None) -> TaskSplit:
    """Load a task split from the cache directory, building and caching it on a miss."""
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{spec.name}-q{spec.n_query}-t{spec.n_test}-p{spec.n_pretrain}-v{spec.n_victim}-seed{seed}.npz")
    if os.path.exists(path):
        try:
            return load_task_cache(path, spec, seed)
        except (ValueError, KeyError) as e:
            print(f"⚠️ Ignoring stale feature cache {path}: {e}")
    print(f"🔄 Building {spec.name} features (seed {seed})...")
    split = make_task(spec, seed, load_dataset(spec.dataset, data_dir))
    save_task_cache(split, path)
    print(f"✅ Cached features to {path}")
    return split
