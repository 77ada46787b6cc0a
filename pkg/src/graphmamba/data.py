"""Hyperspectral cubes: HSIC file I/O, patch extraction, splits, synthetic scenes."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from graphmamba.errors import (
    ArgumentError,
    CubeFormatError,
    DimensionError,
    SizeMismatchError,
    SplitError,
    TruncatedFileError,
)

MAGIC = b"HSIC"
VERSION = 1
DTYPE_FLOAT32 = 1
# magic, version, H, W, B, C, dtype code, has-labels flag
_HEADER = struct.Struct("<4s7I")
assert _HEADER.size == 32


@dataclass
class HsiCube:
    """An H x W x B reflectance cube with optional H x W labels (0 = unlabeled)."""

    values: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise DimensionError(f"cube values must be H x W x B, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("cube values must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != self.values.shape[:2]:
                raise DimensionError(
                    f"labels {self.labels.shape} do not match cube extents {self.values.shape[:2]}"
                )
            if self.labels.size and self.labels.min() < 0:
                raise ArgumentError("labels must be non-negative")
            top = int(self.labels.max()) if self.labels.size else 0
            if self.n_classes == 0:
                self.n_classes = top
            elif top > self.n_classes:
                raise ArgumentError(f"label {top} exceeds declared class count {self.n_classes}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


def save_cube(cube: HsiCube, path: str | os.PathLike) -> None:
    has_labels = cube.labels is not None
    header = _HEADER.pack(
        MAGIC, VERSION, cube.height, cube.width, cube.bands, cube.n_classes, DTYPE_FLOAT32, int(has_labels)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(cube.labels, dtype="<i4").tobytes())


def load_cube(path: str | os.PathLike) -> HsiCube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CubeFormatError(f"{path}: not an HSIC file (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file ends inside the {_HEADER.size}-byte header")
    _, version, h, w, b, c, dtype, has_labels = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CubeFormatError(f"{path}: unsupported HSIC version {version}")
    if dtype != DTYPE_FLOAT32:
        raise CubeFormatError(f"{path}: unsupported dtype code {dtype}")
    if has_labels not in (0, 1):
        raise CubeFormatError(f"{path}: invalid label flag {has_labels}")
    payload = memoryview(raw)[_HEADER.size :]
    if len(payload) % 4:
        raise TruncatedFileError(f"{path}: payload ends in the middle of an element")
    n_values = h * w * b
    expected = n_values + (h * w if has_labels else 0)
    if len(payload) // 4 != expected:
        raise SizeMismatchError(
            f"{path}: header declares {h}x{w}x{b}{' + labels' if has_labels else ''} "
            f"({expected} elements) but payload holds {len(payload) // 4}"
        )
    values = np.frombuffer(payload, dtype="<f4", count=n_values).reshape(h, w, b).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(payload, dtype="<i4", offset=4 * n_values).reshape(h, w).astype(np.int32)
    return HsiCube(values, labels, n_classes=c)


def normalize_bands(values: np.ndarray) -> np.ndarray:
    """Per-band min-max scaling to [0, 1]; constant bands map to 0."""
    lo = values.min(axis=(0, 1), keepdims=True)
    span = values.max(axis=(0, 1), keepdims=True) - lo
    span = np.where(span > 0, span, 1)
    return ((values - lo) / span).astype(values.dtype)


@dataclass(frozen=True)
class PatchSet:
    patches: np.ndarray  # m x S x S x B
    centers: np.ndarray  # m x 2 (row, col)
    labels: np.ndarray  # m, 0 for unlabeled centers
    stride: int
    patch_size: int

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def labeled(self) -> np.ndarray:
        """Boolean mask of patches usable for supervision."""
        return self.labels > 0

    @property
    def overlap_ratio(self) -> float:
        return overlap_ratio(self.stride, self.patch_size)


def overlap_ratio(stride: int, patch_size: int) -> float:
    return 1.0 - stride / patch_size


def patch_count(height: int, width: int, patch_size: int, stride: int = 1) -> int:
    return ((height - patch_size) // stride + 1) * ((width - patch_size) // stride + 1)


def extract_patches(cube: HsiCube, patch_size: int = 7, stride: int = 1) -> PatchSet:
    """Cut every fully interior S x S x B patch, centers enumerated row-major."""
    S, s = int(patch_size), int(stride)
    if S < 1 or S % 2 == 0:
        raise ArgumentError(f"patch size must be a positive odd integer, got {S}")
    if s < 1 or s > S:
        raise ArgumentError(f"stride must satisfy 1 <= stride <= patch size, got {s} (patch size {S})")
    if S > min(cube.height, cube.width):
        raise DimensionError(f"patch size {S} exceeds cube extents {cube.height}x{cube.width}")
    half = S // 2
    rows = np.arange(half, cube.height - half, s)
    cols = np.arange(half, cube.width - half, s)
    windows = np.lib.stride_tricks.sliding_window_view(cube.values, (S, S), axis=(0, 1))
    # windows[i, j] is the block whose top-left is (i, j): B x S x S
    tl_r, tl_c = np.meshgrid(rows - half, cols - half, indexing="ij")
    patches = np.ascontiguousarray(windows[tl_r.ravel(), tl_c.ravel()].transpose(0, 2, 3, 1))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if cube.labels is not None:
        labels = cube.labels[centers[:, 0], centers[:, 1]].astype(np.int32)
    else:
        labels = np.zeros(len(centers), dtype=np.int32)
    return PatchSet(patches, centers, labels, s, S)


@dataclass(frozen=True)
class SplitSpec:
    fraction: float
    seed: int
    train_by_class: dict[int, np.ndarray]
    test_by_class: dict[int, np.ndarray]

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate([v for v in self.train_by_class.values()] or [np.empty(0, int)]))

    @property
    def test(self) -> np.ndarray:
        return np.sort(np.concatenate([v for v in self.test_by_class.values()] or [np.empty(0, int)]))


def stratified_split(labels: np.ndarray | PatchSet, fraction: float, seed: int = 0) -> SplitSpec:
    """Per-class random split taking ceil(fraction * n_c) (at least 1) for training.

    Accepts a PatchSet or a raw label vector; label 0 is treated as unlabeled.
    Returned indices refer to positions in that vector.
    """
    if isinstance(labels, PatchSet):
        labels = labels.labels
    labels = np.asarray(labels)
    if not 0.0 < fraction <= 1.0:
        raise ArgumentError(f"train fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for c in np.unique(labels[labels > 0]):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise SplitError(f"class {int(c)} has {len(idx)} labeled sample(s); need at least 2")
        # guard against 0.1 * 100 landing a hair above 10
        n_train = max(1, math.ceil(fraction * len(idx) - 1e-9))
        perm = rng.permutation(idx)
        train[int(c)] = np.sort(perm[:n_train])
        test[int(c)] = np.sort(perm[n_train:])
    return SplitSpec(float(fraction), int(seed), train, test)


def _region_labels(height: int, width: int, n_classes: int) -> np.ndarray:
    """Tile the scene into a near-square grid of contiguous blocks, one per class."""
    n_cols = math.ceil(math.sqrt(n_classes))
    n_rows = math.ceil(n_classes / n_cols)
    labels = np.zeros((height, width), dtype=np.int32)
    row_edges = np.linspace(0, height, n_rows + 1).round().astype(int)
    c = 0
    for r in range(n_rows):
        in_row = min(n_cols, n_classes - r * n_cols)
        col_edges = np.linspace(0, width, in_row + 1).round().astype(int)
        for k in range(in_row):
            c += 1
            labels[row_edges[r] : row_edges[r + 1], col_edges[k] : col_edges[k + 1]] = c
    return labels


def class_signatures(n_bands: int, n_classes: int) -> np.ndarray:
    """C x B smooth spectra: a Gaussian bump per class at evenly spaced band offsets."""
    bands = np.arange(n_bands, dtype=np.float64)
    centers = (np.arange(n_classes) + 0.5) * n_bands / n_classes
    width = max(n_bands / (2.0 * n_classes), 0.5)
    return 0.2 + np.exp(-0.5 * ((bands[None, :] - centers[:, None]) / width) ** 2)


def generate_synthetic(
    height: int, width: int, bands: int, n_classes: int, noise: float = 0.0, seed: int = 0
) -> HsiCube:
    if n_classes < 2:
        raise ArgumentError(f"need at least 2 classes, got {n_classes}")
    if bands < n_classes:
        raise ArgumentError(f"need bands >= classes, got {bands} bands for {n_classes} classes")
    if noise < 0:
        raise ArgumentError(f"noise scale must be non-negative, got {noise}")
    if height < 1 or width < 1 or height * width < n_classes:
        raise ArgumentError(f"scene {height}x{width} too small for {n_classes} classes")
    labels = _region_labels(height, width, n_classes)
    values = class_signatures(bands, n_classes)[labels - 1]
    if noise > 0:
        values = values + np.random.default_rng(seed).normal(0.0, noise, size=values.shape)
    return HsiCube(values.astype(np.float32), labels, n_classes=n_classes)
