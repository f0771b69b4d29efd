"""Grey-level co-occurrence matrices and their six texture properties."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import GridTooSmall, LevelOutOfRange
from .imageio import Image, quantize_gray, to_y_channel

__all__ = [
    "PROPERTIES",
    "Glcm",
    "GlcmConfig",
    "angle_offset",
    "compute_glcm",
    "glcm_properties",
    "feature_vector",
    "feature_names",
    "write_feature_csv",
    "read_feature_csv",
]

PROPERTIES = ("contrast", "dissimilarity", "homogeneity", "ASM", "energy", "correlation")
ANGLES = (0, 45, 90, 135)


@dataclass(frozen=True, eq=False)
class Glcm:
    """Symmetric, normalized co-occurrence matrix of shape ``(L, L)``."""

    levels: int
    matrix: np.ndarray


@dataclass(frozen=True)
class GlcmConfig:
    levels: int = 32
    distances: tuple[int, ...] = (1, 2, 3)
    angles_degrees: tuple[int, ...] = ANGLES

    def __post_init__(self):
        object.__setattr__(self, "distances", tuple(int(d) for d in self.distances))
        object.__setattr__(self, "angles_degrees", tuple(int(a) for a in self.angles_degrees))
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not self.distances or min(self.distances) < 1:
            raise ValueError("distances must be positive")
        bad = set(self.angles_degrees) - set(ANGLES)
        if bad or not self.angles_degrees:
            raise ValueError(f"angles must be drawn from {ANGLES}, got {self.angles_degrees}")

    @property
    def n_features(self) -> int:
        return len(PROPERTIES) * len(self.angles_degrees) * len(self.distances)


def angle_offset(distance: int, angle_degrees: int) -> tuple[int, int]:
    """(row, col) offset; rows grow downward so 90 degrees points up."""
    d = distance
    offsets = {0: (0, d), 45: (-d, d), 90: (-d, 0), 135: (-d, -d)}
    if angle_degrees not in offsets:
        raise ValueError(f"angle must be one of {ANGLES}, got {angle_degrees}")
    return offsets[angle_degrees]


def compute_glcm(grid: np.ndarray, distance: int, angle_degrees: int, levels: int) -> Glcm:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("grid must be two-dimensional")
    if distance < 1:
        raise ValueError("distance must be >= 1")
    if grid.size and (grid.min() < 0 or grid.max() >= levels):
        raise LevelOutOfRange(f"grid values must lie in [0, {levels - 1}]")
    dr, dc = angle_offset(distance, angle_degrees)
    h, w = grid.shape
    if h - abs(dr) < 1 or w - abs(dc) < 1:
        raise GridTooSmall(f"{h}x{w} grid has no pixel pair at offset ({dr}, {dc})")
    src = grid[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)]
    dst = grid[max(0, dr):h - max(0, -dr), max(0, dc):w - max(0, -dc)]
    counts = np.bincount(
        (src.astype(np.int64) * levels + dst).ravel(), minlength=levels * levels
    ).reshape(levels, levels)
    counts = counts + counts.T
    return Glcm(levels, counts / counts.sum())


def glcm_properties(glcm: Glcm) -> dict[str, float]:
    p = glcm.matrix
    i, j = np.indices(p.shape, dtype=np.float64)
    diff = i - j
    asm = float(np.sum(p * p))
    mu_i = np.sum(i * p)
    mu_j = np.sum(j * p)
    var_i = np.sum(p * (i - mu_i) ** 2)
    var_j = np.sum(p * (j - mu_j) ** 2)
    if var_i * var_j > 0:
        correlation = float(np.sum(p * (i - mu_i) * (j - mu_j)) / np.sqrt(var_i * var_j))
    else:
        correlation = 1.0  # flat image: 0/0, treated as perfectly self-correlated
    return {
        "contrast": float(np.sum(p * diff**2)),
        "dissimilarity": float(np.sum(p * np.abs(diff))),
        "homogeneity": float(np.sum(p / (1.0 + diff**2))),
        "ASM": asm,
        "energy": float(np.sqrt(asm)),
        "correlation": correlation,
    }


def feature_vector(image: Image, config: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Luma -> quantize -> GLCM per (distance, angle) -> six properties.

    Ordering is distance-major, then angle, then property in
    :data:`PROPERTIES` order; 72 values for the default config.
    """
    grid = quantize_gray(to_y_channel(image), config.levels)
    out = []
    for d in config.distances:
        for a in config.angles_degrees:
            props = glcm_properties(compute_glcm(grid, d, a, config.levels))
            out.extend(props[name] for name in PROPERTIES)
    return np.array(out)


def feature_names(config: GlcmConfig = GlcmConfig()) -> list[str]:
    return [f"{p}_d{d}_a{a}" for d in config.distances for a in config.angles_degrees for p in PROPERTIES]


def write_feature_csv(path, rows: Iterable[tuple[str, int, Sequence[float]]], n_features: int = 72) -> None:
    """Write ``path,label,f00,...`` with 17 significant digits per value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"] + [f"f{k:02d}" for k in range(n_features)])
        for rel, label, values in rows:
            if len(values) != n_features:
                raise ValueError(f"{rel}: expected {n_features} features, got {len(values)}")
            writer.writerow([rel, int(label)] + [format(float(v), ".17g") for v in values])


def read_feature_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    paths, labels, rows = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            paths.append(row[0])
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return paths, np.array(labels, dtype=np.int64), np.array(rows)
