"""Histogram-of-oriented-gradients descriptors (Dalal-Triggs layout).

Pipeline per plane: centered [-1, 0, 1] gradients with edge replication,
orientation folded to [0, 180) (or [0, 360) when ``signed``), per-cell
magnitude-weighted votes split linearly between the two nearest bin
centers, overlapping blocks of cells normalized with L2-Hys, blocks
concatenated in row-major scan order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionNotMultipleOfCell, InvalidConfig

NORM_EPS = 1e-12


@dataclass(frozen=True)
class HogConfig:
    cell_size: int = 8
    block_size: int = 2
    block_stride: int = 1
    n_bins: int = 9
    signed: bool = False
    clip: float = 0.2

    def __post_init__(self):
        if self.cell_size < 2:
            raise InvalidConfig("cell_size must be >= 2")
        if self.block_size < 1 or not 1 <= self.block_stride <= self.block_size:
            raise InvalidConfig("need block_size >= 1 and 1 <= block_stride <= block_size")
        if self.n_bins < 2:
            raise InvalidConfig("n_bins must be >= 2")
        if not 0 < self.clip <= 1:
            raise InvalidConfig("clip must lie in (0, 1]")


@dataclass
class FeatureMatrix:
    """Feature rows with aligned integer labels."""

    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or len(self.labels) != len(self.values):
            raise ValueError("values must be 2-D with one label per row")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[idx], self.labels[idx])


def _grid(cfg: HogConfig, width: int, height: int):
    if width % cfg.cell_size or height % cfg.cell_size:
        raise DimensionNotMultipleOfCell(
            f"{width}x{height} is not a multiple of cell_size {cfg.cell_size}"
        )
    cells_x, cells_y = width // cfg.cell_size, height // cfg.cell_size
    if cells_x < cfg.block_size or cells_y < cfg.block_size:
        raise DimensionNotMultipleOfCell(f"{width}x{height} is smaller than one block")
    blocks_x = (cells_x - cfg.block_size) // cfg.block_stride + 1
    blocks_y = (cells_y - cfg.block_size) // cfg.block_stride + 1
    return cells_x, cells_y, blocks_x, blocks_y


def hog_feature_len(cfg: HogConfig, width: int, height: int) -> int:
    _, _, bx, by = _grid(cfg, width, height)
    return bx * by * cfg.block_size ** 2 * cfg.n_bins


def cell_histograms(planes: np.ndarray, cfg: HogConfig) -> np.ndarray:
    """Orientation histograms shaped ``(n, cells_y, cells_x, n_bins)``."""
    n, h, w = planes.shape
    cells_x, cells_y, _, _ = _grid(cfg, w, h)
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    gy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    mag = np.sqrt(gx * gx + gy * gy)
    span = 360.0 if cfg.signed else 180.0
    ang = np.degrees(np.arctan2(gy, gx)) % span

    pos = ang / (span / cfg.n_bins) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % cfg.n_bins
    hi = (lo + 1) % cfg.n_bins

    rows = np.arange(h) // cfg.cell_size
    cols = np.arange(w) // cfg.cell_size
    cell = (np.arange(n)[:, None, None] * cells_y + rows[None, :, None]) * cells_x + cols[None, None, :]
    size = n * cells_y * cells_x * cfg.n_bins
    hist = np.bincount((cell * cfg.n_bins + lo).ravel(), (mag * (1.0 - frac)).ravel(), size)
    hist += np.bincount((cell * cfg.n_bins + hi).ravel(), (mag * frac).ravel(), size)
    return hist.reshape(n, cells_y, cells_x, cfg.n_bins)


def _l2(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + NORM_EPS ** 2)
    return v / norm


def extract_hog_batch(planes, cfg: HogConfig = HogConfig()) -> np.ndarray:
    """HOG rows for a stack of planes shaped ``(n, height, width)``."""
    planes = np.asarray(planes, dtype=np.float64)
    hist = cell_histograms(planes, cfg)
    b, s = cfg.block_size, cfg.block_stride
    win = sliding_window_view(hist, (b, b), axis=(1, 2))[:, ::s, ::s]
    # win: (n, blocks_y, blocks_x, n_bins, b, b) -> cells row-major, then bins
    blocks = np.moveaxis(win, 3, -1).reshape(win.shape[0], win.shape[1], win.shape[2], -1)
    blocks = _l2(blocks)
    blocks = _l2(np.minimum(blocks, cfg.clip))
    return blocks.reshape(planes.shape[0], -1)


def extract_hog(plane, cfg: HogConfig = HogConfig()) -> np.ndarray:
    return extract_hog_batch(np.asarray(plane, dtype=np.float64)[None], cfg)[0]
