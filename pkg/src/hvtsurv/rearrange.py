"""Spatial rearrangement of patch bags into coherent attention windows.

A bag is padded to a multiple of the window size, its pixel coordinates
are scaled to grid units, and windows are then formed greedily: take the
first remaining patch, pull in the w nearest remaining patches (itself
included) under Euclidean distance on the grid, emit them as a window,
and repeat. Compared with raster-scan windowing this keeps each window
compact in both axes on irregularly shaped slides.

Window-level random masking splits a rearranged bag into m sub-bags of
whole windows for training-time augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bagio import PatchBag
from .errors import ConfigurationError

PATCH_PIXELS = 256


@dataclass
class RearrangedBag:
    """Window-ordered features with grid coordinates aligned row-wise.

    Row i of ``features`` sits at ``scaled_coords[i]`` and mirrors patch
    ``source_rows[i]`` of the original bag (padding rows repeat a source
    patch). Consecutive blocks of ``window_size`` rows form one window.
    """

    wsi_id: str
    features: np.ndarray
    scaled_coords: np.ndarray
    source_rows: np.ndarray
    window_size: int

    @property
    def n_windows(self) -> int:
        return self.features.shape[0] // self.window_size

    def window(self, k: int) -> slice:
        w = self.window_size
        return slice(k * w, (k + 1) * w)


@dataclass
class SubWsiBag:
    """Whole-window subset of a rearranged bag."""

    source_wsi: str
    features: np.ndarray
    scaled_coords: np.ndarray
    source_rows: np.ndarray
    window_ids: np.ndarray
    window_size: int

    @property
    def n_windows(self) -> int:
        return self.features.shape[0] // self.window_size


def scale_coords(coords) -> np.ndarray:
    """Pixel coordinates to 1-based grid units: divide by the patch size,
    then shift so the per-bag minimum lands at (1, 1)."""
    g = np.asarray(coords, dtype=np.int64) // PATCH_PIXELS
    return g - g.min(axis=0) + 1


def _pad_amounts(b: int, w: int) -> tuple[int, int]:
    pad = -b % w
    left = pad // 2
    return left, pad - left


def reflect_pad(bag: PatchBag, w: int):
    """Pad features and coordinates to the next multiple of w.

    Reflection mirrors the sequence without repeating the edge element;
    when the pad is at least as long as the bag (or the bag has a single
    patch) edge replication is used instead, since pure reflection is
    undefined there. Returns (features, pixel coords, source row index).
    """
    b = bag.n_patches
    left, right = _pad_amounts(b, w)
    mode = "edge" if (b == 1 or left + right >= b) else "reflect"
    if left + right == 0:
        idx = np.arange(b)
    else:
        idx = np.pad(np.arange(b), (left, right), mode=mode)
    return bag.features[idx], bag.coords[idx], idx.astype(np.int64)


def knn_rearrange(bag: PatchBag, w: int) -> RearrangedBag:
    """Greedy nearest-neighbor window formation.

    Each round anchors on the first remaining row and selects the w rows
    nearest to it on the scaled grid (squared Euclidean distance, ties
    broken by (gy, gx, sequence index)), removing them from the pool.
    Padding duplicates participate like any other row.
    """
    if w < 1:
        raise ConfigurationError(f"window size must be >= 1, got {w}")
    feats, coords, src = reflect_pad(bag, w)
    grid = scale_coords(coords)
    length = feats.shape[0]

    remaining = np.arange(length)
    order = np.empty(length, dtype=np.int64)
    out = 0
    while remaining.size:
        anchor = remaining[0]
        delta = grid[remaining] - grid[anchor]
        dist2 = delta[:, 0] ** 2 + delta[:, 1] ** 2
        ranked = np.lexsort((remaining, grid[remaining, 0], grid[remaining, 1], dist2))
        take = ranked[:w]
        order[out : out + w] = remaining[take]
        out += w
        remaining = np.delete(remaining, take)

    return RearrangedBag(
        wsi_id=bag.wsi_id,
        features=feats[order],
        scaled_coords=grid[order],
        source_rows=src[order],
        window_size=w,
    )


def raster_order(bag: PatchBag, w: int) -> RearrangedBag:
    """Raster-scan baseline: sort by (gy, gx), pad, window consecutively."""
    if w < 1:
        raise ConfigurationError(f"window size must be >= 1, got {w}")
    grid = scale_coords(bag.coords)
    order = np.lexsort((np.arange(bag.n_patches), grid[:, 0], grid[:, 1]))
    sorted_bag = PatchBag(
        wsi_id=bag.wsi_id, coords=bag.coords[order], features=bag.features[order]
    )
    feats, coords, src = reflect_pad(sorted_bag, w)
    return RearrangedBag(
        wsi_id=bag.wsi_id,
        features=feats,
        scaled_coords=scale_coords(coords),
        source_rows=order[src].astype(np.int64),
        window_size=w,
    )


def random_window_mask(bag: RearrangedBag, m: int, seed: int) -> list[SubWsiBag]:
    """Partition the windows into m sub-bags by a seeded uniform shuffle.

    Group sizes differ by at most one, with remainder windows going to
    the lowest-index groups; windows are never split and keep their
    parent order inside each sub-bag.
    """
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    n = bag.n_windows
    if m > n:
        raise ConfigurationError(f"cannot split {n} windows into {m} sub-bags")
    perm = np.random.default_rng(seed).permutation(n)
    base, rem = divmod(n, m)
    sizes = [base + (1 if g < rem else 0) for g in range(m)]

    subs = []
    offset = 0
    for size in sizes:
        window_ids = np.sort(perm[offset : offset + size])
        offset += size
        rows = np.concatenate([np.arange(k * bag.window_size, (k + 1) * bag.window_size)
                               for k in window_ids])
        subs.append(
            SubWsiBag(
                source_wsi=bag.wsi_id,
                features=bag.features[rows],
                scaled_coords=bag.scaled_coords[rows],
                source_rows=bag.source_rows[rows],
                window_ids=window_ids,
                window_size=bag.window_size,
            )
        )
    return subs


def window_mean_manhattan(bag: RearrangedBag) -> float:
    """Mean over windows of the summed pairwise Manhattan distances
    (unordered pairs) between scaled coordinates inside each window."""
    w = bag.window_size
    total = 0.0
    for k in range(bag.n_windows):
        block = bag.scaled_coords[bag.window(k)]
        dx = np.abs(block[:, 0][:, None] - block[:, 0][None, :])
        dy = np.abs(block[:, 1][:, None] - block[:, 1][None, :])
        total += (dx + dy).sum() / 2.0
    return total / bag.n_windows


def compare_strategies(bag: PatchBag, w: int) -> tuple[float, float]:
    """(greedy kNN, raster) mean window Manhattan distances for one bag."""
    return (
        window_mean_manhattan(knn_rearrange(bag, w)),
        window_mean_manhattan(raster_order(bag, w)),
    )
