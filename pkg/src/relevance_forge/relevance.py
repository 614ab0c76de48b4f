"""From a perturbation mask to ranked relevance regions.

Per channel: segment the normalized channel into superpixels, paint each
superpixel with the sum of that channel's mask over it, then sum the painted
channels voxelwise. The combined volume is binned into B equal-width value
bins; rank 0 is the most relevant bin.

The generator darkens what the classifier relies on, so by default a low
painted value means high relevance and scores are flipped (``max - value``)
before binning.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateMapError, DimensionError, RankRangeError
from .slic3d import SlicConfig, SuperpixelMap, slic_segment
from .volume import Volume, as_volume, minmax_normalize

PAINT_MODES = ("sum", "mean")


@dataclass(frozen=True)
class RelevanceConfig:
    bins: int = 10
    low_mask_is_relevant: bool = True
    slic: SlicConfig = field(default_factory=SlicConfig)
    # "mean" divides each region's sum by its size; not the reference behaviour.
    paint_mode: str = "sum"

    def validate(self) -> None:
        if self.bins < 2:
            raise ConfigError(f"bin count must be >= 2, got {self.bins}")
        if self.paint_mode not in PAINT_MODES:
            raise ConfigError(f"paint_mode must be one of {PAINT_MODES}, got {self.paint_mode!r}")

    @property
    def score_direction(self) -> str:
        return "low-mask-is-relevant" if self.low_mask_is_relevant else "high-mask-is-relevant"


@dataclass(frozen=True, eq=False)
class RelevanceMap:
    combined: np.ndarray
    oriented: np.ndarray
    bins: np.ndarray
    bin_count: int
    score_direction: str
    painted: tuple = ()
    superpixels: tuple = ()

    def rank_means(self) -> list[float]:
        """Mean oriented score per rank; NaN for empty bins."""
        out = []
        for r in range(self.bin_count):
            sel = self.bins == r
            out.append(float(self.oriented[sel].mean()) if sel.any() else float("nan"))
        return out

    def combined_volume(self) -> Volume:
        return Volume(self.combined[None])

    def bins_volume(self) -> Volume:
        return Volume(self.bins[None].astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, RelevanceMap):
            return NotImplemented
        return (
            self.bin_count == other.bin_count
            and self.score_direction == other.score_direction
            and np.array_equal(self.combined, other.combined)
            and np.array_equal(self.bins, other.bins)
        )


def _plane(x) -> np.ndarray:
    if isinstance(x, Volume):
        if x.channels != 1:
            raise DimensionError(f"expected a 1-channel volume, got {x.channels}")
        x = x.voxels[0]
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise DimensionError(f"expected a 3-D grid, got shape {arr.shape}")
    return arr


def region_sums(values, spmap: SuperpixelMap) -> np.ndarray:
    values = _plane(values)
    if values.shape != spmap.dims:
        raise DimensionError(f"grid shape {values.shape} does not match superpixel map {spmap.dims}")
    return np.bincount(spmap.labels.ravel(), weights=values.ravel(), minlength=spmap.count)


def paint_regions(scores, spmap: SuperpixelMap) -> np.ndarray:
    """Broadcast one score per superpixel back onto its voxels."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (spmap.count,):
        raise DimensionError(f"expected {spmap.count} region scores, got shape {scores.shape}")
    return scores[spmap.labels]


def paint_superpixels(mask_channel, spmap: SuperpixelMap, mode: str = "sum") -> np.ndarray:
    sums = region_sums(mask_channel, spmap)
    if mode == "mean":
        sums = sums / np.maximum(spmap.sizes(), 1)
    elif mode != "sum":
        raise ConfigError(f"paint mode must be one of {PAINT_MODES}, got {mode!r}")
    return paint_regions(sums, spmap)


def combine_sequences(painted) -> np.ndarray:
    painted = [_plane(p) for p in painted]
    if not painted:
        raise DimensionError("combine_sequences needs at least one volume")
    shape = painted[0].shape
    out = np.zeros(shape, dtype=np.float64)
    for p in painted:
        if p.shape != shape:
            raise DimensionError(f"cannot combine shapes {shape} and {p.shape}")
        out = out + p
    return out


def orient(combined: np.ndarray, low_mask_is_relevant: bool) -> np.ndarray:
    return combined.max() - combined if low_mask_is_relevant else combined.copy()


def bin_ranks(
    combined,
    cfg: RelevanceConfig = RelevanceConfig(),
    painted=(),
    superpixels=(),
) -> RelevanceMap:
    """Equal-width binning of oriented scores between their min and max.

    The top bin is closed, so the maximum lands in rank 0. Empty bins keep
    their rank index.
    """
    cfg.validate()
    combined = _plane(combined)
    oriented = orient(combined, cfg.low_mask_is_relevant)
    lo, hi = float(oriented.min()), float(oriented.max())
    if not hi > lo:
        raise DegenerateMapError(f"combined relevance is constant ({lo!r}); no ranking possible")
    b = cfg.bins
    level = np.floor((oriented - lo) / (hi - lo) * b).astype(np.int64)
    level = np.clip(level, 0, b - 1)
    return RelevanceMap(
        combined=combined,
        oriented=oriented,
        bins=(b - 1) - level,
        bin_count=b,
        score_direction=cfg.score_direction,
        painted=tuple(painted),
        superpixels=tuple(superpixels),
    )


def top_regions(rm: RelevanceMap, r: int) -> np.ndarray:
    """Boolean mask of voxels whose rank is exactly ``r``."""
    if not 0 <= r < rm.bin_count:
        raise RankRangeError(f"rank {r} outside [0, {rm.bin_count})")
    return rm.bins == r


def segment_channels(volume: Volume, slic: SlicConfig) -> list[SuperpixelMap]:
    """One superpixel map per normalized channel; maps are independent."""
    norm = minmax_normalize(as_volume(volume))
    return [slic_segment(norm.voxels[c], slic) for c in range(norm.channels)]


def generate_relevance(
    volume: Volume,
    mask,
    cfg: RelevanceConfig = RelevanceConfig(),
    superpixels: list[SuperpixelMap] | None = None,
) -> RelevanceMap:
    """Full relevance pipeline for one case.

    ``superpixels`` may be supplied to reuse per-channel maps already computed
    for this volume.
    """
    cfg.validate()
    volume = as_volume(volume)
    mask = np.asarray(mask.voxels if isinstance(mask, Volume) else mask, dtype=np.float64)
    if mask.shape != volume.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match volume shape {volume.shape}")
    maps = superpixels if superpixels is not None else segment_channels(volume, cfg.slic)
    if len(maps) != volume.channels:
        raise DimensionError(f"need {volume.channels} superpixel maps, got {len(maps)}")
    painted = [paint_superpixels(mask[c], sp, cfg.paint_mode) for c, sp in enumerate(maps)]
    return bin_ranks(combine_sequences(painted), cfg, painted, maps)
