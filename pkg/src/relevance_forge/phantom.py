"""Synthetic labeled volumes with known blob masks.

Every case holds one ellipsoidal blob over smooth background noise. The class
label lives only in the blob's internal texture: class-1 blobs carry
voxel-scale (high-frequency) texture, class-0 blobs are smooth. A classifier therefore has to look inside the blob, which
is what makes localization from its decisions meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SpecError
from .volume import Volume

# Per-channel blob brightness above the background, cycled for extra channels.
_BLOB_OFFSETS = (0.45, 0.3, 0.375, 0.225)
_BACKGROUND_LEVEL = 0.3
_BACKGROUND_SPREAD = 0.06
_BACKGROUND_SIGMA = 3.0
# Two corner voxels pin every channel's intensity range, so min-max
# normalization maps both classes through the same affine transform.
_FIDUCIAL_LOW = 0.0
_FIDUCIAL_HIGH = 1.2
# Stream id reserved for label assignment; case streams use their index.
_LABEL_STREAM = 2**32 - 1


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    count: int = 200
    dims: tuple[int, int, int] = (32, 32, 32)
    channels: int = 2
    class_ratio: float = 0.6
    blob_radius_range: tuple[float, float] = (5.0, 8.0)
    texture_contrast: float = 0.6

    def validate(self) -> None:
        if self.count < 2:
            raise SpecError(f"phantom count must be >= 2, got {self.count}")
        if not 0.0 < self.class_ratio < 1.0:
            raise SpecError(f"class_ratio must lie in (0, 1), got {self.class_ratio}")
        if self.channels < 1 or len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"invalid channels/dims: {self.channels}, {self.dims}")
        lo, hi = self.blob_radius_range
        if not 1.0 <= lo <= hi:
            raise SpecError(f"blob radius range must satisfy 1 <= lo <= hi, got {self.blob_radius_range}")
        # Centre sits at least one voxel in from each face, blob included.
        if 2 * math.ceil(hi) + 3 > min(self.dims):
            raise SpecError(f"blob radius {hi} does not fit inside dims {self.dims}")
        if self.texture_contrast < 0:
            raise SpecError(f"texture_contrast must be >= 0, got {self.texture_contrast}")


@dataclass(frozen=True)
class PhantomCase:
    index: int
    volume: Volume
    label: int
    truth: np.ndarray


def case_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one case; independent of generation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def assign_labels(spec: PhantomSpec) -> np.ndarray:
    n_pos = int(math.floor(spec.count * spec.class_ratio + 0.5))
    n_pos = min(max(n_pos, 1), spec.count - 1)
    order = case_rng(spec.seed, _LABEL_STREAM).permutation(spec.count)
    labels = np.zeros(spec.count, dtype=np.int64)
    labels[order[:n_pos]] = 1
    return labels


def _smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return field / field.std()


def make_case(spec: PhantomSpec, index: int, label: int) -> PhantomCase:
    rng = case_rng(spec.seed, index)
    dims = spec.dims
    radii = rng.uniform(*spec.blob_radius_range, size=3)
    centre = [rng.uniform(r + 1, d - 2 - r) for r, d in zip(radii, dims)]
    grid = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii))
    truth = dist <= 1.0

    voxels = np.empty((spec.channels, *dims), dtype=np.float64)
    for c in range(spec.channels):
        background = _BACKGROUND_LEVEL + _BACKGROUND_SPREAD * _smooth_noise(rng, dims, _BACKGROUND_SIGMA)
        # Drawn for every case so the stream layout never depends on the label.
        texture = rng.choice(np.array([-1.0, 1.0]), size=dims)
        blob = _BLOB_OFFSETS[c % len(_BLOB_OFFSETS)] + (spec.texture_contrast * texture if label == 1 else 0.0)
        voxels[c] = background + truth * blob
        voxels[c][0, 0, 0] = _FIDUCIAL_LOW
        voxels[c][-1, -1, -1] = _FIDUCIAL_HIGH + spec.texture_contrast
    return PhantomCase(index, Volume(voxels.astype(np.float32)), int(label), truth)


def generate(spec: PhantomSpec | None = None) -> list[PhantomCase]:
    spec = spec or PhantomSpec()
    spec.validate()
    labels = assign_labels(spec)
    return [make_case(spec, i, labels[i]) for i in range(spec.count)]


def highpass_energy(channel: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared residual after a 3x3x3 box blur over the blob interior.

    The interior drops a two-voxel rim so the blob's own edge, present in
    both classes, does not swamp the texture signal.
    """
    channel = np.asarray(channel, dtype=np.float64)
    residual = channel - ndimage.uniform_filter(channel, size=3, mode="nearest")
    interior = ndimage.binary_erosion(truth, iterations=2)
    if not interior.any():
        interior = truth
    return float(np.mean(residual[interior] ** 2))


def largest_remainder(total: int, weights) -> list[int]:
    """Integer apportionment of ``total`` by floor then largest remainder.

    Remainder ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw + 1e-12).astype(int)
    short = total - counts.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


def split(cases, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Deterministic stratified train/val/test split.

    Part sizes come from the overall count; each part's class-1 count is then
    apportioned by the part sizes so every part tracks the dataset's ratio.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    cases = list(cases)
    sizes = largest_remainder(len(cases), fractions)
    if min(sizes) == 0:
        raise SpecError(f"split sizes {sizes} leave a part empty")
    labels = np.array([c.label for c in cases])
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    pos_counts = largest_remainder(len(pos_idx), sizes)
    neg_counts = [s - p for s, p in zip(sizes, pos_counts)]
    if min(neg_counts) < 0 or sum(neg_counts) != len(neg_idx):
        raise SpecError("stratified split could not balance classes")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    pos_idx = rng.permutation(pos_idx)
    neg_idx = rng.permutation(neg_idx)
    parts = []
    p0 = n0 = 0
    for pc, nc in zip(pos_counts, neg_counts):
        chosen = np.sort(np.concatenate([pos_idx[p0 : p0 + pc], neg_idx[n0 : n0 + nc]]))
        parts.append([cases[i] for i in chosen])
        p0 += pc
        n0 += nc
    return tuple(parts)
