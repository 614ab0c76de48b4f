"""3D SLIC superpixels: localized k-means over (intensity, z, y, x).

Centers start at the centroids of a regular block grid whose spacing is
close to ``S = cbrt(N / k)``. Each iteration lets every center claim the voxels
within ``S`` of it on each axis (a window 2S wide). A voxel goes to the claiming
center with the smallest ``sqrt(dI^2 + (m/S)^2 * ds^2)``. Exact ties go to the
lowest center index. After clustering, small or disconnected fragments are
merged so that every label is one 6-connected region.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, SpecError
from .volume import Volume


@dataclass(frozen=True)
class SlicConfig:
    k: int = 64
    m: float = 1.0
    max_iters: int = 10
    min_size_fraction: float = 0.25
    tol: float = 1e-4

    def validate(self, n_voxels: int | None = None) -> None:
        if self.k < 2:
            raise SpecError(f"slic k must be >= 2, got {self.k}")
        if n_voxels is not None and self.k > n_voxels:
            raise SpecError(f"slic k={self.k} exceeds voxel count {n_voxels}")
        if not self.m > 0:
            raise SpecError(f"slic compactness m must be > 0, got {self.m}")
        if self.max_iters < 1:
            raise SpecError(f"slic max_iters must be >= 1, got {self.max_iters}")
        if self.min_size_fraction < 0:
            raise SpecError(f"min_size_fraction must be >= 0, got {self.min_size_fraction}")


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    labels: np.ndarray
    count: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim != 3:
            raise DimensionError(f"superpixel labels must be 3-D, got shape {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def to_volume(self) -> Volume:
        return Volume(self.labels[None].astype(np.float32))

    @classmethod
    def from_volume(cls, v: Volume) -> "SuperpixelMap":
        if v.channels != 1:
            raise DimensionError(f"superpixel volume must have 1 channel, got {v.channels}")
        vals = v.voxels[0]
        labels = vals.astype(np.int64)
        if np.any(labels != vals) or labels.min() < 0:
            raise DimensionError("superpixel volume must hold non-negative integers")
        return cls(labels, int(labels.max()) + 1)

    def __eq__(self, other):
        if not isinstance(other, SuperpixelMap):
            return NotImplemented
        return self.count == other.count and np.array_equal(self.labels, other.labels)


def _as_channel(channel) -> np.ndarray:
    if isinstance(channel, Volume):
        if channel.channels != 1:
            raise DimensionError(f"slic expects a 1-channel volume, got {channel.channels}")
        channel = channel.voxels[0]
    arr = np.asarray(channel, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise DimensionError(f"slic expects a 3-D channel, got shape {arr.shape}")
    return arr


def grid_step(n_voxels: int, k: int) -> float:
    return (n_voxels / k) ** (1.0 / 3.0)


def grid_counts(dims: tuple[int, int, int], k: int) -> tuple[int, int, int]:
    """Blocks per axis: product closest to ``k``, then spacing closest to S.

    Remaining ties prefer cutting later axes (x before y before z).
    """
    step = grid_step(int(np.prod(dims)), k)
    axes = [np.arange(1, min(d, k) + 1) for d in dims]
    nz, ny, nx = (g.ravel() for g in np.meshgrid(*axes, indexing="ij"))
    spread = sum(np.log(d / n / step) ** 2 for d, n in zip(dims, (nz, ny, nx)))
    # np.lexsort treats its last key as the most significant.
    best = np.lexsort((-nz, -ny, -nx, np.round(spread, 12), np.abs(nz * ny * nx - k)))[0]
    return int(nz[best]), int(ny[best]), int(nx[best])


def initial_centers(image: np.ndarray, k: int) -> np.ndarray:
    """Block-grid centers as rows of (intensity, z, y, x).

    The volume is cut into near-equal blocks (see :func:`grid_counts`); each
    center is its block's coordinate centroid and mean intensity.
    """
    dims = image.shape
    cuts = [[(i * d) // n for i in range(n + 1)] for d, n in zip(dims, grid_counts(dims, k))]
    centers = []
    for z0, z1 in zip(cuts[0][:-1], cuts[0][1:]):
        for y0, y1 in zip(cuts[1][:-1], cuts[1][1:]):
            for x0, x1 in zip(cuts[2][:-1], cuts[2][1:]):
                block = image[z0:z1, y0:y1, x0:x1]
                centers.append((block.mean(), (z0 + z1 - 1) / 2, (y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2))
    return np.array(centers, dtype=np.float64)


def assign(image: np.ndarray, centers: np.ndarray, step: float, m: float) -> np.ndarray:
    """One assignment sweep; voxels outside every window go to the globally nearest center."""
    dims = image.shape
    best = np.full(dims, np.inf)
    labels = np.full(dims, -1, dtype=np.int64)
    ratio = (m / step) ** 2
    for j, (ci, cz, cy, cx) in enumerate(centers):
        lo = [max(0, math.ceil(c - step)) for c in (cz, cy, cx)]
        hi = [min(d, math.floor(c + step) + 1) for c, d in zip((cz, cy, cx), dims)]
        if min(h - l for l, h in zip(lo, hi)) <= 0:
            continue
        zz, yy, xx = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
        dist = (image[region] - ci) ** 2 + ratio * ((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2)
        win = dist < best[region]
        best[region] = np.where(win, dist, best[region])
        labels[region] = np.where(win, j, labels[region])
    orphans = np.flatnonzero(labels.ravel() < 0)
    if orphans.size:
        coords = np.stack(np.unravel_index(orphans, dims), axis=1).astype(np.float64)
        feats = image.ravel()[orphans]
        dist = (feats[:, None] - centers[None, :, 0]) ** 2 + ratio * (
            (coords[:, None, :] - centers[None, :, 1:]) ** 2
        ).sum(axis=2)
        labels.ravel()[orphans] = np.argmin(dist, axis=1)
    return labels


def update_centers(image: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-label feature means; a center that lost every voxel stays where it was."""
    k = len(centers)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    coords = np.indices(image.shape).reshape(3, -1).astype(np.float64)
    feats = np.vstack([image.ravel()[None], coords])
    out = centers.copy()
    alive = counts > 0
    for f in range(4):
        sums = np.bincount(flat, weights=feats[f], minlength=k)
        out[alive, f] = sums[alive] / counts[alive]
    return out


def cluster(image: np.ndarray, cfg: SlicConfig) -> tuple[np.ndarray, int]:
    """Run the k-means loop; returns raw labels and the iteration count."""
    step = grid_step(image.size, cfg.k)
    centers = initial_centers(image, cfg.k)
    labels = assign(image, centers, step, cfg.m)
    for it in range(1, cfg.max_iters + 1):
        moved = update_centers(image, labels, centers)
        drift = float(np.max(np.linalg.norm(moved - centers, axis=1)))
        centers = moved
        labels = assign(image, centers, step, cfg.m)
        if drift < cfg.tol:
            return labels, it
    return labels, cfg.max_iters


def _components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """6-connected components of every label, numbered in raster order of first voxel."""
    comp = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for lab in np.unique(labels):
        part, n = ndimage.label(labels == lab)
        comp[part > 0] = part[part > 0] + offset
        offset += n
    _, first, inverse = np.unique(comp.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(labels.shape), offset


def _adjacency(comp: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for axis in range(3):
        a = np.moveaxis(comp, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        diff = lo != hi
        for u, v in zip(lo[diff].tolist(), hi[diff].tolist()):
            pairs.add((u, v))
            pairs.add((v, u))
    return pairs


def enforce_connectivity(spmap: SuperpixelMap | np.ndarray, cfg: SlicConfig = SlicConfig()) -> SuperpixelMap:
    """Split every label into 6-connected pieces and merge the small ones.

    Pieces smaller than ``min_size_fraction * N / k`` are visited in raster
    order of their first voxel. Each joins its largest neighbouring piece at
    that moment, with size ties going to the piece seen first. Output labels
    are numbered by first appearance in raster order.
    """
    labels = spmap.labels if isinstance(spmap, SuperpixelMap) else np.asarray(spmap, dtype=np.int64)
    comp, n = _components(labels)
    min_size = cfg.min_size_fraction * labels.size / cfg.k
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)
    neighbours: dict[int, set[int]] = {i: set() for i in range(n)}
    for u, v in _adjacency(comp):
        neighbours[u].add(v)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        if find(i) != i or sizes[i] >= min_size:
            continue
        cands = {find(j) for j in neighbours[i]} - {i}
        if not cands:
            continue
        target = min(cands, key=lambda j: (-sizes[j], j))
        parent[i] = target
        sizes[target] += sizes[i]
        neighbours[target] |= neighbours[i]
    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    merged = roots[comp]
    _, first, inverse = np.unique(merged.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    out = order[inverse].reshape(labels.shape)
    return SuperpixelMap(out, int(len(first)))


def slic_segment(channel, cfg: SlicConfig = SlicConfig()) -> SuperpixelMap:
    image = _as_channel(channel)
    cfg.validate(image.size)
    labels, _ = cluster(image, cfg)
    return enforce_connectivity(labels, cfg)


def surface_to_volume(spmap: SuperpixelMap) -> float:
    """Mean over superpixels of (exposed internal faces / voxel count)."""
    labels = spmap.labels
    faces = np.zeros(spmap.count, dtype=np.float64)
    for axis in range(3):
        a = np.moveaxis(labels, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        diff = lo != hi
        faces += np.bincount(lo[diff], minlength=spmap.count)
        faces += np.bincount(hi[diff], minlength=spmap.count)
    return float(np.mean(faces / spmap.sizes()))
