"""Supervoxel pseudo-labels and adjacent-slice training episodes."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .episode import Episode
from .errors import DatasetError, ShapeError
from .tensor_core import io as tio

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class SupervoxelLabels:
    labels: np.ndarray  # (D, H, W) int32 in [0, count)
    count: int
    min_size: int

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.count)


def _normalize(volume):
    v = np.asarray(volume, dtype=float)
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def _grid(shape, k):
    d, h, w = shape
    step = (d * h * w / k) ** (1.0 / 3.0)
    counts = [max(1, int(round(n / step))) for n in shape]
    # trim the largest axis until the grid fits the requested count
    while int(np.prod(counts)) > k:
        ax = int(np.argmax(counts))
        counts[ax] -= 1
    return step, counts


def _slic(v, k, compactness, rng, rounds=10):
    d, h, w = v.shape
    step, counts = _grid(v.shape, k)
    axes = [(np.arange(c) + 0.5) * (n / c) for c, n in zip(counts, v.shape)]
    cz, cy, cx = (g.ravel() for g in np.meshgrid(*axes, indexing="ij"))
    jitter = rng.uniform(-0.25, 0.25, size=(3, cz.size)) * step
    centers = np.stack([
        np.clip(cz + jitter[0], 0, d - 1),
        np.clip(cy + jitter[1], 0, h - 1),
        np.clip(cx + jitter[2], 0, w - 1),
    ], axis=1)
    centers = np.concatenate([centers, v[tuple(np.round(centers).astype(int).T)][:, None]], axis=1)
    zz, yy, xx = np.indices(v.shape, dtype=float)
    spatial_w = (compactness / step) ** 2
    radius = int(np.ceil(step))
    labels = np.zeros(v.shape, dtype=np.int64)
    for _ in range(rounds):
        best = np.full(v.shape, np.inf)
        for idx, (z, y, x, inten) in enumerate(centers):
            sl = tuple(slice(max(0, int(c) - radius), min(n, int(c) + radius + 1))
                       for c, n in zip((z, y, x), v.shape))
            dist = ((v[sl] - inten) ** 2
                    + spatial_w * ((zz[sl] - z) ** 2 + (yy[sl] - y) ** 2 + (xx[sl] - x) ** 2))
            closer = dist < best[sl]
            best[sl][closer] = dist[closer]
            labels[sl][closer] = idx
        orphan = ~np.isfinite(best)
        if orphan.any():
            pos = np.stack([zz[orphan], yy[orphan], xx[orphan]], axis=1)
            dd = ((pos[:, None, :] - centers[None, :, :3]) ** 2).sum(-1) * spatial_w
            dd += (v[orphan][:, None] - centers[None, :, 3]) ** 2
            labels[orphan] = np.argmin(dd, axis=1)
        n = len(centers)
        cnt = np.bincount(labels.ravel(), minlength=n).astype(float)
        keep = cnt > 0
        for col, field in enumerate((zz, yy, xx, v)):
            sums = np.bincount(labels.ravel(), weights=field.ravel(), minlength=n)
            centers[keep, col] = sums[keep] / cnt[keep]
    return labels


def _components(labels):
    """Split every label into 6-connected components with unique ids."""
    comp = np.zeros(labels.shape, dtype=np.int64)
    next_id = 0
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab, structure=_SIX)
        sel = cc > 0
        comp[sel] = cc[sel] + next_id - 1
        next_id += n
    return comp, next_id


def _merge_small(comp, n, min_size):
    sizes = np.bincount(comp.ravel(), minlength=n)
    boxes = ndimage.find_objects(comp + 1, max_label=n)
    alive = sizes > 0
    shape = comp.shape
    while alive.sum() > 1:
        small = np.flatnonzero(alive & (sizes < min_size))
        if small.size == 0:
            break
        # smallest first, lowest id breaks ties
        target = small[np.lexsort((small, sizes[small]))[0]]
        box = tuple(slice(max(0, b.start - 1), min(n_, b.stop + 1))
                    for b, n_ in zip(boxes[target], shape))
        view = comp[box]
        region = view == target
        ring = ndimage.binary_dilation(region, structure=_SIX) & ~region
        votes = np.bincount(view[ring], minlength=n)
        votes[target] = 0
        dest = int(np.argmax(votes))
        view[region] = dest
        boxes[dest] = tuple(slice(min(a.start, b.start), max(a.stop, b.stop))
                            for a, b in zip(boxes[dest], boxes[target]))
        sizes[dest] += sizes[target]
        sizes[target] = 0
        alive[target] = False
    return comp


def cluster_supervoxels(volume, k: int = 50, compactness: float = 0.1, min_size: int = 100,
                        seed: int = 0) -> SupervoxelLabels:
    """SLIC-style clustering on (intensity, z, y, x).

    Intensities are min-max normalized per volume. After ten
    assignment/update rounds every label is split into connected pieces and
    pieces smaller than ``min_size`` are merged into the neighbour they share
    the most boundary with.
    """
    v = np.asarray(volume, dtype=float)
    if v.ndim != 3:
        raise ShapeError(f"supervoxel clustering expects a (D, H, W) volume, got rank {v.ndim}")
    if k < 1:
        raise ValueError(f"supervoxel count k must be >= 1, got {k}")
    if k > v.size:
        raise ValueError(f"k={k} exceeds the voxel count {v.size}")
    if not np.isfinite(v).all():
        raise ValueError("volume contains non-finite intensities")
    rng = np.random.default_rng(seed)
    raw = _slic(_normalize(v), k, compactness, rng)
    comp, n = _components(raw)
    comp = _merge_small(comp, n, min_size)
    _, inverse = np.unique(comp.ravel(), return_inverse=True)
    labels = inverse.reshape(v.shape).astype(np.int32)
    return SupervoxelLabels(labels, int(labels.max()) + 1, min_size)


def cache_name(volume_id: str, k: int, compactness: float, min_size: int, seed: int) -> str:
    return f"sv_{volume_id}_k{k}_c{compactness:g}_m{min_size}_s{seed}.tensor"


def cluster_cached(volume, volume_id: str, cache_dir, k=50, compactness=0.1, min_size=100,
                   seed=0) -> SupervoxelLabels:
    path = Path(cache_dir) / cache_name(volume_id, k, compactness, min_size, seed)
    if path.exists():
        labels = tio.load(path).astype(np.int32)
        return SupervoxelLabels(labels, int(labels.max()) + 1, min_size)
    sv = cluster_supervoxels(volume, k, compactness, min_size, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    tio.save(path, sv.labels)
    return sv


# ---------------------------------------------------------------------------
# pseudo episodes
# ---------------------------------------------------------------------------


class NoEligibleSupervoxel(DatasetError):
    pass


def episode_index(labels: SupervoxelLabels, admitted=None, min_footprint: int = 1) -> dict:
    """Map label -> list of (support slice, query slice) adjacent pairs.

    A slice pair qualifies when the label covers at least ``min_footprint``
    pixels on both slices and both slices are admitted.
    """
    lab = labels.labels
    d = lab.shape[0]
    flat = lab.reshape(d, -1)
    counts = np.stack([np.bincount(flat[z], minlength=labels.count) for z in range(d)], axis=1)
    ok_slice = np.zeros(d, dtype=bool)
    ok_slice[list(range(d)) if admitted is None else list(admitted)] = True
    present = (counts >= min_footprint) & ok_slice[None, :]
    index = {}
    for label in range(labels.count):
        pairs = []
        for s in range(d):
            if not present[label, s]:
                continue
            for q in (s - 1, s + 1):
                if 0 <= q < d and present[label, q]:
                    pairs.append((s, q))
        if pairs:
            index[label] = pairs
    return index


def sample_pseudo_episode(volume, labels: SupervoxelLabels, rng, admitted=None,
                          index=None, min_footprint: int = 1) -> Episode:
    """Support = one supervoxel's footprint on a slice; query = an adjacent slice."""
    if index is None:
        index = episode_index(labels, admitted, min_footprint)
    if not index:
        raise NoEligibleSupervoxel("no supervoxel spans two adjacent admitted slices")
    eligible = sorted(index)
    label = eligible[int(rng.integers(len(eligible)))]
    # all slices where the label has a partner, uniformly
    supports = sorted({s for s, _ in index[label]})
    s = supports[int(rng.integers(len(supports)))]
    partners = [q for ss, q in index[label] if ss == s]
    q = partners[int(rng.integers(len(partners)))]
    vol = np.asarray(volume)
    lab = labels.labels
    return Episode(
        support_image=vol[s], support_mask=(lab[s] == label).astype(np.uint8),
        query_image=vol[q], query_mask=(lab[q] == label).astype(np.uint8),
        class_id=-1, meta={"supervoxel": int(label), "support_slice": s, "query_slice": q},
    )
