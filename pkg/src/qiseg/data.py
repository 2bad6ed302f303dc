"""Synthetic volumetric phantoms, preprocessing, class splits and samplers.

A phantom is a noisy body ellipsoid with a smooth bias field, a few
unlabelled distractor blobs, and one labelled ellipsoid per organ class.
Classes come in two anatomical groups stacked along the slice axis so that
removing every slice that shows one group still leaves training data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episode import Episode
from .errors import DatasetError, SplitError
from .tensor_core import io as tio

log = logging.getLogger(__name__)


@dataclass
class ClassSpec:
    class_id: int
    contrast: float  # mean intensity above body tissue, before gain
    radius: tuple  # (min, max) in-plane semi-axis, pixels
    z_radius: tuple  # (min, max) semi-axis along slices
    z_center: tuple  # (min, max) fraction of depth
    texture: float = 1.0  # noise multiplier inside the organ


def default_classes():
    return [
        ClassSpec(1, 0.45, (11, 15), (4, 6), (0.62, 0.72), 0.8),   # large, upper
        ClassSpec(2, 0.25, (6, 9), (3, 5), (0.62, 0.72), 1.0),     # medium, upper
        ClassSpec(3, 0.60, (4, 7), (3, 4), (0.25, 0.35), 1.0),     # small, lower
        ClassSpec(4, 0.55, (4, 7), (3, 4), (0.25, 0.35), 1.2),     # small, lower
    ]


@dataclass
class PhantomConfig:
    depth: int = 32
    size: int = 64
    classes: list = field(default_factory=default_classes)
    groups: tuple = ((1, 2), (3, 4))
    tissue: float = 0.35
    noise: float = 0.04
    bias: float = 0.05
    gain: tuple = (0.85, 1.15)
    class_jitter: float = 0.05
    distractors: int = 4
    hot_fraction: float = 0.001
    scale: float = 1000.0
    max_retries: int = 200

    def __post_init__(self):
        if len(self.classes) < 4:
            raise DatasetError(f"phantom config needs >= 4 classes, got {len(self.classes)}")
        if self.depth < 8:
            raise DatasetError(f"phantom depth must be >= 8, got {self.depth}")
        if self.size % 8:
            raise DatasetError(f"phantom size must be divisible by 8, got {self.size}")


@dataclass
class Phantom:
    volume_id: str
    volume: np.ndarray  # (D, H, W) raw intensities
    masks: dict  # class id -> (D, H, W) uint8
    meta: dict = field(default_factory=dict)

    @property
    def class_ids(self):
        return sorted(self.masks)

    def label_map(self) -> np.ndarray:
        out = np.zeros(self.volume.shape, dtype=np.uint8)
        for c, m in self.masks.items():
            out[m > 0] = c
        return out


def _ellipsoid(shape, center, axes, angle):
    zz, yy, xx = np.indices(shape, dtype=float)
    dz, dy, dx = zz - center[0], yy - center[1], xx - center[2]
    c, s = np.cos(angle), np.sin(angle)
    u, w = c * dx + s * dy, -s * dx + c * dy
    return ((dz / axes[0]) ** 2 + (u / axes[1]) ** 2 + (w / axes[2]) ** 2) <= 1.0


def _place_organs(cfg: PhantomConfig, rng, body):
    d, n = cfg.depth, cfg.size
    for _attempt in range(cfg.max_retries):
        masks, taken = {}, np.zeros((d, n, n), dtype=bool)
        ok = True
        for spec in cfg.classes:
            axes = (rng.uniform(*spec.z_radius), rng.uniform(*spec.radius), rng.uniform(*spec.radius))
            center = (rng.uniform(*spec.z_center) * d,
                      rng.uniform(0.3, 0.7) * n, rng.uniform(0.25, 0.75) * n)
            m = _ellipsoid((d, n, n), center, axes, rng.uniform(0, np.pi)) & body
            if not m.any() or (m & taken).any():
                ok = False
                break
            masks[spec.class_id] = m
            taken |= m
        if ok:
            return masks, taken
    raise DatasetError(f"could not place disjoint organs within {cfg.max_retries} retries")


def generate_phantom(cfg: PhantomConfig, rng, volume_id: str) -> Phantom:
    d, n = cfg.depth, cfg.size
    body = _ellipsoid((d, n, n), (d / 2, n / 2, n / 2),
                      (d * 0.75, n * rng.uniform(0.40, 0.46), n * rng.uniform(0.42, 0.48)), 0.0)
    masks, taken = _place_organs(cfg, rng, body)
    gain = rng.uniform(*cfg.gain)
    zz, yy, xx = np.indices((d, n, n), dtype=float)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    field_ = (direction[0] * (zz / d - 0.5) + direction[1] * (yy / n - 0.5)
              + direction[2] * (xx / n - 0.5)) * 2 * cfg.bias

    clean = np.where(body, cfg.tissue, 0.0)
    for _ in range(cfg.distractors):
        blob = _ellipsoid((d, n, n), (rng.uniform(0, d), rng.uniform(0.2, 0.8) * n,
                                      rng.uniform(0.2, 0.8) * n),
                          (rng.uniform(2, 5), rng.uniform(2, 6), rng.uniform(2, 6)),
                          rng.uniform(0, np.pi)) & body & ~taken
        clean[blob] = cfg.tissue + rng.uniform(-0.2, 0.4)
    noise_scale = np.where(body, 1.0, 0.3)
    contrasts = {}
    for spec in cfg.classes:
        m = masks[spec.class_id]
        contrasts[spec.class_id] = spec.contrast + rng.uniform(-cfg.class_jitter, cfg.class_jitter)
        clean[m] = cfg.tissue + contrasts[spec.class_id]
        noise_scale[m] = spec.texture
    vol = gain * (clean + np.where(body, field_, 0.0)
                  + cfg.noise * noise_scale * rng.normal(size=clean.shape))
    hot = rng.random(vol.shape) < cfg.hot_fraction
    vol[hot] = vol.max() * rng.uniform(2.0, 4.0, size=int(hot.sum()))
    vol = np.maximum(vol, 0.0) * cfg.scale
    meta = {"gain": gain, "contrasts": contrasts, "body": body, "taken": taken, "hot": hot}
    return Phantom(volume_id, vol, {c: m.astype(np.uint8) for c, m in masks.items()}, meta)


def generate_phantoms(count: int, seed: int, cfg: PhantomConfig | None = None) -> list:
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    return [generate_phantom(cfg, rng, f"vol_{i:03d}") for i in range(count)]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _crop_or_pad(v, size):
    out = v
    for axis in (1, 2):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            widths = [(0, 0)] * 3
            widths[axis] = (before, size - n - before)
            out = np.pad(out, widths)
    return out


def preprocess(volume, size: int | None = None) -> np.ndarray:
    """Clip at the 99.5th percentile, min-max to [0, 1], crop/pad slices to ``size``.

    The percentile uses the next-higher order statistic, so it is an actual
    voxel value and a second pass leaves the result unchanged.
    """
    v = np.asarray(volume, dtype=float)
    top = np.percentile(v, 99.5, method="higher")
    v = np.minimum(v, top)
    lo, hi = v.min(), v.max()
    v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    if size is not None:
        v = _crop_or_pad(v, size)
    return v


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass
class VolumeRecord:
    volume_id: str
    image: np.ndarray  # preprocessed (D, H, W)
    labels: np.ndarray  # (D, H, W) uint8 class ids, 0 = none
    class_ids: list

    def slices_with(self, class_id):
        return [int(z) for z in np.flatnonzero((self.labels == class_id).any(axis=(1, 2)))]


@dataclass
class Dataset:
    volumes: list
    root: Path | None = None

    @property
    def class_ids(self):
        return sorted({c for v in self.volumes for c in v.class_ids})

    def by_id(self, volume_id):
        for v in self.volumes:
            if v.volume_id == volume_id:
                return v
        raise KeyError(volume_id)


def from_phantoms(phantoms, size: int | None = None) -> Dataset:
    vols = []
    for ph in phantoms:
        labels = ph.label_map()
        if size is not None:
            labels = _crop_or_pad(labels, size)
        vols.append(VolumeRecord(ph.volume_id, preprocess(ph.volume, size), labels, ph.class_ids))
    return Dataset(vols)


MANIFEST = "manifest.txt"


def write_dataset(phantoms, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for ph in phantoms:
        img, msk = f"{ph.volume_id}.tensor", f"{ph.volume_id}_labels.tensor"
        tio.save(root / img, ph.volume)
        tio.save(root / msk, ph.label_map())
        lines.append(f"{ph.volume_id} classes={','.join(map(str, ph.class_ids))} "
                     f"image={img} mask={msk}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root / MANIFEST


def read_manifest(root) -> list:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"dataset manifest not found: expected {path}")
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        vid, *fields = line.split()
        kv = dict(f.split("=", 1) for f in fields)
        rows.append({"volume_id": vid, "classes": [int(c) for c in kv["classes"].split(",") if c],
                     "image": kv["image"], "mask": kv["mask"]})
    return rows


def load_dataset(root, size: int | None = None) -> Dataset:
    root = Path(root)
    vols = []
    for row in read_manifest(root):
        raw = tio.load(root / row["image"])
        labels = tio.load(root / row["mask"]).astype(np.uint8)
        if size is not None:
            labels = _crop_or_pad(labels, size)
        vols.append(VolumeRecord(row["volume_id"], preprocess(raw, size), labels, row["classes"]))
    return Dataset(vols, root)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    setting: int
    fold: int
    train_classes: list
    test_classes: list
    admitted: dict  # volume id -> sorted admitted slice indices

    def to_text(self) -> str:
        lines = [f"setting={self.setting}", f"fold={self.fold}",
                 f"train_classes={','.join(map(str, self.train_classes))}",
                 f"test_classes={','.join(map(str, self.test_classes))}"]
        for vid in sorted(self.admitted):
            lines.append(f"admit {vid}={','.join(map(str, self.admitted[vid]))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitPlan":
        head, admitted = {}, {}
        for line in text.splitlines():
            if line.startswith("admit "):
                vid, idx = line[6:].split("=", 1)
                admitted[vid] = [int(x) for x in idx.split(",") if x]
            elif "=" in line:
                key, val = line.split("=", 1)
                head[key] = val

        def ints(s):
            return [int(x) for x in s.split(",") if x]

        return cls(int(head["setting"]), int(head["fold"]), ints(head["train_classes"]),
                   ints(head["test_classes"]), admitted)


def class_groups(class_ids, groups=None, seed: int = 0):
    """Two class groups. Explicit ``groups`` are used as given, filtered to known ids."""
    ids = sorted(class_ids)
    if groups:
        out = [[c for c in g if c in ids] for g in groups]
        return [g for g in out if g]
    perm = list(np.random.default_rng(seed).permutation(ids))
    half = (len(perm) + 1) // 2
    return [sorted(int(c) for c in perm[:half]), sorted(int(c) for c in perm[half:])]


def make_split(dataset: Dataset, setting: int, fold: int, seed: int = 0, groups=None) -> SplitPlan:
    """Hold out one class group as test classes.

    Setting 1 admits every slice; setting 2 drops every slice that shows any
    test-class pixel.
    """
    if setting not in (1, 2):
        raise SplitError(f"setting must be 1 or 2, got {setting}")
    ids = dataset.class_ids
    if len(ids) < 2:
        raise SplitError(f"need >= 2 classes to split, got {ids}")
    parts = class_groups(ids, groups, seed)
    if not 0 <= fold < len(parts):
        raise SplitError(f"fold must be in [0, {len(parts)}), got {fold}")
    test = sorted(parts[fold])
    train = sorted(c for c in ids if c not in test)
    admitted = {}
    for vol in dataset.volumes:
        if setting == 1:
            admitted[vol.volume_id] = list(range(vol.labels.shape[0]))
        else:
            hit = np.isin(vol.labels, test).any(axis=(1, 2))
            admitted[vol.volume_id] = [int(z) for z in np.flatnonzero(~hit)]
    total = sum(len(v) for v in admitted.values())
    if total == 0:
        raise SplitError(f"setting {setting} fold {fold}: no training slices left after removing "
                         f"slices with test classes {test}")
    return SplitPlan(setting, fold, train, test, admitted)


def leaked_pixels(dataset: Dataset, split: SplitPlan) -> int:
    """Count of test-class pixels inside admitted training slices (exhaustive)."""
    total = 0
    for vol in dataset.volumes:
        idx = split.admitted.get(vol.volume_id, [])
        if idx:
            total += int(np.isin(vol.labels[idx], split.test_classes).sum())
    return total


# ---------------------------------------------------------------------------
# evaluation episodes
# ---------------------------------------------------------------------------


def support_slice(vol: VolumeRecord, class_id: int) -> int:
    """Slice with the largest footprint of the class."""
    areas = (vol.labels == class_id).sum(axis=(1, 2))
    return int(np.argmax(areas))


def _candidates(dataset, class_id):
    vols = [v for v in dataset.volumes if class_id in v.class_ids and v.slices_with(class_id)]
    if len(vols) < 2:
        raise SplitError(f"class {class_id} is present in fewer than 2 volumes")
    return vols


def _make_eval(sup: VolumeRecord, qry: VolumeRecord, class_id: int, s: int, q: int) -> Episode:
    return Episode(
        support_image=sup.image[s], support_mask=(sup.labels[s] == class_id).astype(np.uint8),
        query_image=qry.image[q], query_mask=(qry.labels[q] == class_id).astype(np.uint8),
        class_id=class_id,
        meta={"support_volume": sup.volume_id, "query_volume": qry.volume_id,
              "support_slice": s, "query_slice": q},
    )


def sample_eval_episode(dataset: Dataset, split: SplitPlan, rng) -> Episode:
    """One random test episode; support and query come from different volumes."""
    if not split.test_classes:
        raise SplitError("split has no test classes")
    c = split.test_classes[int(rng.integers(len(split.test_classes)))]
    vols = _candidates(dataset, c)
    qi = int(rng.integers(len(vols)))
    others = [v for i, v in enumerate(vols) if i != qi]
    sup = others[int(rng.integers(len(others)))]
    qslices = vols[qi].slices_with(c)
    q = qslices[int(rng.integers(len(qslices)))]
    return _make_eval(sup, vols[qi], c, support_slice(sup, c), q)


def eval_episodes(dataset: Dataset, split: SplitPlan, seed: int = 0) -> list:
    """Every (test class, query volume, query slice) once.

    The support volume for each (class, query volume) pair is drawn from the
    other volumes with a seeded generator.
    """
    rng = np.random.default_rng(seed)
    out = []
    for c in split.test_classes:
        vols = _candidates(dataset, c)
        for qi, qry in enumerate(vols):
            others = [v for i, v in enumerate(vols) if i != qi]
            sup = others[int(rng.integers(len(others)))]
            s = support_slice(sup, c)
            for q in qry.slices_with(c):
                out.append(_make_eval(sup, qry, c, s, q))
    return out
