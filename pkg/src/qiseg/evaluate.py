"""Dice scoring, the evaluation protocol and the ablation drivers.

Per-class numbers are aggregated in two stages: slice DSC is averaged within
each query volume, then mean and (population) std are taken across volumes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset, SplitPlan, eval_episodes
from .errors import ConfigError, ShapeError
from .protoseg import ModelParams, encode_pair, segment_episode, segment_features
from .refine import RefineConfig, refine_trajectory

log = logging.getLogger(__name__)

ALPHA_GRID = (0.2, 0.4, 0.5, 0.6, 0.8, 0.9)
STD_NOTE = "std across query volumes"


def dsc(pred, truth) -> float:
    """Dice overlap on a 0..100 scale. Both empty -> 100, exactly one empty -> 0."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(truth).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dsc needs equal shapes, got {a.shape} and {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def fingerprint(*parts) -> str:
    """Short sha256 over a canonical JSON rendering of the parts."""
    def plain(x):
        if is_dataclass(x):
            return asdict(x)
        if isinstance(x, SplitPlan):
            return x.to_text()
        return x

    blob = json.dumps([plain(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


ROW_FIELDS = ("class_id", "query_volume", "query_slice", "support_volume", "support_slice", "dsc")


@dataclass
class EvalReport:
    per_class: dict  # class id -> (mean, std, number of query volumes)
    rows: list  # dicts with ROW_FIELDS
    fingerprint: str
    note: str = STD_NOTE

    @property
    def mean(self) -> float:
        return float(np.mean([m for m, _s, _n in self.per_class.values()])) if self.per_class else 0.0

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# fingerprint={self.fingerprint}\n# {self.note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "mean", "std", "volumes"])
        for c in sorted(self.per_class):
            m, s, n = self.per_class[c]
            w.writerow([c, f"{m:.6f}", f"{s:.6f}", n])
        w.writerow(["mean", f"{self.mean:.6f}", "", ""])
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# fingerprint={self.fingerprint}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([r[k] if k != "dsc" else f"{r[k]:.6f}" for k in ROW_FIELDS])
        return buf.getvalue()

    def write(self, directory, stem: str = "eval") -> tuple:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        a, b = directory / f"{stem}_summary.csv", directory / f"{stem}_episodes.csv"
        a.write_text(self.summary_csv())
        b.write_text(self.episodes_csv())
        return a, b


def aggregate(rows) -> dict:
    by_class = {}
    for r in rows:
        by_class.setdefault(r["class_id"], {}).setdefault(r["query_volume"], []).append(r["dsc"])
    out = {}
    for c, vols in sorted(by_class.items()):
        means = np.array([np.mean(vols[v]) for v in sorted(vols)])
        out[c] = (float(means.mean()), float(means.std()), len(means))
    return out


def _row(episode, score) -> dict:
    m = episode.meta
    return {"class_id": episode.class_id, "query_volume": m.get("query_volume", ""),
            "query_slice": m.get("query_slice", -1), "support_volume": m.get("support_volume", ""),
            "support_slice": m.get("support_slice", -1), "dsc": float(score)}


def run_episodes(episodes, predict, workers: int = 1) -> list:
    """Score ``predict(episode) -> mask`` on every episode, preserving order."""
    def one(ep):
        return _row(ep, dsc(predict(ep), ep.query_mask))

    if workers <= 1:
        return [one(ep) for ep in episodes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, episodes))


def evaluate(params: ModelParams, dataset: Dataset, split: SplitPlan, seed: int = 0,
             refine_cfg: RefineConfig | None = None, workers: int = 1, predictor=None,
             episodes=None) -> EvalReport:
    """Score every evaluation episode of the split.

    Refinement is on unless ``refine_cfg`` says otherwise. ``predictor``
    replaces the model (episode -> hard mask), e.g. for oracle checks.
    """
    refine_cfg = refine_cfg or RefineConfig()
    if episodes is None:
        episodes = eval_episodes(dataset, split, seed)
    if predictor is None:
        def predictor(ep):
            return segment_episode(ep, params, refine_cfg).mask
    rows = run_episodes(episodes, predictor, workers)
    seg = params.seg if params is not None else None
    return EvalReport(aggregate(rows), rows, fingerprint(seg, refine_cfg, split, seed))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def write_table(path, header, rows, fp: str, note: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# fingerprint={fp}\n")
    if note:
        buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue())
    return path


def read_table(path):
    """Inverse of :func:`write_table`: (meta dict, header, rows of str)."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            meta[key if val else "note"] = val or key
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


# variant name -> (SegConfig overrides, refinement on)
VARIANTS = {
    "fine": ({"paths": "fine", "threshold": "fixed"}, False),
    "coarse": ({"paths": "coarse", "threshold": "fixed"}, False),
    "DP": ({"paths": "dual", "threshold": "fixed"}, False),
    "DP+PR": ({"paths": "dual", "threshold": "fixed"}, True),
    "DP+TA": ({"paths": "dual", "threshold": "adaptive"}, False),
    "DP+TA+PR": ({"paths": "dual", "threshold": "adaptive"}, True),
}
# variants that share trained weights
TRAINED_AS = {"fine": "fine", "coarse": "coarse", "DP": "DP", "DP+PR": "DP", "DP+TA": "DP+TA",
              "DP+TA+PR": "DP+TA"}


def ablate_components(trained: dict, dataset: Dataset, split: SplitPlan, seed: int = 0,
                      refine_cfg: RefineConfig | None = None, workers: int = 1):
    """Per-class and mean DSC for each variant in :data:`VARIANTS`.

    ``trained`` maps a variant name (or its :data:`TRAINED_AS` key) to
    ModelParams. Returns ``(header, rows, reports)``; missing variants are
    left out with a warning.
    """
    base = refine_cfg or RefineConfig()
    classes = list(split.test_classes)
    header = ["variant"] + [f"class_{c}" for c in classes] + ["mean"]
    rows, reports = [], {}
    episodes = eval_episodes(dataset, split, seed)
    for name, (seg_over, use_pr) in VARIANTS.items():
        params = trained.get(name) or trained.get(TRAINED_AS[name])
        if params is None:
            warnings.warn(f"variant {name} has no trained parameters; row omitted", stacklevel=2)
            continue
        cfg = replace(base, enabled=use_pr)
        rep = evaluate(params, dataset, split, seed, cfg, workers, episodes=episodes)
        reports[name] = rep
        rows.append([name] + [rep.per_class.get(c, (float("nan"),))[0] for c in classes] + [rep.mean])
    return header, rows, reports


def sweep_alpha(params: ModelParams, dataset: Dataset, split: SplitPlan, values=ALPHA_GRID,
                seed: int = 0, refine_cfg: RefineConfig | None = None, workers: int = 1):
    """Mean and std (across classes) of DSC for each fusion weight."""
    for a in values:
        if not 0.0 < a < 1.0:
            raise ConfigError(f"alpha values must lie in (0, 1), got {a}")
    classes = list(split.test_classes)
    header = ["alpha", "mean", "std"] + [f"class_{c}" for c in classes]
    episodes = eval_episodes(dataset, split, seed)
    rows = []
    for a in values:
        p = replace(params, seg=replace(params.seg, alpha=float(a)))
        rep = evaluate(p, dataset, split, seed, refine_cfg, workers, episodes=episodes)
        per = [rep.per_class[c][0] for c in classes]
        rows.append([float(a), float(np.mean(per)), float(np.std(per))] + per)
    return header, rows


@dataclass
class RefinementTrace:
    header: list
    rows: list  # iteration, per-class mean DSC..., mu, sigma
    peak_iteration: int
    per_iteration_reports: list = field(default_factory=list)


def _trajectory_masks(ep, params, cfg, max_n):
    """Hard masks for refinement iterations 0..max_n on one episode."""
    sf, qf = encode_pair(ep.support_image, ep.query_image, params)
    hw = np.shape(ep.query_image)
    base = segment_features(sf, ep.support_mask, qf, params, hw)
    trajs = {}
    for path, res in base.paths.items():
        tgt = getattr(qf, path).value
        run = replace(cfg, n_iters=max_n, enabled=True)
        traj = refine_trajectory(tgt, res.prototype, res.threshold, run, params.seg.a)
        # v == 0 gives a single point; hold it for every iteration
        trajs[path] = [traj[min(n, len(traj) - 1)][0] for n in range(max_n + 1)]
    masks = [base.mask]
    for n in range(1, max_n + 1):
        protos = {path: trajs[path][n] for path in trajs}
        masks.append(segment_features(sf, ep.support_mask, qf, params, hw, prototypes=protos).mask)
    return masks


def trace_refinement(params: ModelParams, dataset: Dataset, split: SplitPlan, max_n: int = 10,
                     seed: int = 0, refine_cfg: RefineConfig | None = None,
                     workers: int = 1) -> RefinementTrace:
    """Per-class mean DSC after each refinement iteration, with mu/sigma across classes."""
    if max_n < 1:
        raise ConfigError(f"max_n must be >= 1, got {max_n}")
    cfg = refine_cfg or RefineConfig()
    episodes = eval_episodes(dataset, split, seed)

    def one(ep):
        return [dsc(m, ep.query_mask) for m in _trajectory_masks(ep, params, cfg, max_n)]

    if workers <= 1:
        scores = [one(ep) for ep in episodes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(one, episodes))
    classes = list(split.test_classes)
    header = ["iteration"] + [f"class_{c}" for c in classes] + ["mu", "sigma"]
    rows, reports = [], []
    for n in range(max_n + 1):
        agg = aggregate([_row(ep, s[n]) for ep, s in zip(episodes, scores)])
        per = [agg[c][0] for c in classes]
        rows.append([n] + per + [float(np.mean(per)), float(np.std(per))])
        reports.append(agg)
    mu = [r[-2] for r in rows]
    return RefinementTrace(header, rows, int(np.argmax(mu)), reports)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def _boundary(mask):
    from scipy import ndimage

    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def overlay_rgb(image, pred, truth=None) -> np.ndarray:
    """Grayscale image with predicted (red) and true (green) outlines, uint8 RGB."""
    img = np.asarray(image, dtype=float)
    lo, hi = img.min(), img.max()
    gray = ((img - lo) / (hi - lo) * 255 if hi > lo else np.zeros_like(img)).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if truth is not None:
        rgb[_boundary(truth)] = (0, 255, 0)
    rgb[_boundary(pred)] = (255, 0, 0)
    return rgb


def write_overlay(path, image, pred, truth=None) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_rgb(image, pred, truth)).save(path)
    return path
