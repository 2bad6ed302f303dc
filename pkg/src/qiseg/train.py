"""Episodic meta-training on supervoxel pseudo-episodes."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, SplitPlan
from .encoder import EncoderParams, init_encoder
from .errors import CheckpointError, SplitError
from .protoseg import (ModelParams, ProbabilityMaps, SegConfig, encode_pair,
                       init_head, segment_features)
from .supervoxel import NoEligibleSupervoxel, cluster_cached, cluster_supervoxels, episode_index
from .supervoxel import sample_pseudo_episode
from .tensor_core import autograd as ag
from .tensor_core import io as tio

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay: float = 0.98
    decay_every: int = 1000
    iters: int = 2000
    seed: int = 0
    align: bool = True
    optimizer: str = "sgd"  # sgd | adam
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ckpt_every: int = 500
    sv_k: int = 50
    sv_compactness: float = 0.1
    sv_min_size: int = 100
    sv_seed: int = 0  # supervoxels are a property of the data, not of the run
    min_footprint: int = 1

    def lr(self, t: int) -> float:
        return self.lr0 * self.decay ** (t // self.decay_every)


@dataclass
class ModelShape:
    depth: int = 32
    widths: tuple = (16, 32, 32)
    hidden: int = 0  # 0 -> depth // 2


def init_model(seed: int, seg: SegConfig, shape: ModelShape | None = None) -> ModelParams:
    shape = shape or ModelShape()
    ss = np.random.SeedSequence(seed)
    enc_seed, head_seed, fine_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    encoder = init_encoder(enc_seed, shape.depth, tuple(shape.widths))
    params = ModelParams(encoder=encoder, seg=seg)
    if seg.threshold == "fixed":
        params.fixed_t = ag.param(np.array(seg.t_init), "fixed_t")
    else:
        params.head = init_head(head_seed, shape.depth, shape.hidden or None, seg.t_init)
        if seg.per_path_threshold:
            params.fine_head = init_head(fine_seed, shape.depth, shape.hidden or None, seg.t_init)
    return params


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def seg_loss(pred: ProbabilityMaps, truth) -> ag.Var:
    """Pixel-mean two-class cross-entropy with probabilities clamped to ``[EPS, 1 - EPS]``."""
    fg, bg = pred.foreground, pred.background
    m_f = np.asarray(truth, dtype=float)
    m_b = 1.0 - m_f
    n = m_f.size
    cf = np.clip(fg.value, EPS, 1.0 - EPS)
    cb = np.clip(bg.value, EPS, 1.0 - EPS)
    value = -(m_f * np.log(cf) + m_b * np.log(cb)).sum() / n

    def bw(g):
        in_f = (fg.value > EPS) & (fg.value < 1.0 - EPS)
        in_b = (bg.value > EPS) & (bg.value < 1.0 - EPS)
        return (np.where(in_f, -g * m_f / cf / n, 0.0), np.where(in_b, -g * m_b / cb / n, 0.0))

    return ag.node(np.asarray(value), (fg, bg), bw)


def align_loss(support_feats, query_feats, query_result, support_mask, params: ModelParams,
               out_hw) -> ag.Var | None:
    """Role-swapped loss: segment the support with a prototype pooled from the query.

    The hard query prediction serves as the query mask. Returns None (and
    logs) when that prediction is empty.
    """
    pseudo = query_result.mask
    if not pseudo.any():
        log.debug("empty query prediction; alignment term skipped")
        return None
    back = segment_features(query_feats, pseudo, support_feats, params, out_hw)
    return seg_loss(back.maps, support_mask)


@dataclass
class LossParts:
    total: ag.Var
    seg: ag.Var
    reg: ag.Var | None
    result: object = None


def total_loss(episode, params: ModelParams, use_align: bool = True) -> LossParts:
    sf, qf = encode_pair(episode.support_image, episode.query_image, params)
    hw = np.shape(episode.query_image)
    res = segment_features(sf, episode.support_mask, qf, params, hw)
    l_seg = seg_loss(res.maps, episode.query_mask)
    l_reg = align_loss(sf, qf, res, episode.support_mask, params, hw) if use_align else None
    total = l_seg if l_reg is None else ag.add(l_seg, l_reg)
    return LossParts(total, l_seg, l_reg, res)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    t: int = 0
    buffers: dict = field(default_factory=dict)  # name -> {"m": ..., "v": ...}


def optimizer_step(leaves: dict, grads: dict, state: OptimState, cfg: TrainConfig, t: int) -> bool:
    """Apply one update in place of each leaf's value. Returns False if skipped.

    Leaves get fresh arrays; earlier values are never mutated.
    """
    for name, g in grads.items():
        if g.shape != leaves[name].value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} "
                             f"{leaves[name].value.shape}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        log.warning("non-finite gradient at iteration %d; step skipped", t)
        return False
    lr = cfg.lr(t)
    state.t += 1
    for name, g in grads.items():
        leaf = leaves[name]
        if cfg.optimizer == "adam":
            buf = state.buffers.setdefault(name, {"m": np.zeros_like(g), "v": np.zeros_like(g)})
            buf["m"] = cfg.beta1 * buf["m"] + (1 - cfg.beta1) * g
            buf["v"] = cfg.beta2 * buf["v"] + (1 - cfg.beta2) * g * g
            m_hat = buf["m"] / (1 - cfg.beta1 ** state.t)
            v_hat = buf["v"] / (1 - cfg.beta2 ** state.t)
            step = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        elif cfg.momentum > 0:
            buf = state.buffers.setdefault(name, {"m": np.zeros_like(g)})
            buf["m"] = cfg.momentum * buf["m"] + g
            step = buf["m"]
        else:
            step = g
        leaf.value = leaf.value - lr * step
    return True


def collect_grads(leaves: dict) -> dict:
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
        leaf.grad = None
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, params: ModelParams, state: OptimState, iteration: int,
                    rng_state=None, extra: dict | None = None) -> Path:
    """Manifest plus one tensor file per parameter and optimizer buffer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"iteration={iteration}", f"optim_t={state.t}",
             f"seg={json.dumps(asdict(params.seg), sort_keys=True)}"]
    if rng_state is not None:
        lines.append(f"rng={json.dumps(rng_state, sort_keys=True)}")
    for key, val in sorted((extra or {}).items()):
        lines.append(f"{key}={val}")
    for name, leaf in params.leaves().items():
        fname = f"param.{name}.tensor"
        tio.save(directory / fname, leaf.value)
        lines.append(f"tensor param {name} {fname}")
    for name in sorted(state.buffers):
        for slot, arr in sorted(state.buffers[name].items()):
            fname = f"optim.{name}.{slot}.tensor"
            tio.save(directory / fname, arr)
            lines.append(f"tensor optim {name}.{slot} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def read_checkpoint(directory):
    """Return ``(params, state, iteration, rng_state, extra)``."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise CheckpointError(f"checkpoint manifest not found: expected {manifest}")
    head, tensors, optim = {}, {}, {}
    for line in manifest.read_text().splitlines():
        if line.startswith("tensor "):
            _, kind, name, fname = line.split(" ", 3)
            path = directory / fname
            if not path.exists():
                raise CheckpointError(f"missing checkpoint tensor {path}")
            (tensors if kind == "param" else optim)[name] = tio.load(path)
        elif "=" in line:
            k, v = line.split("=", 1)
            head[k] = v
    seg = SegConfig(**json.loads(head["seg"]))
    enc = {k: v for k, v in tensors.items() if not k.startswith(("head.", "fine_head.", "fixed_t"))}
    depth = enc["proj_fine.bias"].shape[0]
    params = ModelParams(EncoderParams({k: ag.param(v, k) for k, v in enc.items()}, depth), seg)
    head_t = {k[5:]: ag.param(v, k[5:]) for k, v in tensors.items() if k.startswith("head.")}
    fine_t = {k[10:]: ag.param(v, k[10:]) for k, v in tensors.items() if k.startswith("fine_head.")}
    params.head = head_t or None
    params.fine_head = fine_t or None
    if "fixed_t" in tensors:
        params.fixed_t = ag.param(tensors["fixed_t"], "fixed_t")
    state = OptimState(int(head.get("optim_t", 0)))
    for key, arr in optim.items():
        name, slot = key.rsplit(".", 1)
        state.buffers.setdefault(name, {})[slot] = arr
    rng_state = json.loads(head["rng"]) if "rng" in head else None
    extra = {k: v for k, v in head.items() if k not in ("iteration", "optim_t", "seg", "rng")}
    return params, state, int(head["iteration"]), rng_state, extra


def latest_checkpoint(run_dir) -> Path | None:
    run_dir = Path(run_dir)
    if (run_dir / "manifest.txt").exists():
        return run_dir
    cands = sorted(run_dir.glob("ckpt_*"))
    cands = [c for c in cands if (c / "manifest.txt").exists()]
    return cands[-1] if cands else None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_HEADER = ["iteration", "lr", "L_seg", "L_reg", "L"]


class PseudoEpisodeSampler:
    """Draws supervoxel episodes restricted to a split's admitted slices."""

    def __init__(self, dataset: Dataset, split: SplitPlan, cfg: TrainConfig, cache_dir=None):
        self.dataset = dataset
        self.split = split
        self.indices = []
        self.labels = []
        for vol in dataset.volumes:
            if cache_dir is not None:
                sv = cluster_cached(vol.image, vol.volume_id, cache_dir, cfg.sv_k,
                                    cfg.sv_compactness, cfg.sv_min_size, cfg.sv_seed)
            else:
                sv = cluster_supervoxels(vol.image, cfg.sv_k, cfg.sv_compactness,
                                         cfg.sv_min_size, cfg.sv_seed)
            self.labels.append(sv)
            admitted = split.admitted.get(vol.volume_id, [])
            self.indices.append(episode_index(sv, admitted, cfg.min_footprint))
        if not any(self.indices):
            raise SplitError("no volume has an eligible supervoxel in its admitted slices")

    def sample(self, rng):
        while True:
            vi = int(rng.integers(len(self.dataset.volumes)))
            vol = self.dataset.volumes[vi]
            try:
                ep = sample_pseudo_episode(vol.image, self.labels[vi], rng, index=self.indices[vi])
            except NoEligibleSupervoxel:
                continue
            admitted = self.split.admitted[vol.volume_id]
            if ep.meta["support_slice"] not in admitted or ep.meta["query_slice"] not in admitted:
                raise SplitError("sampled a slice outside the admitted training set")
            ep.meta["volume"] = vol.volume_id
            return ep


@dataclass
class TrainResult:
    params: ModelParams
    log: list  # rows matching LOG_HEADER
    out_dir: Path | None = None


def _fmt(x):
    return "" if x is None else repr(float(x))


def meta_train(dataset: Dataset, split: SplitPlan, cfg: TrainConfig, seg: SegConfig,
               shape: ModelShape | None = None, out_dir=None, resume: bool = False,
               cache_dir=None, sampler=None, on_step=None, ckpt_extra: dict | None = None):
    """Train from scratch (or resume) and return a :class:`TrainResult`.

    With ``out_dir`` set, checkpoints go to ``out_dir/ckpt_<iteration>`` and the
    per-iteration losses to ``out_dir/loss.csv``. ``resume`` restarts from the
    newest checkpoint, including the episode generator state.
    """
    out = Path(out_dir) if out_dir is not None else None
    sampler = sampler or PseudoEpisodeSampler(dataset, split, cfg, cache_dir)
    start = 0
    params, state = init_model(cfg.seed, seg, shape), OptimState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rows = []
    if resume and out is not None and (ck := latest_checkpoint(out)) is not None:
        params, state, start, rng_state, _ = read_checkpoint(ck)
        rng.bit_generator.state = rng_state
        rows = _read_log(out / "loss.csv", start)
        log.info("resumed from %s at iteration %d", ck, start)
    leaves = params.leaves()
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)
    try:
        for t in range(start, cfg.iters):
            ep = sampler.sample(rng)
            parts = total_loss(ep, params, cfg.align)
            ag.backward(parts.total)
            grads = collect_grads(leaves)
            row = [t, repr(cfg.lr(t)), _fmt(parts.seg.value),
                   _fmt(None if parts.reg is None else parts.reg.value), _fmt(parts.total.value)]
            optimizer_step(leaves, grads, state, cfg, t)
            rows.append(row)
            if fh is not None:
                writer.writerow(row)
            if on_step is not None:
                on_step(t, parts, ep)
            done = t + 1
            if out is not None and (done % cfg.ckpt_every == 0 or done == cfg.iters):
                fh.flush()
                save_checkpoint(out / f"ckpt_{done:06d}", params, state, done,
                                rng.bit_generator.state, ckpt_extra)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(params, rows, out)


def _read_log(path, upto):
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [[int(r[0]), *r[1:]] for r in reader if r and int(r[0]) < upto]
