"""Prototype-matching segmentation with a query-predicted threshold.

Pipeline per feature path: pool a foreground prototype from the support
features under the support mask, score every query location by negative
scaled cosine similarity, and turn the score map into foreground/background
probabilities with a shifted sigmoid around the threshold ``T``. The two
paths are up-sampled to image size and blended with a balance factor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import DualFeatures, EncoderParams, extract_features, split_batch
from .errors import ConfigError, EmptyMaskError, ShapeError
from .tensor_core import autograd as ag
from .tensor_core import ops

log = logging.getLogger(__name__)

PATHS = ("fine", "coarse")


@dataclass
class SegConfig:
    a: float = 20.0
    alpha: float = 0.8
    paths: str = "dual"  # dual | fine | coarse
    threshold: str = "adaptive"  # adaptive | fixed
    per_path_threshold: bool = False
    t_init: float = -10.0

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError(f"scaling factor a must be > 0, got {self.a}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.paths not in ("dual", "fine", "coarse"):
            raise ConfigError(f"paths must be dual, fine or coarse, got {self.paths!r}")
        if self.threshold not in ("adaptive", "fixed"):
            raise ConfigError(f"threshold must be adaptive or fixed, got {self.threshold!r}")

    @property
    def active_paths(self):
        return PATHS if self.paths == "dual" else (self.paths,)


@dataclass
class ProbabilityMaps:
    """Foreground/background probabilities; ``foreground + background == 1``."""

    foreground: ag.Var
    background: ag.Var

    @classmethod
    def from_foreground(cls, fg) -> "ProbabilityMaps":
        fg = ag.as_var(fg)
        return cls(fg, ag.sub(1.0, fg))

    def arrays(self):
        return self.foreground.value, self.background.value


@dataclass
class ModelParams:
    encoder: EncoderParams
    seg: SegConfig
    head: dict | None = None  # coarse-path threshold head
    fine_head: dict | None = None  # only with per_path_threshold
    fixed_t: ag.Var | None = None
    refine: object = None  # RefineConfig, set by callers that refine

    def leaves(self):
        out = dict(self.encoder.tensors)
        for prefix, head in (("head.", self.head), ("fine_head.", self.fine_head)):
            if head:
                out.update({prefix + k: v for k, v in head.items()})
        if self.fixed_t is not None:
            out["fixed_t"] = self.fixed_t
        return out


# ---------------------------------------------------------------------------
# threshold head
# ---------------------------------------------------------------------------


def init_head(seed: int, depth: int, hidden: int | None = None, t_init: float = 0.0,
              dtype=np.float64, zero_output: bool = True) -> dict:
    """Two dense layers ``depth -> hidden -> 1``; the output bias starts at ``t_init``.

    With ``zero_output`` the output weights start at zero, so every image
    initially gets ``T = t_init`` and the head learns deviations from it.
    """
    hidden = hidden or max(depth // 2, 1)
    rng = np.random.default_rng(seed)
    s1, s2 = np.sqrt(1.0 / depth), np.sqrt(1.0 / hidden)
    w2 = rng.uniform(-s2, s2, (hidden, 1)).astype(dtype)
    if zero_output:
        w2[:] = 0.0
    return {
        "fc1.weight": ag.param(rng.uniform(-s1, s1, (depth, hidden)).astype(dtype), "fc1.weight"),
        "fc1.bias": ag.param(rng.uniform(-s1, s1, hidden).astype(dtype), "fc1.bias"),
        "fc2.weight": ag.param(w2, "fc2.weight"),
        "fc2.bias": ag.param(np.full(1, t_init, dtype=dtype), "fc2.bias"),
    }


def threshold_head(pooled, head: dict) -> ag.Var:
    """Scalar threshold from a pooled channel vector."""
    hidden = ag.relu(ag.dense(pooled, head["fc1.weight"], head["fc1.bias"]))
    out = ag.dense(hidden, head["fc2.weight"], head["fc2.bias"])
    return ag.reshape(out, ())


def predict_threshold(query: DualFeatures, head: dict, path: str = "coarse") -> ag.Var:
    return threshold_head(ag.global_avg_pool(getattr(query, path)), head)


# ---------------------------------------------------------------------------
# prototype, score, threshold
# ---------------------------------------------------------------------------


def masked_average_pool(features, mask) -> ag.Var:
    """Mean feature vector over mask-positive pixels.

    Features ``(h, w, Z)`` are first bilinearly resized to the mask extents.
    """
    features = ag.as_var(features)
    mask = np.asarray(mask, dtype=features.value.dtype)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    total = mask.sum()
    if total <= 0:
        raise EmptyMaskError("empty support mask")
    h, w = mask.shape
    if features.value.shape[:2] != (h, w):
        features = ag.bilinear_resize(features, h, w)
    value = np.tensordot(mask, features.value, axes=([0, 1], [0, 1])) / total
    return ag.node(value, (features,), lambda g: (mask[..., None] * (g / total),))


def _cosine_forward(q, p):
    qn = np.linalg.norm(q, axis=-1)
    pn = float(np.linalg.norm(p))
    denom = qn * pn
    ok = denom > 0
    if not ok.all():
        log.warning("zero-norm feature vector in cosine similarity; treating cosine as 0")
    cos = np.where(ok, (q @ p) / np.where(ok, denom, 1.0), 0.0)
    return cos, qn, pn, ok


def anomaly_score_map(query, prototype, a: float = 20.0) -> ag.Var:
    """``S = -a * cos(query(h, w), prototype)`` over a ``(h, w, Z)`` map."""
    query, prototype = ag.as_var(query), ag.as_var(prototype)
    q, p = query.value, prototype.value
    if q.shape[-1] != p.shape[-1]:
        raise ShapeError(f"query depth {q.shape[-1]} does not match prototype depth {p.shape[-1]}")
    cos, qn, pn, ok = _cosine_forward(q, p)

    def bw(g):
        gc = np.where(ok, -a * g, 0.0)
        safe_qn = np.where(ok, qn, 1.0)
        safe_pn = pn if pn > 0 else 1.0
        inv = gc / (safe_qn * safe_pn)
        gq = inv[..., None] * p - (gc * cos / safe_qn ** 2)[..., None] * q
        gp = np.tensordot(inv, q, axes=(list(range(inv.ndim)), list(range(inv.ndim))))
        gp = gp - (gc * cos).sum() / safe_pn ** 2 * p
        return gq, gp

    return ag.node(-a * cos, (query, prototype), bw)


def soft_threshold(scores, threshold) -> ProbabilityMaps:
    """Foreground ``1 - sigmoid(S - T)``; background is its complement."""
    scores, threshold = ag.as_var(scores), ag.as_var(threshold)
    fg = ops.sigmoid(threshold.value - scores.value)

    def bw(g):
        d = g * fg * (1.0 - fg)
        return -d, np.asarray(d.sum()).reshape(threshold.value.shape)

    return ProbabilityMaps.from_foreground(ag.node(fg, (scores, threshold), bw))


def upsample(maps: ProbabilityMaps, h: int, w: int) -> ProbabilityMaps:
    fg = maps.foreground
    fh, fw = fg.value.shape
    if (fh, fw) == (h, w):
        return maps
    up = ag.bilinear_resize(ag.reshape(fg, (fh, fw, 1)), h, w)
    return ProbabilityMaps.from_foreground(ag.reshape(up, (h, w)))


def fuse_dual(fine: ProbabilityMaps, coarse: ProbabilityMaps, alpha: float,
              check: bool = True) -> ProbabilityMaps:
    """``alpha * fine + (1 - alpha) * coarse``, both already at image size."""
    if check and not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if fine.foreground.shape != coarse.foreground.shape:
        raise ShapeError(f"fusion needs equal extents, got {fine.foreground.shape} "
                         f"and {coarse.foreground.shape}")
    fg = ag.add(ag.scale(fine.foreground, alpha), ag.scale(coarse.foreground, 1.0 - alpha))
    bg = ag.add(ag.scale(fine.background, alpha), ag.scale(coarse.background, 1.0 - alpha))
    return ProbabilityMaps(fg, bg)


def hard_mask(maps: ProbabilityMaps) -> np.ndarray:
    fg, bg = maps.arrays()
    return (bg <= fg).astype(np.uint8)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


@dataclass
class PathResult:
    prototype: np.ndarray  # initial prototype (from the source image)
    final_prototype: np.ndarray  # after refinement, or the initial one
    threshold: float
    maps: ProbabilityMaps  # feature resolution
    maps_up: ProbabilityMaps  # image resolution
    refine_losses: list = field(default_factory=list)


@dataclass
class SegmentResult:
    paths: dict
    maps: ProbabilityMaps
    mask: np.ndarray
    threshold: ag.Var

    @property
    def foreground(self):
        return self.maps.foreground.value


def path_threshold(params: ModelParams, target: DualFeatures, path: str) -> ag.Var:
    if params.seg.threshold == "fixed":
        return params.fixed_t
    if path == "fine" and params.seg.per_path_threshold:
        return predict_threshold(target, params.fine_head, "fine")
    return predict_threshold(target, params.head, "coarse")


def _path_result(source, source_mask, target, params, path, t, out_hw, refine_cfg=None,
                 prototype=None) -> PathResult:
    seg = params.seg
    src, tgt = getattr(source, path), getattr(target, path)
    proto = masked_average_pool(src, source_mask)
    p_used, losses = proto, []
    if prototype is not None:
        p_used = ag.Var(np.asarray(prototype, dtype=float))
    elif refine_cfg is not None and refine_cfg.enabled:
        from .refine import refine_trajectory

        traj = refine_trajectory(tgt.value, proto.value, float(t.value), refine_cfg, seg.a)
        p_used = ag.Var(traj[-1][0])
        losses = [loss for _p, loss in traj]
    maps = soft_threshold(anomaly_score_map(tgt, p_used, seg.a), t)
    return PathResult(proto.value, p_used.value, float(t.value), maps, upsample(maps, *out_hw),
                      losses)


def segment_features(source: DualFeatures, source_mask, target: DualFeatures,
                     params: ModelParams, out_hw, refine_cfg=None,
                     prototypes: dict | None = None) -> SegmentResult:
    """Segment ``target`` using the prototype pooled from ``source`` under ``source_mask``.

    ``prototypes`` (path -> vector) overrides the pooled and refined
    prototypes; used to replay points along a refinement trajectory.
    """
    seg = params.seg
    per_path = {}
    shared_t = path_threshold(params, target, "coarse")
    for path in seg.active_paths:
        own = path == "fine" and seg.per_path_threshold and seg.threshold == "adaptive"
        t = path_threshold(params, target, "fine") if own else shared_t
        given = None if prototypes is None else prototypes[path]
        per_path[path] = _path_result(source, source_mask, target, params, path, t,
                                      tuple(out_hw), refine_cfg, given)
    if seg.paths == "dual":
        fused = fuse_dual(per_path["fine"].maps_up, per_path["coarse"].maps_up, seg.alpha)
    else:
        fused = per_path[seg.paths].maps_up
    return SegmentResult(per_path, fused, hard_mask(fused), shared_t)


def encode_pair(support_image, query_image, params: ModelParams):
    """Encode support and query in one batch through the shared weights."""
    batch = np.stack([np.asarray(support_image, float), np.asarray(query_image, float)])[..., None]
    feats = extract_features(batch, params.encoder)
    return split_batch(feats, 0), split_batch(feats, 1)


def segment_episode(episode, params: ModelParams, refine_cfg=None) -> SegmentResult:
    """Full test-time pass on one episode.

    ``refine_cfg`` defaults to ``params.refine``; pass a config with
    ``enabled=False`` to skip prototype refinement.
    """
    if refine_cfg is None:
        refine_cfg = params.refine
    sf, qf = encode_pair(episode.support_image, episode.query_image, params)
    return segment_features(sf, episode.support_mask, qf, params,
                            np.shape(episode.query_image), refine_cfg)
