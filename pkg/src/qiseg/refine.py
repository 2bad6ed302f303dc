"""Test-time prototype refinement.

Each iteration rebuilds the query feature map with the current prototype
written into the predicted-foreground locations, scores the rebuilt map
against the original with a min-max-normalized binary cross-entropy, and
takes a gradient step on the prototype alone. The encoder, the threshold
head and ``T`` stay fixed.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .protoseg import _cosine_forward
from .tensor_core import ops

log = logging.getLogger(__name__)

EPS = 1e-7

_lock = threading.Lock()
_calls = 0


def call_count() -> int:
    """Number of ``refine_trajectory`` invocations since the last reset."""
    return _calls


def reset_call_count() -> None:
    global _calls
    with _lock:
        _calls = 0


@dataclass
class RefineConfig:
    v: float = 0.01
    n_iters: int = 7
    enabled: bool = True
    replace_convention: str = "foreground"  # foreground | background

    def __post_init__(self):
        if self.v < 0:
            raise ConfigError(f"refinement step size must be >= 0, got {self.v}")
        if self.n_iters < 0:
            raise ConfigError(f"refinement iteration count must be >= 0, got {self.n_iters}")
        if self.replace_convention not in ("foreground", "background"):
            raise ConfigError(f"replace_convention must be foreground or background, "
                              f"got {self.replace_convention!r}")


def predicted_mask(query, p, threshold: float, a: float) -> np.ndarray:
    """Hard mask at feature resolution for prototype ``p`` and fixed ``T``."""
    cos, *_ = _cosine_forward(query, p)
    fg = ops.sigmoid(threshold + a * cos)
    return (1.0 - fg <= fg).astype(np.uint8)


def _replaced(mask, convention):
    mask = np.asarray(mask).astype(bool)
    return mask if convention == "foreground" else ~mask


def reconstruct_features(query, mask, p, convention: str = "foreground") -> np.ndarray:
    """Copy of ``query`` with ``p`` written at the replaced locations."""
    out = np.array(query, dtype=float, copy=True)
    out[_replaced(mask, convention)] = p
    return out


def _normalizer(original):
    lo, hi = float(np.min(original)), float(np.max(original))
    return lo, hi - lo


def reconstruction_loss(rebuilt, original) -> float:
    lo, span = _normalizer(original)
    if span <= 0:
        log.warning("degenerate original feature map (max == min); reconstruction loss set to 0")
        return 0.0
    y = (np.asarray(original) - lo) / span
    q = np.clip((np.asarray(rebuilt) - lo) / span, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)))


def grad_wrt_prototype(query, mask, p, original, convention: str = "foreground",
                       upstream: float = 1.0) -> np.ndarray:
    """Gradient of the reconstruction loss w.r.t. ``p`` with the mask held fixed."""
    sel = _replaced(mask, convention)
    p = np.asarray(p, dtype=float)
    if not sel.any():
        return np.zeros_like(p)
    lo, span = _normalizer(original)
    if span <= 0:
        return np.zeros_like(p)
    y = (np.asarray(original)[sel] - lo) / span
    raw = (p - lo) / span
    inside = (raw > EPS) & (raw < 1.0 - EPS)
    q = np.clip(raw, EPS, 1.0 - EPS)
    # mean over all rebuilt elements, each replaced location contributes one copy of p
    dq = (q - y) / (q * (1.0 - q)) / np.size(original)
    return upstream * np.where(inside, dq.sum(axis=0), 0.0) / span


def refine_trajectory(query, p0, threshold: float, cfg: RefineConfig, a: float = 20.0):
    """Prototypes and losses ``[(p(0), L(0)), ..., (p(N), L(N))]``.

    ``L(n)`` is evaluated with the mask predicted from ``p(n)``. With ``v = 0``
    or ``N = 0`` only the starting point is returned.
    """
    global _calls
    with _lock:
        _calls += 1
    query = np.asarray(query, dtype=float)
    p = np.array(p0, dtype=float, copy=True)
    steps = 0 if cfg.v == 0 else cfg.n_iters
    traj = []
    for n in range(steps + 1):
        mask = predicted_mask(query, p, threshold, a)
        rebuilt = reconstruct_features(query, mask, p, cfg.replace_convention)
        traj.append((p.copy(), reconstruction_loss(rebuilt, query)))
        if n == steps:
            break
        p = p - cfg.v * grad_wrt_prototype(query, mask, p, query, cfg.replace_convention)
    return traj


def refine_prototype(query, p0, threshold: float, cfg: RefineConfig, a: float = 20.0) -> np.ndarray:
    return refine_trajectory(query, p0, threshold, cfg, a)[-1][0]
