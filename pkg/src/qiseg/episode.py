from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Episode:
    """One 1-way 1-shot task: a labelled support slice and a query slice.

    Images are ``(H, W)`` float arrays; masks are ``(H, W)`` binary arrays.
    ``query_mask`` is the ground truth (pseudo-label during meta-training).
    """

    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_mask: np.ndarray | None = None
    class_id: int = 0
    meta: dict = field(default_factory=dict)
