"""Small synthetic feature maps for refinement checks."""
import numpy as np


def refine_episode(rng, h=6, w=6, z=8):
    """Query features with a blob near a direction ``d``; ``p0`` is a noisy ``d``.

    Returns ``(query, p0, threshold)`` with ``threshold`` placed so that the
    initial hard mask is neither empty nor full.
    """
    d = rng.normal(size=z)
    q = rng.normal(size=(h, w, z))
    blob = rng.uniform(size=(h, w)) < 0.35
    q[blob] = d + 0.4 * rng.normal(size=(int(blob.sum()), z))
    p0 = d + 0.3 * rng.normal(size=z)
    cos = (q @ p0) / (np.linalg.norm(q, axis=-1) * np.linalg.norm(p0))
    # foreground where 20 * cos + T >= 0; put T between the blob and the rest
    t = -20.0 * float(np.median(cos[blob]) + np.median(cos[~blob])) / 2.0
    return q, p0, t
