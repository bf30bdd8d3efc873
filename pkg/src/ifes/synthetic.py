"""Deterministic synthetic registered pairs for tests and demos.

The infrared image holds a few warm blobs over a cool, slowly varying
background; the visible image holds edges and texture with soft shading. Both
share the same geometry, so every pair is registered by construction.
"""

from __future__ import annotations

import numpy as np


def synthetic_pair(size=64, seed=0):
    """Return ``(infrared, visible)`` as (size, size) arrays on [0, 1]."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    ir = 0.15 + 0.1 * y
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.06, 0.15)
        ir = ir + rng.uniform(0.4, 0.7) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))

    vis = 0.35 + 0.25 * x
    top, left = rng.uniform(0.1, 0.4, size=2)
    box = (y > top) & (y < top + 0.35) & (x > left) & (x < left + 0.45)
    vis = vis + 0.25 * box
    freq = rng.uniform(6, 10)
    vis = vis + 0.08 * np.sin(2 * np.pi * freq * (x + 0.5 * y))
    return np.clip(ir, 0, 1), np.clip(vis, 0, 1)


def synthetic_pairs(count, size=64, seed=0):
    return [synthetic_pair(size, seed + k) for k in range(count)]
