"""Prediction-noise injection for NOCS maps.

Stands in for the error profile of a trained network: isotropic coordinate
noise, random pixel dropout, mask boundary erosion, and gross coordinate
outliers. Corrupted coordinates are intentionally not clipped back into
[0, 1]^3, so the injected noise keeps its nominal standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion

from ..nocs import NocsMap


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0  # NOCS units, isotropic Gaussian per coordinate
    dropout: float = 0.0  # fraction of masked pixels dropped
    erosion_radius: int = 0  # mask erosion iterations (3x3 structuring element)
    outlier_rate: float = 0.0  # fraction of surviving pixels replaced uniformly

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        for name in ("dropout", "outlier_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.erosion_radius < 0:
            raise ValueError("erosion radius must be nonnegative")

    @property
    def is_noop(self) -> bool:
        return self.sigma == 0.0 and self.dropout == 0.0 and self.erosion_radius == 0 and self.outlier_rate == 0.0


def corrupt_map(nmap: NocsMap, noise: NoiseModel, rng: np.random.Generator) -> NocsMap:
    """Apply the noise model to one map; deterministic given the generator state.

    Order: coordinate noise, dropout, mask erosion, outlier replacement.
    """
    if noise.is_noop:
        return nmap.copy()
    coords = nmap.coords.astype(np.float64)
    mask = nmap.mask.copy()

    if noise.sigma > 0:
        idx = np.nonzero(mask)
        coords[idx] += rng.normal(0.0, noise.sigma, size=(len(idx[0]), 3))

    if noise.dropout > 0:
        idx = np.nonzero(mask)
        drop = rng.random(len(idx[0])) < noise.dropout
        mask[idx[0][drop], idx[1][drop]] = False

    if noise.erosion_radius > 0:
        mask = binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), iterations=noise.erosion_radius)

    if noise.outlier_rate > 0:
        idx = np.nonzero(mask)
        hit = rng.random(len(idx[0])) < noise.outlier_rate
        coords[idx[0][hit], idx[1][hit]] = rng.uniform(0.0, 1.0, size=(int(hit.sum()), 3))

    return NocsMap(coords.astype(np.float32), mask, nmap.view)


def corrupt(maps, noise: NoiseModel, rng: np.random.Generator) -> list[NocsMap]:
    """Corrupt a sequence of maps with independent draws in sequence order."""
    return [corrupt_map(m, noise, rng) for m in maps]
