"""Gaussian product-kernel density estimate on standardized coordinates.

Shared by the warp sampler and the coverage confidence regions.  Each
dimension is standardized by its sample mean and standard deviation and
gets the Scott bandwidth n**(-1/(d+4)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BANDWIDTH_FLOOR = 1e-6


def scott_bandwidth(n: int, d: int) -> float:
    return float(n) ** (-1.0 / (d + 4))


@dataclass
class ProductKDE:
    points: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    bandwidth: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, points) -> ProductKDE:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("need at least two d-dimensional points")
        n, d = pts.shape
        mean = pts.mean(axis=0)
        sd = pts.std(axis=0, ddof=1)
        warnings = []
        bw = np.full(d, scott_bandwidth(n, d))
        scale = sd.copy()
        for k in range(d):
            if not sd[k] > 0:
                # zero spread: keep the unit scale and shrink the kernel to the floor
                scale[k] = 1.0
                bw[k] = BANDWIDTH_FLOOR
                warnings.append(f"dimension {k} has zero variance; bandwidth floored at {BANDWIDTH_FLOOR}")
        bw = np.maximum(bw, BANDWIDTH_FLOOR)
        z = (pts - mean) / scale
        return cls(z, mean, scale, bw, warnings)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def standardize(self, x) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.mean) / self.scale

    def density_standardized(self, z: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """KDE density at standardized points `z` (density w.r.t. standardized units)."""
        z = np.atleast_2d(z)
        d = self.points.shape[1]
        norm = self.n * np.prod(self.bandwidth) * (2 * math.pi) ** (d / 2)
        out = np.empty(z.shape[0])
        for a in range(0, z.shape[0], chunk):
            u = (z[a:a + chunk, None, :] - self.points[None, :, :]) / self.bandwidth
            out[a:a + chunk] = np.exp(-0.5 * np.sum(u * u, axis=2)).sum(axis=1) / norm
        return out

    def density(self, x) -> np.ndarray:
        return self.density_standardized(self.standardize(x))

    def sample_standardized(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.integers(0, self.n, size=size)
        return self.points[idx] + rng.standard_normal((size, self.points.shape[1])) * self.bandwidth

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.sample_standardized(rng, size) * self.scale + self.mean
