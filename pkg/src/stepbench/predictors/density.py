"""Density estimation over sampled trajectories (fallback for models without
a closed-form likelihood)."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from ..errors import StepError

BANDWIDTH_FLOOR = 1e-3


class GaussianKDE:
    """Product-Gaussian kernel density with per-dimension Silverman bandwidth.

    Any estimator exposing ``eval(y) -> log-density`` and ``degenerate`` can
    replace it in :func:`fit_density_estimator`.
    """

    def __init__(self, samples, floor: float = BANDWIDTH_FLOOR):
        x = np.asarray(samples, float)
        x = x.reshape(len(x), -1)
        k, d = x.shape
        if k < 2:
            raise StepError("INSUFFICIENT_SAMPLES", "density estimation needs k >= 2")
        self.samples = x
        self.degenerate = bool(np.all(x == x[0]))
        sd = x.std(axis=0, ddof=1)
        factor = (4.0 / ((d + 2) * k)) ** (1.0 / (d + 4))
        self.bandwidth = np.maximum(sd * factor, floor)
        self._log_norm = -0.5 * d * math.log(2 * math.pi) - float(np.sum(np.log(self.bandwidth))) - math.log(k)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def eval(self, y) -> np.ndarray | float:
        y = np.asarray(y, float)
        single = y.size == self.dim
        y = y.reshape(-1, self.dim)
        z = (y[:, None, :] - self.samples[None, :, :]) / self.bandwidth
        out = logsumexp(-0.5 * np.sum(z * z, axis=-1), axis=1) + self._log_norm
        return float(out[0]) if single else out


def fit_density_estimator(samples) -> GaussianKDE:
    """Fit a KDE to k sampled trajectories (any trailing shape, flattened per sample)."""
    return GaussianKDE(samples)
