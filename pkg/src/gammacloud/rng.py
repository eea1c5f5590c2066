"""Seeded random streams with Gaussian and Marsaglia-Tsang Gamma draws."""
from __future__ import annotations

import numpy as np

MAX_REJECTION_ROUNDS = 64


class RngStream:
    """One exclusive random stream; workers get independent streams via ``spawn``."""

    def __init__(self, seed: int = 0, worker: int = 0):
        self.seed = int(seed)
        self.worker = int(worker)
        self.generator = np.random.default_rng(np.random.SeedSequence([self.seed, self.worker]))
        self.rejections = 0

    def spawn(self, worker: int) -> "RngStream":
        return RngStream(self.seed, worker)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self.generator.integers(lo, hi, size=shape)

    def gamma(self, k, theta, shape) -> np.ndarray:
        """Gamma(shape=k, scale=theta) draws; k and theta broadcast to ``shape``.

        Marsaglia-Tsang squeeze/rejection for k >= 1; for k < 1 a Gamma(k + 1)
        draw is boosted by U^(1/k), evaluated in log space.
        """
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        k = np.broadcast_to(np.asarray(k, dtype=np.float64), shape).ravel()
        theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), shape).ravel()
        if np.any(k <= 0) or np.any(theta <= 0):
            raise ValueError("gamma: shape and scale must be positive")
        boost = k < 1.0
        kk = np.where(boost, k + 1.0, k)
        d = kk - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(k.size)
        pending = np.arange(k.size)
        for _ in range(MAX_REJECTION_ROUNDS):
            if pending.size == 0:
                break
            x = self.generator.standard_normal(pending.size)
            cp, dp = c[pending], d[pending]
            v = (1.0 + cp * x) ** 3
            u = self.generator.random(pending.size)
            pos = v > 0
            logv = np.log(np.where(pos, v, 1.0))
            x2 = x * x
            ok = pos & ((u < 1.0 - 0.0331 * x2 * x2)
                        | (np.log(np.maximum(u, 1e-300)) < 0.5 * x2 + dp * (1.0 - v + logv)))
            out[pending[ok]] = dp[ok] * v[ok]
            pending = pending[~ok]
            self.rejections += int(pending.size)
        else:
            if pending.size:
                raise RuntimeError("gamma: rejection loop did not terminate")
        if boost.any():
            ib = np.nonzero(boost)[0]
            u = self.generator.random(ib.size)
            logu = np.log(np.maximum(u, 1e-300))
            out[ib] = np.exp(np.log(out[ib]) + logu / k[ib])
        return (out * theta).reshape(shape)
