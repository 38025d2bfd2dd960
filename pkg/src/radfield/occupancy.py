"""Maximum occupancy grid: a decayed running-max density cache for pruning.

The cache answers "could anything be here under the audio conditions seen
recently". Training refreshes it every few steps with one random condition
and a jittered point per voxel, decaying stored values first so that stale
density from earlier in training is forgotten over a few hundred steps; a
pure (undecayed) maximum over many conditions runs once after the head
stage, so the grid that ships with a checkpoint is the literal condition
maximum of the converged field. Without the decay the grid is the union of
every transient the field ever produced: the first snapshots of a forming
field mark essentially the whole box, keep-first-N pruning then confines
sampling to the front of every ray, and the field settles into a haze that
only renders correctly through that truncated quadrature.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

UPDATE_EVERY = 16      # training steps between single-condition updates
WARMUP_STEPS = 500     # pruning disabled while the field is still forming
CONSOLIDATE_CONDITIONS = 32
DECAY = 0.95           # per-update shrink of stored values before the max

DensityFn = Callable[[np.ndarray], np.ndarray]  # [N,3] -> sigma [N]


class OccupancyGrid:
    """[R,R,R] running max of sigma with a derived boolean bitfield."""

    def __init__(self, resolution: int = 64, tau: float = 0.01):
        self.resolution = resolution
        self.tau = tau
        self.values = np.zeros((resolution,) * 3, dtype=np.float32)
        self.bitfield = np.zeros((resolution,) * 3, dtype=bool)

    def reset(self) -> None:
        self.values[:] = 0.0
        self.bitfield[:] = False

    def _voxel_centers_jittered(self, rng: np.random.Generator | None) -> np.ndarray:
        r = self.resolution
        ii, jj, kk = np.meshgrid(*([np.arange(r)] * 3), indexing="ij")
        base = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float32)
        if rng is None:
            off = 0.5
        else:
            off = rng.random((base.shape[0], 3), dtype=np.float32)
        return (base + off) / r

    def update(self, density_fn: DensityFn,
               rng: np.random.Generator | None = None,
               chunk: int = 131072, decay: float = DECAY) -> None:
        """Decay stored values, then max against one condition's densities.

        One jittered point per voxel. decay=1 gives the pure running max
        (used by recompute, where staleness cannot exist by construction).
        """
        pts = self._voxel_centers_jittered(rng)
        sigma = np.empty(pts.shape[0], dtype=np.float32)
        for lo in range(0, pts.shape[0], chunk):
            hi = min(lo + chunk, pts.shape[0])
            sigma[lo:hi] = density_fn(pts[lo:hi])
        self.values *= decay
        np.maximum(self.values, sigma.reshape(self.values.shape), out=self.values)
        self.bitfield = self.values > self.tau

    def recompute(self, density_fns: list[DensityFn],
                  rng: np.random.Generator | None = None) -> None:
        """Pure max over many conditions (post-head-stage consolidation)."""
        self.reset()
        for fn in density_fns:
            self.update(fn, rng, decay=1.0)

    def voxel_of(self, x: np.ndarray) -> np.ndarray:
        """Voxel index per point; boundary points go to floor(x*R), clamped."""
        v = np.floor(np.asarray(x) * self.resolution).astype(np.int64)
        return np.clip(v, 0, self.resolution - 1)

    def occupied_at(self, x: np.ndarray) -> np.ndarray:
        """Bitfield lookup for [..., 3] points in the unit cube."""
        v = self.voxel_of(x)
        return self.bitfield[v[..., 0], v[..., 1], v[..., 2]]

    def fraction_occupied(self) -> float:
        return float(self.bitfield.mean())
