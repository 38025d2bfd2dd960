"""Audio-driven head field: decomposed audio-spatial grids plus small MLPs.

A sample's spatial feature f modulates the audio code into a low-dimensional
coordinate x_a = sigmoid(mlp(a, f)), which indexes a separate D-dim feature
grid. Fetch cost per sample per level is 2^3 + 2^D corners instead of the
2^(3+D) a joint (3+D)-dim grid would need; the counters on the two encoders
make that arithmetic checkable.

Density uses a truncated exp (clamped pre-activation) and color a sigmoid,
conditioned on a per-frame appearance embedding and a scalar eye-openness
feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import HashGridEncoder
from .nets import mlp_apply, mlp_init

AUDIO_DIM_DEFAULT = 2
EMBED_DIM = 8
HIDDEN = 64
GEO_FEATURES = 64
# The eye feature is an image-area fraction, typically <= 0.005. Fed raw it
# is ~300x smaller than the grid features and its weight column never trains,
# so rescale it to span roughly [0, 1] before the density MLP.
EYE_GAIN = 200.0
# Density head bias at init. sigma = exp(preactivation), so 0 bias means
# sigma ~ 1 everywhere: the first occupancy snapshots then flag the whole
# box (tau = 0.01), pruning degenerates to "keep the front of every ray",
# and the field settles into a haze that only renders correctly through
# that truncated quadrature. Start empty instead (exp(-5) ~ 0.007 < tau);
# voxels enter the running max only where supervision grows real density.
EMPTY_INIT_LOG_SIGMA = -5.0


class HeadModel:
    """Spatial+audio grid encoders and the density/color MLP stack."""

    def __init__(self, num_frames: int, audio_dim: int = AUDIO_DIM_DEFAULT,
                 levels: int = 16, base_resolution: int = 16,
                 max_resolution: int = 2048, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if audio_dim not in (1, 2, 3):
            raise ValueError(f"audio_dim must be 1, 2 or 3, got {audio_dim}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.audio_dim = audio_dim
        self.num_frames = num_frames
        self.dtype = dtype

        self.spatial = HashGridEncoder(3, levels=levels,
                                       base_resolution=base_resolution,
                                       max_resolution=max_resolution,
                                       rng=rng, dtype=dtype)
        self.audio_grid = HashGridEncoder(audio_dim, levels=levels,
                                          base_resolution=base_resolution,
                                          max_resolution=max_resolution,
                                          rng=rng, dtype=dtype)
        feat = self.spatial.output_dim

        self.params: dict[str, Tensor] = {}
        mlp_init(rng, "head.audio_mlp", [64 + feat, HIDDEN, HIDDEN, audio_dim],
                 self.params, dtype=dtype)
        dens_in = feat + self.audio_grid.output_dim + 1 + EMBED_DIM
        mlp_init(rng, "head.density_mlp", [dens_in, HIDDEN, HIDDEN,
                                           1 + GEO_FEATURES], self.params, dtype=dtype)
        self.params["head.density_mlp.2.b"].data[0] += EMPTY_INIT_LOG_SIGMA
        mlp_init(rng, "head.color_mlp", [GEO_FEATURES, HIDDEN, 3],
                 self.params, dtype=dtype)
        self.params["head.embed"] = Tensor(
            rng.normal(0.0, 0.01, size=(num_frames, EMBED_DIM)).astype(dtype),
            requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["head.spatial.tables"] = self.spatial.tables
        out["head.audio_grid.tables"] = self.audio_grid.tables
        return out

    def grid_parameter_names(self) -> set[str]:
        return {"head.spatial.tables", "head.audio_grid.tables"}

    # -- queries ---------------------------------------------------------------

    def audio_coordinate(self, a: Tensor, f: Tensor) -> Tensor:
        """Compress the 64-dim code to x_a in [0,1]^D, modulated by f."""
        return ad.sigmoid(mlp_apply(self.params, "head.audio_mlp",
                                    ad.concat([a, f], axis=1), 3))

    def query(self, x, a: Tensor, e: Tensor, emb: Tensor,
              want_color: bool = True):
        """Field evaluation at [N,3] points.

        a: [N,64] audio codes, e: [N,1] eye feature, emb: [N,8] appearance.
        Returns (sigma [N,1], rgb [N,3] or None, x_a [N,D]).
        """
        f = self.spatial.encode(x)
        xa = self.audio_coordinate(a, f)
        g = self.audio_grid.encode(xa)
        sig_h = mlp_apply(self.params, "head.density_mlp",
                          ad.concat([f, g, e * EYE_GAIN, emb], axis=1), 3)
        sigma = ad.truncated_exp(sig_h[:, 0:1])
        if not want_color:
            return sigma, None, xa
        h = sig_h[:, 1:1 + GEO_FEATURES]
        rgb = ad.sigmoid(mlp_apply(self.params, "head.color_mlp", h, 2))
        return sigma, rgb, xa

    def density(self, x: np.ndarray, a: np.ndarray, e: float) -> np.ndarray:
        """Tape-free sigma at [N,3] points for one audio code (occupancy path)."""
        n = x.shape[0]
        with ad.no_grad():
            av = np.broadcast_to(np.asarray(a, dtype=self.dtype), (n, 64))
            ev = np.full((n, 1), e, dtype=self.dtype)
            emb = np.broadcast_to(self.params["head.embed"].data[0], (n, EMBED_DIM))
            sigma, _, _ = self.query(Tensor(np.asarray(x, dtype=self.dtype)),
                                     Tensor(np.ascontiguousarray(av)),
                                     Tensor(ev), Tensor(np.ascontiguousarray(emb)),
                                     want_color=False)
        return sigma.data[:, 0]

    def embedding_rows(self, frames: np.ndarray) -> Tensor:
        """Per-sample appearance embeddings; test time reuses training row 0."""
        frames = np.clip(np.asarray(frames, dtype=np.int64), 0, self.num_frames - 1)
        return ad.take_rows(self.params["head.embed"], frames)


def eye_feature_from_landmarks(contours, image_area: float) -> float:
    """Fraction of image area inside the eye contours (shoelace polygons).

    contours: sequence of [K>=3, 2] point arrays, one per eye.
    """
    if image_area <= 0:
        raise ValueError("image_area must be positive")
    total = 0.0
    for pts in contours:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
            raise ValueError(f"eye contour needs >=3 2D points, got {pts.shape}")
        x, y = pts[:, 0], pts[:, 1]
        total += 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return float(np.clip(total / image_area, 0.0, 0.01))
