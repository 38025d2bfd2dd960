"""Pseudo-3D torso: a deformable 2D field rendered with one sample per pixel.

Pixel coordinates deform conditioned on head pose (flattened rotation and
translation), index a 2D feature grid, and a small MLP emits color and
alpha directly: no ray marching. The deformation MLP's final layer starts
at zero so training begins from the undeformed grid.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import HashGridEncoder
from .nets import mlp_apply, mlp_init

POSE_DIM = 12  # 3x3 rotation flattened + translation
EMBED_DIM = 8
HIDDEN = 64


def pose_code(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """Flatten (R, t) into the 12-float conditioning vector."""
    rotation = np.asarray(rotation, dtype=np.float32)
    translation = np.asarray(translation, dtype=np.float32)
    if rotation.shape != (3, 3) or translation.shape != (3,):
        raise ValueError(f"pose must be (3,3) and (3,), got "
                         f"{rotation.shape} and {translation.shape}")
    return np.concatenate([rotation.ravel(), translation])


class TorsoModel:
    """Deformation MLP, 2D feature grid, and the color/alpha head."""

    def __init__(self, num_frames: int, levels: int = 16,
                 base_resolution: int = 16, max_resolution: int = 2048,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.num_frames = num_frames
        self.dtype = dtype
        self.grid = HashGridEncoder(2, levels=levels,
                                    base_resolution=base_resolution,
                                    max_resolution=max_resolution,
                                    rng=rng, dtype=dtype)
        self.params: dict[str, Tensor] = {}
        mlp_init(rng, "torso.deform_mlp", [2 + POSE_DIM, HIDDEN, HIDDEN, 2],
                 self.params, zero_last=True, dtype=dtype)
        mlp_init(rng, "torso.mlp", [self.grid.output_dim + EMBED_DIM, HIDDEN, 4],
                 self.params, dtype=dtype)
        self.params["torso.embed"] = Tensor(
            rng.normal(0.0, 0.01, size=(num_frames, EMBED_DIM)).astype(dtype),
            requires_grad=True)
        self.eval_count = 0  # pixels queried, for the one-sample-per-pixel check

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["torso.grid.tables"] = self.grid.tables
        return out

    def grid_parameter_names(self) -> set[str]:
        return {"torso.grid.tables"}

    def query(self, x_t, pose: Tensor, emb: Tensor):
        """(color [N,3], alpha [N,1], deformation [N,2]) at [N,2] pixel coords."""
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, dtype=self.dtype))
        self.eval_count += x_t.data.shape[0]
        delta = mlp_apply(self.params, "torso.deform_mlp",
                          ad.concat([x_t, pose], axis=1), 3)
        warped = ad.clip(x_t + delta, 0.0, 1.0)
        f_t = self.grid.encode(warped)
        out = mlp_apply(self.params, "torso.mlp",
                        ad.concat([f_t, emb], axis=1), 2)
        rgb = ad.sigmoid(out[:, 0:3])
        alpha = ad.sigmoid(out[:, 3:4])
        return rgb, alpha, delta

    def embedding_rows(self, frames: np.ndarray) -> Tensor:
        frames = np.clip(np.asarray(frames, dtype=np.int64), 0, self.num_frames - 1)
        return ad.take_rows(self.params["torso.embed"], frames)

    def render(self, rotation: np.ndarray, translation: np.ndarray,
               frame: int, height: int, width: int,
               chunk: int = 65536) -> np.ndarray:
        """RGBA image [H,W,4]: one field evaluation per pixel, no marching."""
        cols, rows = np.meshgrid(np.arange(width), np.arange(height))
        x_t = np.stack([(cols.ravel() + 0.5) / width,
                        (rows.ravel() + 0.5) / height], axis=1).astype(self.dtype)
        pc = pose_code(rotation, translation)
        out = np.empty((height * width, 4), dtype=self.dtype)
        with ad.no_grad():
            for lo in range(0, x_t.shape[0], chunk):
                hi = min(lo + chunk, x_t.shape[0])
                n = hi - lo
                pose = Tensor(np.broadcast_to(pc, (n, POSE_DIM)).copy())
                emb = self.embedding_rows(np.full(n, frame))
                rgb, alpha, _ = self.query(x_t[lo:hi], pose, emb)
                out[lo:hi, :3] = rgb.data
                out[lo:hi, 3:] = alpha.data
        return out.reshape(height, width, 4)
