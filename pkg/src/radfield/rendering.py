"""Rays, occupancy-pruned marching, volume quadrature, compositing.

Sampling and pruning run in plain numpy (sample positions carry no
gradient); the field outputs at the surviving samples are scattered into
[rays, max_samples] rectangles on the tape, where the quadrature

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = exp(-sum_{j<i} sigma_j * delta_j)
    C       = sum_i T_i * alpha_i * c_i          (premultiplied color)

is a few dense ops. Padding rows carry sigma*delta = 0 and drop out of
every sum, so ragged rays cost nothing extra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CANDIDATES = 128
MAX_SAMPLES = 16
# low-opacity rays relax toward a mean audio coordinate of 0.5, which the
# dynamic regularizer treats as "no drive": empty rays add no penalty
MEAN_XA_EPS = 1e-5


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class RayBatch:
    origins: np.ndarray   # [N,3]
    dirs: np.ndarray      # [N,3] unit
    t_near: np.ndarray    # [N]
    t_far: np.ndarray     # [N]
    hit: np.ndarray       # [N] bool
    pixels: np.ndarray    # [N,2] (row, col)

    def __len__(self) -> int:
        return self.origins.shape[0]


def all_pixels(camera: Camera) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width),
                             indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def generate_rays(camera: Camera, rotation: np.ndarray, translation: np.ndarray,
                  pixels: np.ndarray | None = None) -> RayBatch:
    """Pinhole rays through pixel centers, moved into canonical head space.

    The head pose maps canonical to camera coordinates (x_cam = R x + t), so
    rays transform by the inverse pose. Near/far come from a slab test
    against the unit cube; misses are flagged and rendered as background.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-5):
        raise ValueError("head pose rotation is not orthonormal")
    if pixels is None:
        pixels = all_pixels(camera)
    pixels = np.asarray(pixels)

    x = (pixels[:, 1] + 0.5 - camera.cx) / camera.focal
    y = (pixels[:, 0] + 0.5 - camera.cy) / camera.focal
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)

    # x_canon = R^T (x_cam - t): origin 0 maps to -R^T t, directions rotate
    origin = (-rotation.T @ translation).astype(np.float32)
    dirs = (d_cam @ rotation).astype(np.float32)
    origins = np.broadcast_to(origin, dirs.shape).copy()

    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t1 = (0.0 - origins) * inv
    t2 = (1.0 - origins) * inv
    lo = np.minimum(t1, t2).max(axis=1)
    hi = np.maximum(t1, t2).min(axis=1)
    t_near = np.maximum(lo, 0.0).astype(np.float32)
    t_far = hi.astype(np.float32)
    hit = (t_far > t_near) & (t_far > 0)
    return RayBatch(origins=origins, dirs=dirs, t_near=t_near,
                    t_far=np.maximum(t_far, t_near), hit=hit, pixels=pixels)


def quadrature_weights(sig_delta: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(alpha, transmittance, weights), each [N,S], from sigma*delta rows.

    alpha_i = 1 - exp(-sigma_i delta_i); T_i = exp(-sum_{j<i} sigma_j delta_j),
    formed as exp(sig_delta - inclusive_cumsum) so no shifted copy is needed.
    Zero rows (padding) contribute alpha = 0, weight = 0.
    """
    alpha = 1.0 - ad.exp(-sig_delta)
    cum = ad.cumsum(sig_delta, axis=1)
    trans = ad.exp(sig_delta - cum)
    return alpha, trans, trans * alpha


def candidate_ts(rays: RayBatch, candidates: int,
                 rng: np.random.Generator | None) -> np.ndarray:
    """Stratified positions in [t_near, t_far]: jittered when rng, else midpoints."""
    n = len(rays)
    if rng is None:
        u = 0.5
    else:
        u = rng.random((n, candidates), dtype=np.float32)
    span = (rays.t_far - rays.t_near)[:, None]
    return rays.t_near[:, None] + (np.arange(candidates, dtype=np.float32) + u) \
        / candidates * span


def march_and_render(model, grid, rays: RayBatch, a: Tensor, e: np.ndarray,
                     frames: np.ndarray, max_samples: int = MAX_SAMPLES,
                     candidates: int = CANDIDATES,
                     rng: np.random.Generator | None = None):
    """Prune, evaluate, integrate. Returns (rgb, opacity, mean_xa, stats).

    a: [N,64] per-ray audio codes (tape tensor: the AFE trains through here);
    e: [N,1] eye feature; frames: [N] frame index for appearance embeddings.
    grid None disables pruning (every candidate inside the box survives).
    """
    n = len(rays)
    ts = candidate_ts(rays, candidates, rng)                       # [N,K]
    pts = rays.origins[:, None, :] + rays.dirs[:, None, :] * ts[..., None]
    if grid is None:
        occ = np.broadcast_to(rays.hit[:, None], ts.shape)
    else:
        occ = rays.hit[:, None] & grid.occupied_at(pts)
    rank = np.cumsum(occ, axis=1)
    sel = occ & (rank <= max_samples)                              # keep first
    ray_id, cand_id = np.nonzero(sel)
    m = ray_id.size
    stats = {"rays": n, "evals": m,
             "samples_per_ray": sel.sum(axis=1)}
    dt = model.dtype
    if m == 0:
        zero3 = Tensor(np.zeros((n, 3), dtype=dt))
        zero1 = Tensor(np.zeros((n, 1), dtype=dt))
        half = Tensor(np.full((n, model.audio_dim), 0.5, dtype=dt))
        return zero3, zero1, half, stats

    pos = rank[sel] - 1                                            # slot in ray
    t_sel = ts[ray_id, cand_id]
    delta = np.empty(m, dtype=np.float32)
    delta[:-1] = t_sel[1:] - t_sel[:-1]
    last = np.empty(m, dtype=bool)
    last[:-1] = ray_id[1:] != ray_id[:-1]
    last[-1] = True
    delta[last] = rays.t_far[ray_id[last]] - t_sel[last]

    a_rows = ad.take_rows(a, ray_id)
    e_rows = Tensor(np.ascontiguousarray(e[ray_id]).astype(dt))
    emb = model.embedding_rows(frames[ray_id])
    sigma, rgb, xa = model.query(pts[ray_id, cand_id].astype(dt),
                                 a_rows, e_rows, emb)

    s = max_samples
    rows = ray_id * s + pos
    sig_delta = ad.put_rows(sigma * Tensor(delta[:, None].astype(dt)),
                            rows, n * s)
    sig_delta = ad.reshape(sig_delta, (n, s))
    _, _, weights = quadrature_weights(sig_delta)                  # [N,S]
    w3 = ad.reshape(weights, (n, s, 1))

    rgb_rect = ad.reshape(ad.put_rows(rgb, rows, n * s), (n, s, 3))
    color = ad.tsum(w3 * rgb_rect, axis=1)                         # [N,3]
    opacity = ad.tsum(weights, axis=1, keepdims=True)              # [N,1]

    xa_rect = ad.reshape(ad.put_rows(xa, rows, n * s), (n, s, model.audio_dim))
    wxa = ad.tsum(w3 * xa_rect, axis=1)                            # [N,D]
    mean_xa = (wxa + 0.5 * MEAN_XA_EPS) / (opacity + MEAN_XA_EPS)
    return color, opacity, mean_xa, stats


def composite(head_rgb, head_opacity, torso_rgba, background):
    """head over torso over background; head color arrives premultiplied."""
    if torso_rgba is None:
        behind = background
    else:
        t_rgb, t_a = torso_rgba
        behind = t_rgb * t_a + (1.0 - t_a) * background
    return head_rgb + (1.0 - head_opacity) * behind
