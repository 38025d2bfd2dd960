"""Held-out evaluation: frame rendering, image metrics, control statistics.

Rendering always runs under the EMA parameter shadow with momentum-smoothed
audio codes, the same configuration the training recipe prescribes for
inference. Held-out frames reuse appearance embedding row 0 (per-frame
embeddings are only meaningful for frames that trained).
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import metrics
from .audio import momentum_smooth
from .data import Dataset
from .rendering import composite, generate_rays, march_and_render
from .trainer import Bundle

EMBED_EVAL_ROW = 0
EYE_SWEEP_POINTS = 11
EYE_SWEEP_MAX = 0.005


def smoothed_codes(bundle: Bundle, dataset: Dataset,
                   beta: float | None = None) -> np.ndarray:
    """[F,64] audio codes for every dataset frame, momentum smoothed."""
    beta = bundle.config.beta if beta is None else beta
    idx = np.array([f.audio_index for f in dataset.frames])
    with ad.no_grad():
        codes = bundle.afe.frame_codes(dataset.logits, idx).data
    return momentum_smooth(codes, beta)


def _render_core(bundle: Bundle, dataset: Dataset, frame_idx: int,
                 code: np.ndarray, *, eye: float | None = None,
                 pruned: bool = True, with_torso: bool = True,
                 max_samples: int | None = None, chunk: int = 8192,
                 collect: dict | None = None) -> np.ndarray:
    """One frame under whatever parameters are currently in the models."""
    cfg = bundle.config
    cam = dataset.camera
    f = dataset.frames[frame_idx]
    eye = f.eye if eye is None else eye
    if pruned:
        grid = bundle.grid
        max_s = cfg.max_samples if max_samples is None else max_samples
        candidates = cfg.candidates
    else:
        # dense reference: every stratified candidate is integrated
        grid = None
        max_s = cfg.candidates if max_samples is None else max_samples
        candidates = max_s

    rays = generate_rays(cam, f.rotation, f.translation)
    n = len(rays)
    color = np.empty((n, 3), dtype=np.float32)
    opacity = np.empty((n, 1), dtype=np.float32)
    mean_xa = np.empty((n, bundle.head.audio_dim), dtype=np.float32)
    evals = 0
    with ad.no_grad():
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            sub = type(rays)(origins=rays.origins[lo:hi], dirs=rays.dirs[lo:hi],
                             t_near=rays.t_near[lo:hi], t_far=rays.t_far[lo:hi],
                             hit=rays.hit[lo:hi], pixels=rays.pixels[lo:hi])
            m = hi - lo
            a = ad.as_tensor(np.broadcast_to(code.astype(np.float32),
                                             (m, code.shape[-1])).copy())
            e = np.full((m, 1), eye, dtype=np.float32)
            frames = np.full(m, EMBED_EVAL_ROW, dtype=np.int64)
            c, op, xa, stats = march_and_render(
                bundle.head, grid, sub, a, e, frames,
                max_samples=max_s, candidates=candidates)
            color[lo:hi] = c.data
            opacity[lo:hi] = op.data
            mean_xa[lo:hi] = xa.data
            evals += stats["evals"]

    if collect is not None:
        collect["mean_xa"] = mean_xa
        collect["opacity"] = opacity
        collect["evals"] = evals

    h, w = cam.height, cam.width
    head_rgb = color.reshape(h, w, 3)
    head_op = opacity.reshape(h, w, 1)
    torso_rgba = None
    if with_torso:
        rgba = bundle.torso.render(f.rotation, f.translation, EMBED_EVAL_ROW,
                                   h, w)
        torso_rgba = (rgba[..., :3], rgba[..., 3:])
    out = composite(head_rgb, head_op, torso_rgba, dataset.background)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_frame(bundle: Bundle, dataset: Dataset, frame_idx: int,
                 beta: float | None = None, **kwargs) -> np.ndarray:
    """EMA + smoothed-code render of one dataset frame."""
    codes = smoothed_codes(bundle, dataset, beta)
    with bundle.ema.applied():
        return _render_core(bundle, dataset, frame_idx, codes[frame_idx],
                            **kwargs)


def make_renderer(bundle: Bundle, dataset: Dataset, **kwargs):
    """Closure over precomputed codes that renders the i-th held-out frame.

    Used by benchmarking so per-call cost is the render itself, not audio
    encoding of the full track.
    """
    codes = smoothed_codes(bundle, dataset)
    frames = dataset.test_indices
    if frames.size == 0:
        frames = np.arange(len(dataset))

    def render(i: int) -> np.ndarray:
        idx = int(frames[i % frames.size])
        with bundle.ema.applied():
            return _render_core(bundle, dataset, idx, codes[idx], **kwargs)

    return render


def _eye_region_dark(img: np.ndarray, frame) -> int:
    """Dark pixels in the face above the lips rectangle (the eye band)."""
    lum = img @ metrics.LUMA
    region = frame.mask.copy()
    region[frame.lips[1]:] = False
    return int(((lum < metrics.DARK_LUMINANCE) & region).sum())


def evaluate(bundle: Bundle, dataset: Dataset, beta: float | None = None,
             eye_sweep: int = EYE_SWEEP_POINTS, max_frames: int | None = None,
             pruning_check: bool | None = None) -> dict:
    """Held-out metrics bundle; see the README for field meanings."""
    cfg = bundle.config
    codes = smoothed_codes(bundle, dataset, beta)
    test = dataset.test_indices
    if max_frames is not None:
        test = test[:max_frames]
    if pruning_check is None:
        pruning_check = cfg.prune

    psnrs, ssims, dark_render, dark_gt = [], [], [], []
    with bundle.ema.applied():
        for i in test:
            f = dataset.frames[i]
            img = _render_core(bundle, dataset, int(i), codes[i],
                               pruned=cfg.prune)
            psnrs.append(metrics.psnr(img, f.image))
            ssims.append(metrics.ssim(img, f.image))
            dark_render.append(metrics.dark_pixel_count(img, f.lips))
            dark_gt.append(metrics.dark_pixel_count(f.image, f.lips))

        probe = int(test[0])
        # eye control: same frame, eye input swept, response must be monotone
        eyes = np.linspace(0.0, EYE_SWEEP_MAX, eye_sweep)
        eye_counts = []
        for e in eyes:
            img = _render_core(bundle, dataset, probe, codes[probe],
                               eye=float(e), pruned=cfg.prune,
                               with_torso=False)
            eye_counts.append(_eye_region_dark(img, dataset.frames[probe]))

        # drive locality: opacity-weighted audio coordinate vs the face mask
        aux: dict = {}
        _render_core(bundle, dataset, probe, codes[probe], pruned=cfg.prune,
                     with_torso=False, collect=aux)
        face = dataset.frames[probe].mask.ravel()
        dev = np.abs(aux["mean_xa"] - 0.5).mean(axis=1)
        face_dev = float(dev[face].mean())
        off_dev = float(dev[~face].mean())

        pruned_psnr = speedup = None
        if pruning_check:
            t0 = time.perf_counter()
            img_p = _render_core(bundle, dataset, probe, codes[probe],
                                 pruned=True, with_torso=False)
            t_pruned = time.perf_counter() - t0
            t0 = time.perf_counter()
            img_d = _render_core(bundle, dataset, probe, codes[probe],
                                 pruned=False, with_torso=False)
            t_dense = time.perf_counter() - t0
            pruned_psnr = metrics.psnr(img_p, img_d)
            speedup = t_dense / max(t_pruned, 1e-9)

    return {
        "frames": int(test.size),
        "psnr": float(np.mean(psnrs)),
        "psnr_per_frame": [float(v) for v in psnrs],
        "ssim": float(np.mean(ssims)),
        "mouth_pearson": metrics.pearson(dark_render, dark_gt),
        "eye_spearman": metrics.spearman(eyes, eye_counts),
        "eye_counts": [int(c) for c in eye_counts],
        "dynamic_face": face_dev,
        "dynamic_off_face": off_dev,
        "dynamic_ratio": off_dev / max(face_dev, 1e-12),
        "pruned_vs_dense_psnr": pruned_psnr,
        "pruning_speedup": speedup,
    }
