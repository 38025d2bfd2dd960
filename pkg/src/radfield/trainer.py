"""Three-stage training: head field, lips fine-tune, torso field.

Stage 1 fits the audio-driven head against ground truth composited over
the per-frame torso plates, with opacity entropy and an off-face drive
penalty. Stage 2 fine-tunes on the lips rectangle with a patch MSE plus
a structural (SSIM) term, occupancy frozen. Stage 3 fits the pseudo-3D
torso against the neck-inpainted plates over the background.

Every schedule is deterministic in the seed: reruns produce bit-identical
parameters. Occupancy updates every UPDATE_EVERY steps during the head
stage; pruning starts after WARMUP_STEPS; a consolidation pass over many
audio conditions runs once at the end of the head stage.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .audio import AudioEncoder
from .autodiff import AdamState, EmaState, Tensor, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .head import HeadModel
from .losses import loss_color, loss_dynamic, loss_entropy, loss_lips
from .occupancy import (CONSOLIDATE_CONDITIONS, UPDATE_EVERY, WARMUP_STEPS,
                        OccupancyGrid)
from .rendering import composite, generate_rays, march_and_render
from .torso import TorsoModel


@dataclass
class TrainConfig:
    head_steps: int = 20000
    lips_steps: int = 5000
    torso_steps: int = 20000
    rays_per_step: int = 65536
    lips_patch: int = 64
    lr_net: float = 5e-4
    lr_grid: float = 5e-3
    lambda_entropy: float = 1e-3
    lambda_dynamic: float = 0.1
    lambda_struct: float = 0.01
    ema_decay: float = 0.95
    beta: float = 0.5              # eval-time code smoothing momentum
    audio_dim: int = 2
    max_samples: int = 16
    candidates: int = 128
    warmup_samples: int = 32       # per-ray depth samples while pruning is off
    levels: int = 16
    base_resolution: int = 16
    max_resolution: int = 2048
    occupancy_resolution: int = 64
    tau: float = 0.01
    prune: bool = True
    seed: int = 42
    checkpoint_every: int = 1000

    def desk(self) -> "TrainConfig":
        """Scaled-down schedule that trains on one core in tens of minutes."""
        return replace(self, head_steps=5000, lips_steps=1000,
                       torso_steps=5000, rays_per_step=4096, lips_patch=32)


class LossReport:
    """Line-delimited JSON training log; no-op when path is None."""

    def __init__(self, path: str | None):
        self._f = open(path, "a") if path else None

    def write(self, step: int, stage: str, lr: float, **components) -> None:
        if self._f is None:
            return
        rec = {"step": step, "stage": stage, "lr": lr}
        rec.update({k: float(v) for k, v in components.items()})
        self._f.write(json.dumps(rec) + "\n")
        self._f.flush()

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


class Bundle:
    """Everything a checkpoint holds: models, EMA shadow, occupancy, flags."""

    def __init__(self, config: TrainConfig, num_frames: int, logit_dim: int):
        self.config = config
        self.num_frames = num_frames
        self.logit_dim = logit_dim
        rng = np.random.default_rng(config.seed)
        self.head = HeadModel(num_frames, audio_dim=config.audio_dim,
                              levels=config.levels,
                              base_resolution=config.base_resolution,
                              max_resolution=config.max_resolution, rng=rng)
        self.torso = TorsoModel(num_frames, levels=config.levels,
                                base_resolution=config.base_resolution,
                                max_resolution=config.max_resolution, rng=rng)
        self.afe = AudioEncoder(logit_dim, rng)
        self.grid = OccupancyGrid(config.occupancy_resolution, config.tau)
        self.stages = {"head": False, "lips": False, "torso": False}
        self.ema = EmaState(self.parameters(), decay=config.ema_decay)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.head.parameters(), **self.torso.parameters(),
                **self.afe.params}

    def save(self, path: str) -> None:
        tensors = {k: p.data for k, p in self.parameters().items()}
        tensors.update({f"ema/{k}": v for k, v in self.ema.shadow.items()})
        snapshot = {"train": asdict(self.config),
                    "num_frames": self.num_frames,
                    "logit_dim": self.logit_dim}
        save_checkpoint(path, tensors, snapshot, dict(self.stages), self.grid)

    @classmethod
    def load(cls, path: str) -> "Bundle":
        ck = load_checkpoint(path)
        config = TrainConfig(**ck.config["train"])
        bundle = cls(config, ck.config["num_frames"], ck.config["logit_dim"])
        params = bundle.parameters()
        for name, p in params.items():
            p.data = ck.tensors[name].astype(p.data.dtype).reshape(p.data.shape)
            bundle.ema.shadow[name] = ck.tensors[f"ema/{name}"].astype(
                p.data.dtype).reshape(p.data.shape)
        bundle.stages = dict(ck.stages)
        if ck.occupancy is not None:
            bundle.grid = ck.occupancy
        return bundle


def _frame_code(bundle: Bundle, dataset: Dataset, frame_idx: int) -> Tensor:
    """[1,64] audio code for one frame, on the tape (the encoder trains)."""
    audio_idx = dataset.frames[frame_idx].audio_index
    return bundle.afe.frame_codes(dataset.logits, np.array([audio_idx]))


def _density_condition(bundle: Bundle, dataset: Dataset,
                       frame_idx: int):
    """Tape-free density function under one frame's audio condition."""
    with ad.no_grad():
        code = _frame_code(bundle, dataset, frame_idx).data[0]
    eye = dataset.frames[frame_idx].eye
    return lambda pts: bundle.head.density(pts, code, eye)


def _march_frame_pixels(bundle: Bundle, dataset: Dataset, frame_idx: int,
                        pixels: np.ndarray, grid, max_samples: int,
                        candidates: int, rng: np.random.Generator | None):
    f = dataset.frames[frame_idx]
    rays = generate_rays(dataset.camera, f.rotation, f.translation, pixels)
    n = len(rays)
    a = ad.take_rows(_frame_code(bundle, dataset, frame_idx),
                     np.zeros(n, dtype=np.int64))
    e = np.full((n, 1), f.eye, dtype=np.float32)
    frames = np.full(n, frame_idx, dtype=np.int64)
    return rays, march_and_render(bundle.head, grid, rays, a, e, frames,
                                  max_samples=max_samples,
                                  candidates=candidates, rng=rng)


def _prune_state(bundle: Bundle, step: int) -> tuple:
    """(grid or None, kept samples, candidate count) for this step.

    Without pruning the march keeps the first max_samples candidates, so
    candidates must equal max_samples for samples to span the whole slab.
    Warmup uses warmup_samples of depth resolution: the field has to localize
    the surface before the first occupancy snapshots bake it in.
    """
    cfg = bundle.config
    if cfg.prune and step >= WARMUP_STEPS:
        return bundle.grid, cfg.max_samples, cfg.candidates
    return None, cfg.warmup_samples, cfg.warmup_samples


def train_head(bundle: Bundle, dataset: Dataset, report: LossReport | None = None,
               out_dir: str | None = None) -> None:
    cfg = bundle.config
    rng = np.random.default_rng(cfg.seed)
    report = report or LossReport(None)
    params = bundle.parameters()
    grid_names = bundle.head.grid_parameter_names()
    head_names = set(bundle.head.parameters()) | set(bundle.afe.params)
    net = {k: params[k] for k in head_names - grid_names}
    grids = {k: params[k] for k in grid_names}
    adam_net = AdamState(net, cfg.lr_net, cfg.head_steps)
    adam_grid = AdamState(grids, cfg.lr_grid, cfg.head_steps)
    train_frames = dataset.train_indices
    n_px = dataset.camera.width * dataset.camera.height

    for step in range(cfg.head_steps):
        if step % UPDATE_EVERY == 0:
            cond = _density_condition(bundle, dataset,
                                      int(rng.choice(train_frames)))
            bundle.grid.update(cond, rng=rng)

        frame_idx = int(rng.choice(train_frames))
        flat = rng.choice(n_px, size=min(cfg.rays_per_step, n_px),
                          replace=False)
        pixels = np.stack([flat // dataset.camera.width,
                           flat % dataset.camera.width], axis=1)
        grid, max_samples, candidates = _prune_state(bundle, step)
        rays, (color, opacity, mean_xa, _) = _march_frame_pixels(
            bundle, dataset, frame_idx, pixels, grid, max_samples,
            candidates, rng)

        f = dataset.frames[frame_idx]
        px = pixels[:, 0], pixels[:, 1]
        pred = composite(color, opacity, None, f.plate[px].astype(np.float32))
        l_color = loss_color(pred, f.image[px])
        l_entropy = loss_entropy(opacity)
        l_dynamic = loss_dynamic(mean_xa, f.mask[px])
        loss = l_color + cfg.lambda_entropy * l_entropy \
            + cfg.lambda_dynamic * l_dynamic

        zero_grads(params)
        loss.backward()
        lr = adam_net.step()
        adam_grid.step()
        bundle.ema.update()
        report.write(step, "head", lr, loss=loss.data, color=l_color.data,
                     entropy=l_entropy.data, dynamic=l_dynamic.data)
        _maybe_checkpoint(bundle, out_dir, step)

    if cfg.prune:
        conds = [_density_condition(bundle, dataset, int(i)) for i in
                 rng.choice(train_frames, size=min(CONSOLIDATE_CONDITIONS,
                                                   train_frames.size),
                            replace=False)]
        bundle.grid.recompute(conds, rng=rng)
    bundle.stages["head"] = True
    _maybe_checkpoint(bundle, out_dir, force=True)


def _lips_patch_bounds(frame, patch: int, width: int, height: int):
    """Patch window centered on the lips rect, shifted to stay inside."""
    x, y, w, h = frame.lips
    p = min(patch, width, height)
    x0 = int(np.clip(x + w // 2 - p // 2, 0, width - p))
    y0 = int(np.clip(y + h // 2 - p // 2, 0, height - p))
    return x0, y0, p


def finetune_lips(bundle: Bundle, dataset: Dataset,
                  report: LossReport | None = None,
                  out_dir: str | None = None) -> None:
    """Patch-structured fine-tune on the mouth region; occupancy frozen."""
    if not bundle.stages["head"]:
        raise RuntimeError("lips fine-tune requires a completed head stage")
    cfg = bundle.config
    rng = np.random.default_rng(cfg.seed + 1)
    report = report or LossReport(None)
    params = bundle.parameters()
    grid_names = bundle.head.grid_parameter_names()
    head_names = set(bundle.head.parameters()) | set(bundle.afe.params)
    adam_net = AdamState({k: params[k] for k in head_names - grid_names},
                         cfg.lr_net, cfg.lips_steps)
    adam_grid = AdamState({k: params[k] for k in grid_names},
                          cfg.lr_grid, cfg.lips_steps)
    train_frames = dataset.train_indices
    cam = dataset.camera
    grid = bundle.grid if cfg.prune else None
    max_samples = cfg.max_samples if cfg.prune else cfg.warmup_samples
    candidates = cfg.candidates if cfg.prune else max_samples

    for step in range(cfg.lips_steps):
        frame_idx = int(rng.choice(train_frames))
        f = dataset.frames[frame_idx]
        x0, y0, p = _lips_patch_bounds(f, cfg.lips_patch, cam.width, cam.height)
        rows, cols = np.meshgrid(np.arange(y0, y0 + p), np.arange(x0, x0 + p),
                                 indexing="ij")
        pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
        _, (color, opacity, _, _) = _march_frame_pixels(
            bundle, dataset, frame_idx, pixels, grid, max_samples,
            candidates, rng)

        px = pixels[:, 0], pixels[:, 1]
        pred = composite(color, opacity, None, f.plate[px].astype(np.float32))
        patch = ad.reshape(pred, (p, p, 3))
        target = f.image[y0:y0 + p, x0:x0 + p]
        loss, l_mse, l_ssim = loss_lips(patch, target, cfg.lambda_struct)

        zero_grads(params)
        loss.backward()
        lr = adam_net.step()
        adam_grid.step()
        bundle.ema.update()
        report.write(step, "lips", lr, loss=loss.data, mse=l_mse.data,
                     ssim=l_ssim.data)
        _maybe_checkpoint(bundle, out_dir, step)

    bundle.stages["lips"] = True
    _maybe_checkpoint(bundle, out_dir, force=True)


def train_torso(bundle: Bundle, dataset: Dataset,
                report: LossReport | None = None,
                out_dir: str | None = None) -> None:
    """Fit the deformable torso against neck-inpainted plates."""
    if not bundle.stages["head"]:
        raise RuntimeError("torso training requires a completed head stage")
    cfg = bundle.config
    rng = np.random.default_rng(cfg.seed + 2)
    report = report or LossReport(None)
    params = bundle.parameters()
    grid_names = bundle.torso.grid_parameter_names()
    torso_names = set(bundle.torso.parameters())
    adam_net = AdamState({k: params[k] for k in torso_names - grid_names},
                         cfg.lr_net, cfg.torso_steps)
    adam_grid = AdamState({k: params[k] for k in grid_names},
                          cfg.lr_grid, cfg.torso_steps)
    train_frames = dataset.train_indices
    cam = dataset.camera
    n_px = cam.width * cam.height
    from .torso import POSE_DIM, pose_code

    for step in range(cfg.torso_steps):
        frame_idx = int(rng.choice(train_frames))
        f = dataset.frames[frame_idx]
        flat = rng.choice(n_px, size=min(cfg.rays_per_step, n_px),
                          replace=False)
        rows, cols = flat // cam.width, flat % cam.width
        x_t = np.stack([(cols + 0.5) / cam.width,
                        (rows + 0.5) / cam.height], axis=1).astype(np.float32)
        n = x_t.shape[0]
        pc = pose_code(f.rotation, f.translation)
        pose = Tensor(np.broadcast_to(pc, (n, POSE_DIM)).copy())
        emb = bundle.torso.embedding_rows(np.full(n, frame_idx))
        rgb, alpha, _ = bundle.torso.query(x_t, pose, emb)

        bg = dataset.background[rows, cols].astype(np.float32)
        pred = rgb * alpha + (1.0 - alpha) * bg
        l_color = loss_color(pred, f.plate[rows, cols])
        l_entropy = loss_entropy(alpha)
        loss = l_color + cfg.lambda_entropy * l_entropy

        zero_grads(params)
        loss.backward()
        lr = adam_net.step()
        adam_grid.step()
        bundle.ema.update()
        report.write(step, "torso", lr, loss=loss.data, color=l_color.data,
                     entropy=l_entropy.data)
        _maybe_checkpoint(bundle, out_dir, step)

    bundle.stages["torso"] = True
    _maybe_checkpoint(bundle, out_dir, force=True)


def _maybe_checkpoint(bundle: Bundle, out_dir: str | None,
                      step: int = -1, force: bool = False) -> None:
    if out_dir is None:
        return
    every = bundle.config.checkpoint_every
    if force or (step > 0 and step % every == 0):
        bundle.save(os.path.join(out_dir, "checkpoint.radf"))
