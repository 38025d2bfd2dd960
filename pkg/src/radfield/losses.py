"""Training objectives: photometric, opacity entropy, drive sparsity, SSIM.

All losses return scalar tape tensors. Conventions:

  color    sum over channels, mean over pixels (a single pixel off by 0.1
           in every channel contributes 0.03 / batch)
  entropy  mean binary entropy of ray opacity, probabilities clamped to
           [eps, 1-eps]
  dynamic  mean L1 distance of the opacity-weighted audio coordinate from
           its neutral value 0.5, over rays outside the face region
  lips     patch MSE plus lambda_struct * (1 - SSIM), SSIM with a 7x7
           uniform window and sample covariance
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENTROPY_EPS = 1e-5
SSIM_WIN = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def loss_color(pred: Tensor, target: np.ndarray) -> Tensor:
    """Squared error summed over channels, averaged over pixels. [N,3]."""
    d = pred - np.asarray(target, dtype=pred.data.dtype)
    return ad.tmean(ad.tsum(d * d, axis=1))


def loss_entropy(opacity: Tensor, eps: float = ENTROPY_EPS) -> Tensor:
    """Mean binary entropy of [N,1] opacities; ln 2 at 0.5, ~0 when binary."""
    p = ad.clip(opacity, eps, 1.0 - eps)
    q = 1.0 - p
    return ad.tmean(-(p * ad.log(p) + q * ad.log(q)))


def loss_dynamic(mean_xa: Tensor, face: np.ndarray) -> Tensor:
    """Penalize audio response outside the face.

    mean_xa: [N,D] opacity-weighted audio coordinates; face: [N] bool.
    Rays on the face are free to move; everything else is pulled to the
    neutral coordinate. No off-face rays in the batch -> zero.
    """
    off = ~np.asarray(face, dtype=bool)
    if not off.any():
        return ad.as_tensor(np.zeros((), dtype=mean_xa.data.dtype))
    rows = ad.take_rows(mean_xa, np.flatnonzero(off))
    return ad.tmean(ad.absolute(rows - 0.5))


def _channel_ssim(x: Tensor, y: Tensor, win: int) -> Tensor:
    np_ = win * win
    cov_norm = np_ / (np_ - 1.0)  # sample covariance
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    ux = ad.window_mean2d(x, win)
    uy = ad.window_mean2d(y, win)
    uxx = ad.window_mean2d(x * x, win)
    uyy = ad.window_mean2d(y * y, win)
    uxy = ad.window_mean2d(x * y, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    a1 = 2.0 * ux * uy + c1
    a2 = 2.0 * vxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    return ad.tmean((a1 * a2) / (b1 * b2))


def ssim(pred: Tensor, target, win: int = SSIM_WIN) -> Tensor:
    """Mean SSIM over channels for [H,W,3] images in [0,1].

    Uniform window, valid region only: identical to the usual scikit-image
    settings (win_size=7, gaussian_weights=False, data_range=1).
    """
    if not isinstance(pred, Tensor):
        pred = ad.as_tensor(np.asarray(pred))
    if not isinstance(target, Tensor):
        target = ad.as_tensor(np.asarray(target, dtype=pred.data.dtype))
    chans = [_channel_ssim(pred[:, :, c], target[:, :, c], win)
             for c in range(pred.shape[2])]
    total = chans[0]
    for c in chans[1:]:
        total = total + c
    return total / float(len(chans))


def loss_lips(pred: Tensor, target: np.ndarray,
              lambda_struct: float = 0.01) -> tuple[Tensor, Tensor, Tensor]:
    """(total, mse, ssim) for an [H,W,3] patch pair."""
    d = pred - np.asarray(target, dtype=pred.data.dtype)
    mse = ad.tmean(d * d)
    s = ssim(pred, target)
    return mse + lambda_struct * (1.0 - s), mse, s
