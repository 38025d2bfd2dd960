"""Evaluation metrics: PSNR, SSIM, mouth/eye statistics, benchmarking."""

from __future__ import annotations

import platform
import time

import numpy as np

from . import autodiff as ad
from . import losses

PSNR_CAP = 99.0          # identical images report the sentinel, not inf
DARK_LUMINANCE = 0.3     # "mouth open" pixel threshold
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise for [0,1] images; capped at 99 dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64)
                         - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    with ad.no_grad():
        return float(losses.ssim(ad.as_tensor(np.asarray(pred, np.float64)),
                                 np.asarray(target, np.float64)).data)


def dark_pixel_count(img: np.ndarray, rect: tuple[int, int, int, int],
                     threshold: float = DARK_LUMINANCE) -> int:
    """Pixels darker than the luminance threshold inside (x, y, w, h)."""
    x, y, w, h = rect
    lum = np.asarray(img)[y:y + h, x:x + w] @ LUMA
    return int((lum < threshold).sum())


def pearson(x, y) -> float:
    """Correlation coefficient; NaN when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def spearman(x, y) -> float:
    """Rank correlation via Pearson on average ranks; NaN when constant."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size, dtype=np.float64)
        r[order] = np.arange(v.size)
        # average ties so equal values share a rank
        for u in np.unique(v):
            m = v == u
            if m.sum() > 1:
                r[m] = r[m].mean()
        return r
    return pearson(ranks(x), ranks(y))


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "processor": platform.processor() or platform.machine(),
    }


def bench_render(render_fn, warmup: int = 10, timed: int = 100) -> dict:
    """Median per-frame latency of render_fn(i) after a warmup burn."""
    for i in range(warmup):
        render_fn(i)
    samples = []
    for i in range(timed):
        t0 = time.perf_counter()
        render_fn(i)
        samples.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(samples)
    return {
        "frames": timed,
        "median_ms": float(np.median(arr)),
        "mean_ms": float(arr.mean()),
        "p90_ms": float(np.percentile(arr, 90)),
        "fps": float(1000.0 / np.median(arr)),
        "machine": machine_descriptor(),
    }
