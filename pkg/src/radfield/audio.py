"""Audio feature pipeline: per-frame logits -> smoothed 64-dim condition codes.

Upstream ASR logits arrive via the dataset (raw [num_frames, logit_dim]
float32). Each frame grabs a 16-row window (8 past, 8 future, edge-padded),
a 4-layer stride-2 conv stack collapses the window to one step, an affine
maps to 64 dims, and an attention module blends the trailing 8 frame
features into the final code. Everything trains end-to-end through the
rendering losses. Test time adds a momentum smoother over the code sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WINDOW = 16          # logit rows per frame window
ATTENTION_SPAN = 8   # trailing frames blended by attention
CODE_DIM = 64
CONV_WIDTHS = (32, 32, 64, 64)
LEAK = 0.02


@dataclass
class LogitsTrack:
    """Per-frame classification logits from an external recognizer."""

    values: np.ndarray  # [num_frames, logit_dim] float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"logits must be [num_frames>=1, logit_dim], "
                             f"got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("logits contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def logit_dim(self) -> int:
        return self.values.shape[1]


def window_logits(track: LogitsTrack, frame: int) -> np.ndarray:
    """The 16 logit rows [frame-8, frame+8), edge-padded by repetition."""
    if not 0 <= frame < track.num_frames:
        raise IndexError(f"frame {frame} outside track of {track.num_frames}")
    idx = np.clip(np.arange(frame - 8, frame + 8), 0, track.num_frames - 1)
    return track.values[idx]


def _window_indices(num_frames: int, frames: np.ndarray) -> np.ndarray:
    return np.clip(frames[:, None] + np.arange(-8, 8)[None, :], 0, num_frames - 1)


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class AudioEncoder:
    """Conv feature extractor plus attention smoothing, all learnable."""

    def __init__(self, logit_dim: int, rng: np.random.Generator):
        widths = (logit_dim,) + CONV_WIDTHS
        self.params: dict[str, Tensor] = {}
        for i in range(4):
            cin, cout = widths[i], widths[i + 1]
            self.params[f"audio.conv{i}.w"] = Tensor(
                _he_init(rng, (3, cin, cout), 3 * cin), requires_grad=True)
            self.params[f"audio.conv{i}.b"] = Tensor(
                np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.params["audio.out.w"] = Tensor(
            _he_init(rng, (CONV_WIDTHS[-1], CODE_DIM), CONV_WIDTHS[-1]),
            requires_grad=True)
        self.params["audio.out.b"] = Tensor(
            np.zeros(CODE_DIM, dtype=np.float32), requires_grad=True)
        # small init keeps early attention near-uniform over the window
        self.params["audio.att.w"] = Tensor(
            rng.normal(0.0, 0.01, size=(CODE_DIM, 1)).astype(np.float32),
            requires_grad=True)
        self.params["audio.att.b"] = Tensor(
            np.zeros(1, dtype=np.float32), requires_grad=True)
        self.logit_dim = logit_dim

    def encode_windows(self, windows: np.ndarray) -> Tensor:
        """[B, 16, logit_dim] windows -> [B, 64] per-frame features."""
        h = Tensor(np.asarray(windows, dtype=np.float32))
        for i in range(4):
            h = ad.conv1d(h, self.params[f"audio.conv{i}.w"],
                          self.params[f"audio.conv{i}.b"], stride=2, padding=1)
            h = ad.leaky_relu(h, LEAK)
        b = h.data.shape[0]
        h = ad.reshape(h, (b, CONV_WIDTHS[-1]))  # 16 steps collapsed to 1
        return ad.matmul(h, self.params["audio.out.w"]) + self.params["audio.out.b"]

    def attend(self, features: Tensor, gather: np.ndarray) -> Tensor:
        """Blend trailing frame features with learned softmax weights.

        features: [M, 64] features of the union of needed frames;
        gather: [B, 8] integer rows into features (trailing window per target).
        """
        b = gather.shape[0]
        rows = ad.take_rows(features, gather.ravel())               # [B*8, 64]
        scores = ad.matmul(rows, self.params["audio.att.w"]) + self.params["audio.att.b"]
        weights = ad.softmax_lastaxis(ad.reshape(scores, (b, ATTENTION_SPAN)))
        weighted = ad.reshape(weights, (b, ATTENTION_SPAN, 1)) * \
            ad.reshape(rows, (b, ATTENTION_SPAN, CODE_DIM))
        return ad.tsum(weighted, axis=1)                            # [B, 64]

    def frame_codes(self, track: LogitsTrack, frames: np.ndarray) -> Tensor:
        """Final audio codes a for the given frame indices, shape [B, 64]."""
        frames = np.asarray(frames, dtype=np.int64)
        if frames.size and (frames.min() < 0 or frames.max() >= track.num_frames):
            raise IndexError(f"frames outside [0, {track.num_frames})")
        # attention needs the 7 preceding frames' features as well
        trail = np.clip(frames[:, None] + np.arange(-ATTENTION_SPAN + 1, 1),
                        0, track.num_frames - 1)                    # [B, 8]
        needed, inverse = np.unique(trail, return_inverse=True)
        windows = track.values[_window_indices(track.num_frames, needed)]
        feats = self.encode_windows(windows)                        # [M, 64]
        return self.attend(feats, inverse.reshape(trail.shape))

    def attention_weights(self, track: LogitsTrack, frames: np.ndarray) -> np.ndarray:
        """Softmax attention weights per target frame (diagnostics/tests)."""
        frames = np.asarray(frames, dtype=np.int64)
        trail = np.clip(frames[:, None] + np.arange(-ATTENTION_SPAN + 1, 1),
                        0, track.num_frames - 1)
        needed, inverse = np.unique(trail, return_inverse=True)
        with ad.no_grad():
            feats = self.encode_windows(track.values[_window_indices(
                track.num_frames, needed)])
            rows = ad.take_rows(feats, inverse.ravel())
            scores = ad.matmul(rows, self.params["audio.att.w"]) \
                + self.params["audio.att.b"]
            w = ad.softmax_lastaxis(ad.reshape(scores, (len(frames), ATTENTION_SPAN)))
        return w.data


def momentum_smooth(codes: np.ndarray, beta: float) -> np.ndarray:
    """Test-time smoothing: out_0 = a_0, out_i = beta*out_{i-1} + (1-beta)*a_i."""
    codes = np.asarray(codes, dtype=np.float32)
    out = codes.copy()
    for i in range(1, len(out)):
        out[i] = beta * out[i - 1] + (1.0 - beta) * codes[i]
    return out
