"""Dataset schema, loading, validation, and neck in-painting.

A dataset directory holds manifest.json plus PNG frames/plates/masks, a raw
float32 logits file, and a background image:

    manifest.json
    frames/NNNN.png   ground-truth composites, RGB8
    torso/NNNN.png    torso-over-background plates, RGB8
    masks/NNNN.png    grayscale, nonzero = face region
    audio/logits.f32  [num_frames, logit_dim] little-endian float32
    background.png

The manifest carries camera intrinsics, per-frame pose (4x4 row-major,
canonical -> camera), eye ratio, lips rectangle, and audio frame index.
Loading validates every invariant up front and names the offending frame
and field on failure.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .audio import LogitsTrack
from .rendering import Camera

SCHEMA = "radfield-dataset-v1"
TEST_EVERY = 10  # frame index % 10 == 9 held out


def _load_rgb(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _load_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def save_rgb(path: str, img: np.ndarray) -> None:
    """Float [H,W,3] in [0,1] -> PNG RGB8 (round-to-nearest)."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


@dataclass
class Frame:
    image: np.ndarray      # [H,W,3] float32
    plate: np.ndarray      # [H,W,3] float32 torso+background
    mask: np.ndarray       # [H,W] bool, face region
    rotation: np.ndarray   # [3,3]
    translation: np.ndarray  # [3]
    eye: float
    lips: tuple[int, int, int, int]  # x, y, w, h
    audio_index: int


class Dataset:
    def __init__(self, camera: Camera, frames: list[Frame], logits: LogitsTrack,
                 background: np.ndarray, root: str):
        self.camera = camera
        self.frames = frames
        self.logits = logits
        self.background = background
        self.root = root

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def train_indices(self) -> np.ndarray:
        idx = np.arange(len(self.frames))
        return idx[idx % TEST_EVERY != TEST_EVERY - 1]

    @property
    def test_indices(self) -> np.ndarray:
        idx = np.arange(len(self.frames))
        return idx[idx % TEST_EVERY == TEST_EVERY - 1]


def _fail(frame: int, field: str, msg: str):
    raise ValueError(f"frame {frame}: bad {field}: {msg}")


def load_dataset(manifest_path: str) -> Dataset:
    """Parse, validate, and eagerly load a dataset directory."""
    with open(manifest_path) as f:
        doc = json.load(f)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported schema {doc.get('schema')!r}, "
                         f"expected {SCHEMA!r}")
    root = os.path.dirname(os.path.abspath(manifest_path))

    cam = doc["camera"]
    camera = Camera(focal=float(cam["focal"]), cx=float(cam["cx"]),
                    cy=float(cam["cy"]), width=int(cam["width"]),
                    height=int(cam["height"]))

    entries = doc.get("frames", [])
    if not entries:
        raise ValueError("empty dataset")

    logit_dim = int(doc["logits"]["dim"])
    logits_path = os.path.join(root, doc["logits"]["path"])
    if not os.path.exists(logits_path):
        raise ValueError(f"logits file missing: {logits_path}")
    raw = np.fromfile(logits_path, dtype="<f4")
    if raw.size % logit_dim != 0:
        raise ValueError(f"logits size {raw.size} not divisible by dim {logit_dim}")
    track = LogitsTrack(raw.reshape(-1, logit_dim))

    bg_path = os.path.join(root, doc["background"])
    if not os.path.exists(bg_path):
        raise ValueError(f"background missing: {bg_path}")
    background = _load_rgb(bg_path)

    frames = []
    for i, e in enumerate(entries):
        for key in ("image", "torso", "mask"):
            p = os.path.join(root, e[key])
            if not os.path.exists(p):
                _fail(i, key, f"missing file {p}")
        pose = np.asarray(e["pose"], dtype=np.float64)
        if pose.shape != (4, 4):
            _fail(i, "pose", f"shape {pose.shape}, want (4, 4)")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-4):
            _fail(i, "pose", f"rotation not orthonormal "
                             f"(determinant {np.linalg.det(rot):.6f})")
        eye = float(e["eye"])
        if not 0.0 <= eye <= 0.01:
            _fail(i, "eye", f"{eye} outside [0, 0.01]")
        x, y, w, h = (int(v) for v in e["lips"])
        if not (0 <= x and 0 <= y and w > 0 and h > 0
                and x + w <= camera.width and y + h <= camera.height):
            _fail(i, "lips", f"rectangle {(x, y, w, h)} outside "
                             f"{camera.width}x{camera.height}")
        audio_index = int(e["audio"])
        if not 0 <= audio_index < track.num_frames:
            _fail(i, "audio", f"index {audio_index} outside logits track "
                              f"of {track.num_frames}")
        img = _load_rgb(os.path.join(root, e["image"]))
        if img.shape != (camera.height, camera.width, 3):
            _fail(i, "image", f"shape {img.shape}")
        frames.append(Frame(
            image=img,
            plate=_load_rgb(os.path.join(root, e["torso"])),
            mask=_load_mask(os.path.join(root, e["mask"])),
            rotation=rot, translation=pose[:3, 3],
            eye=eye, lips=(x, y, w, h), audio_index=audio_index))
    return Dataset(camera=camera, frames=frames, logits=track,
                   background=background, root=root)


def neck_inpaint(image: np.ndarray, neck_mask: np.ndarray,
                 gamma: float = 0.98) -> np.ndarray:
    """Fill above the neck by replicating its topmost pixel, darkened.

    For each column with any neck pixel, rows above the topmost neck row r0
    receive image[r0, col] * gamma^(r0 - row). Columns without neck pixels
    stay unchanged.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    h = image.shape[0]
    has = neck_mask.any(axis=0)
    top = np.where(has, neck_mask.argmax(axis=0), h)
    for col in np.flatnonzero(has):
        r0 = top[col]
        if r0 == 0:
            continue
        k = np.arange(r0, 0, -1, dtype=np.float32)  # distance per row 0..r0-1
        out[:r0, col, :] = image[r0, col, None, :] * (gamma ** k)[:, None]
    return out
