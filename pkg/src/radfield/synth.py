"""Synthetic talking-head scene with a closed-form density field.

The scene is an analytic piecewise-constant field in the canonical unit
cube: an opaque head sphere, two dark eye bumps whose radius follows the
eye ratio, and a mouth slot whose cavity height follows the mouth drive
m(t), opening onto a dark back plate. The torso is an image-space
trapezoid hung from the projected neck base, composited over a
checkerboard background, with the strip above the neck filled by
neck_inpaint. Audio logits are a soft one-hot of m(t) over LOGIT_DIM bins
plus Gaussian noise, so the drive stays recoverable to within one bin.

Ground truth images integrate the analytic field with ORACLE_SAMPLES
midpoint samples per ray: the exact same quadrature formula the renderer
implements, written independently here, which makes generated frames a
cross-check for the rendering path.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SCHEMA, neck_inpaint, save_mask, save_rgb
from .rendering import Camera, RayBatch, candidate_ts, generate_rays

LOGIT_DIM = 29
ORACLE_SAMPLES = 256

HEAD_CENTER = np.array([0.5, 0.5, 0.5])
HEAD_RADIUS = 0.4
HEAD_ALBEDO = np.array([0.85, 0.65, 0.55])
HEAD_SIGMA = 200.0

EYE_CENTERS = np.array([[0.36, 0.36, 0.13], [0.64, 0.36, 0.13]])
EYE_RADIUS_PER_RATIO = 12.0  # radius = 12 * e, so e in [0, 0.005] -> r <= 0.06
EYE_ALBEDO = np.array([0.05, 0.05, 0.08])
EYE_SIGMA = 400.0

MOUTH_X = (0.40, 0.60)
MOUTH_TOP = 0.62
MOUTH_MAX_HEIGHT = 0.20  # cavity height = 0.2 * m(t)
MOUTH_CAVITY_Z = (0.00, 0.45)
MOUTH_PLATE_Z = (0.45, 0.50)
MOUTH_PLATE_ALBEDO = np.array([0.02, 0.02, 0.02])
MOUTH_PLATE_SIGMA = 400.0

NECK_BASE = np.array([0.5, 0.88, 0.5])  # trapezoid hangs from its projection
TORSO_COLOR = np.array([0.20, 0.30, 0.55])
COLLAR_COLOR = np.array([0.15, 0.15, 0.20])
CHECKER_COLORS = (np.array([0.22, 0.24, 0.28]), np.array([0.38, 0.40, 0.44]))


@dataclass
class SyntheticSpec:
    num_frames: int = 500
    size: int = 64
    focal: float = 100.0
    seed: int = 0
    logit_noise: float = 0.05
    camera_distance: float = 1.8  # from head center along -z


class AnalyticField:
    """Density and albedo of the scene at one animation state."""

    def __init__(self, mouth: float, eye: float):
        self.mouth = float(mouth)
        self.eye = float(eye)

    def __call__(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(pts, dtype=np.float64)
        n = pts.shape[0]
        sigma = np.zeros(n)
        rgb = np.zeros((n, 3))

        head = ((pts - HEAD_CENTER) ** 2).sum(axis=1) < HEAD_RADIUS ** 2
        sigma[head] = HEAD_SIGMA
        rgb[head] = HEAD_ALBEDO

        r_eye = EYE_RADIUS_PER_RATIO * self.eye
        if r_eye > 0:
            for c in EYE_CENTERS:
                eye = ((pts - c) ** 2).sum(axis=1) < r_eye ** 2
                sigma[eye] = EYE_SIGMA
                rgb[eye] = EYE_ALBEDO

        in_slot = ((pts[:, 0] >= MOUTH_X[0]) & (pts[:, 0] <= MOUTH_X[1])
                   & (pts[:, 1] >= MOUTH_TOP)
                   & (pts[:, 1] <= MOUTH_TOP + MOUTH_MAX_HEIGHT))
        plate = (in_slot & (pts[:, 2] >= MOUTH_PLATE_Z[0])
                 & (pts[:, 2] <= MOUTH_PLATE_Z[1]))
        sigma[plate] = MOUTH_PLATE_SIGMA
        rgb[plate] = MOUTH_PLATE_ALBEDO

        opening = MOUTH_TOP + MOUTH_MAX_HEIGHT * self.mouth
        cavity = (in_slot & (pts[:, 1] <= opening)
                  & (pts[:, 2] >= MOUTH_CAVITY_Z[0])
                  & (pts[:, 2] < MOUTH_PLATE_Z[0]))
        sigma[cavity] = 0.0
        return sigma, rgb


class AnalyticHeadAdapter:
    """Presents an AnalyticField through the head-model query protocol.

    Lets the volume renderer march the closed-form scene directly, which
    is how generated frames double as a renderer oracle.
    """

    def __init__(self, field: AnalyticField, audio_dim: int = 2,
                 dtype=np.float64):
        self.field = field
        self.audio_dim = audio_dim
        self.dtype = dtype  # float64 keeps the oracle comparison below 1e-5

    def embedding_rows(self, frames: np.ndarray) -> ad.Tensor:
        return ad.as_tensor(np.zeros((len(frames), 1), dtype=self.dtype))

    def query(self, x, a: ad.Tensor, e, emb: ad.Tensor,
              want_color: bool = True):
        pts = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        sigma, rgb = self.field(pts)
        n = sigma.shape[0]
        xa = np.full((n, self.audio_dim), 0.5, dtype=self.dtype)
        return (ad.as_tensor(sigma[:, None].astype(self.dtype)),
                ad.as_tensor(rgb.astype(self.dtype)) if want_color else None,
                ad.as_tensor(xa))

    def density(self, x: np.ndarray, a: np.ndarray, e: float) -> np.ndarray:
        return self.field(np.asarray(x))[0].astype(np.float32)


def oracle_quadrature(field: AnalyticField, rays: RayBatch,
                      samples: int = ORACLE_SAMPLES
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the field along rays with midpoint samples.

    Independent implementation of the compositing sum: alpha from
    1 - exp(-sigma * delta) with the trailing delta taken to t_far,
    transmittance by exclusive cumulative product. Returns premultiplied
    color [N,3] and opacity [N].
    """
    n = len(rays)
    ts = candidate_ts(rays, samples, rng=None)  # [N,S] midpoints
    pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    sigma, rgb = field(pts.reshape(-1, 3))
    sigma = sigma.reshape(n, samples) * rays.hit[:, None]
    rgb = rgb.reshape(n, samples, 3)

    delta = np.empty_like(ts)
    delta[:, :-1] = ts[:, 1:] - ts[:, :-1]
    delta[:, -1] = rays.t_far - ts[:, -1]

    alpha = 1.0 - np.exp(-sigma * delta)
    surv = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((n, 1)), surv[:, :-1]], axis=1)
    weights = trans * alpha
    color = (weights[..., None] * rgb).sum(axis=1)
    return color, weights.sum(axis=1)


def band_limited_walk(rng: np.random.Generator, n: int,
                      smooth: int = 9) -> np.ndarray:
    """Smoothed random walk rescaled to exactly span [0, 1]."""
    steps = rng.normal(size=n + smooth)
    walk = np.cumsum(steps)
    kernel = np.ones(smooth) / smooth
    walk = np.convolve(walk, kernel, mode="valid")[:n]
    lo, hi = walk.min(), walk.max()
    return ((walk - lo) / max(hi - lo, 1e-12)).astype(np.float64)


def logits_from_drive(mouth: np.ndarray,
                      rng: np.random.Generator,
                      noise: float = 0.05) -> np.ndarray:
    """Soft one-hot of m(t) over LOGIT_DIM bins plus Gaussian noise.

    The bump is wide enough to be smooth but peaked enough that argmax
    recovers the drive to within one bin despite the noise.
    """
    centers = np.linspace(0.0, 1.0, LOGIT_DIM)
    width = 1.0 / (LOGIT_DIM - 1)
    logits = np.exp(-0.5 * ((mouth[:, None] - centers[None, :]) / width) ** 2)
    logits += rng.normal(scale=noise, size=logits.shape)
    return logits.astype(np.float32)


def debin_logits(logits: np.ndarray) -> np.ndarray:
    """Recover the mouth drive as the argmax bin center."""
    centers = np.linspace(0.0, 1.0, LOGIT_DIM)
    return centers[np.argmax(np.asarray(logits), axis=-1)]


def pose_trajectory(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal camera orbit around the head, always looking at it.

    The camera sits on a sphere of radius camera_distance around a pivot
    near the head center and aims straight at the pivot, so the head stays
    framed at any orbit amplitude. The +-0.25/0.15 rad sweep gives a few
    pixels of disparity per 0.1 of scene depth at the default focal, which
    is what makes depth identifiable to a radiance field at all; a
    pivot-about-the-camera wobble of a degree or two leaves the dataset
    effectively monocular. Small pivot offsets keep the framing from being
    pixel-static. Returns rotations [F,3,3] and translations [F,3] mapping
    canonical points into camera space.
    """
    f = np.arange(spec.num_frames, dtype=np.float64)
    ax = 0.15 * np.sin(2 * np.pi * f / 61.0)   # pitch, rad
    ay = 0.25 * np.sin(2 * np.pi * f / 97.0)   # yaw, rad
    ox = 0.5 + 0.03 * np.sin(2 * np.pi * f / 83.0)
    oy = 0.5 + 0.02 * np.cos(2 * np.pi * f / 71.0)

    rotations = np.empty((spec.num_frames, 3, 3))
    translations = np.empty((spec.num_frames, 3))
    back = np.array([0.0, 0.0, spec.camera_distance])
    for i in range(spec.num_frames):
        cx_, sx_ = np.cos(ax[i]), np.sin(ax[i])
        cy_, sy_ = np.cos(ay[i]), np.sin(ay[i])
        rx = np.array([[1, 0, 0], [0, cx_, -sx_], [0, sx_, cx_]])
        ry = np.array([[cy_, 0, sy_], [0, 1, 0], [-sy_, 0, cy_]])
        r = rx @ ry
        pivot = np.array([ox[i], oy[i], HEAD_CENTER[2]])
        # camera origin on the orbit sphere: R @ (pivot - origin) = back,
        # so the pivot lands on the optical axis in every frame
        origin = pivot - r.T @ back
        rotations[i] = r
        translations[i] = -r @ origin
    return rotations, translations


def checkerboard(size: int, cell: int = 8) -> np.ndarray:
    rows = np.arange(size) // cell
    parity = (rows[:, None] + rows[None, :]) % 2
    img = np.where(parity[..., None] == 0, CHECKER_COLORS[0], CHECKER_COLORS[1])
    return img.astype(np.float32)


def _project(camera: Camera, rotation: np.ndarray, translation: np.ndarray,
             point: np.ndarray) -> tuple[float, float]:
    p = rotation @ point + translation
    return (camera.focal * p[0] / p[2] + camera.cx,
            camera.focal * p[1] / p[2] + camera.cy)


def torso_plate(camera: Camera, rotation: np.ndarray, translation: np.ndarray,
                background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid hung from the projected neck base, over the background.

    Returns (plate, torso_mask) where the strip above the torso has been
    filled by neck_inpaint, as a capture pipeline would leave it.
    """
    h, w = background.shape[:2]
    nx, ny = _project(camera, rotation, translation, NECK_BASE)
    cols = np.arange(w, dtype=np.float64)[None, :]
    rows = np.arange(h, dtype=np.float64)[:, None]
    depth = np.clip((rows - ny) / max(h - ny, 1.0), 0.0, None)  # 0 at neck, 1 at bottom
    half_w = (0.18 + 0.16 * depth) * w
    inside = (rows >= ny) & (np.abs(cols - nx) <= half_w)
    img = background.copy()
    img[inside] = TORSO_COLOR
    collar = inside & (rows < ny + 0.09 * (h - ny))
    img[collar] = COLLAR_COLOR
    return neck_inpaint(img, inside), inside


def render_frame_float(camera: Camera, rotation: np.ndarray,
                       translation: np.ndarray, field: AnalyticField,
                       plate: np.ndarray,
                       samples: int = ORACLE_SAMPLES) -> np.ndarray:
    """Full-float ground truth: quadrature color over the torso plate."""
    rays = generate_rays(camera, rotation, translation)
    color, opacity = oracle_quadrature(field, rays, samples=samples)
    h, w = camera.height, camera.width
    color = color.reshape(h, w, 3)
    opacity = opacity.reshape(h, w, 1)
    return (color + (1.0 - opacity) * plate).astype(np.float32)


def face_mask(camera: Camera, rotation: np.ndarray,
              translation: np.ndarray) -> np.ndarray:
    """Pixels whose ray intersects the head sphere."""
    rays = generate_rays(camera, rotation, translation)
    oc = rays.origins - HEAD_CENTER
    b = (oc * rays.dirs).sum(axis=1)
    c = (oc * oc).sum(axis=1) - HEAD_RADIUS ** 2
    hit = b * b - c >= 0.0
    return hit.reshape(camera.height, camera.width)


def _head_front_z(x: float, y: float) -> float:
    """Depth of the head sphere's front surface above (x, y)."""
    d2 = (x - HEAD_CENTER[0]) ** 2 + (y - HEAD_CENTER[1]) ** 2
    return HEAD_CENTER[2] - np.sqrt(max(HEAD_RADIUS ** 2 - d2, 0.0))


def lips_rect(camera: Camera, rotation: np.ndarray,
              translation: np.ndarray) -> tuple[int, int, int, int]:
    """Image bounding box of the visible mouth slot at full opening.

    The visible cavity spans from the sphere's front surface down to the
    back plate, so the box corners use those depths rather than the full
    slot volume (which would overhang the face silhouette).
    """
    xs, ys = MOUTH_X, (MOUTH_TOP, MOUTH_TOP + MOUTH_MAX_HEIGHT)
    us, vs = [], []
    for x in xs:
        for y in ys:
            for z in (_head_front_z(x, y), MOUTH_PLATE_Z[1]):
                u, v = _project(camera, rotation, translation, np.array([x, y, z]))
                us.append(u)
                vs.append(v)
    x0 = int(np.clip(np.floor(min(us)), 0, camera.width - 1))
    y0 = int(np.clip(np.floor(min(vs)), 0, camera.height - 1))
    x1 = int(np.clip(np.ceil(max(us)), x0 + 1, camera.width))
    y1 = int(np.clip(np.ceil(max(vs)), y0 + 1, camera.height))
    return x0, y0, x1 - x0, y1 - y0


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> str:
    """Write a full dataset directory; returns the manifest path."""
    rng = np.random.default_rng(spec.seed)
    for sub in ("frames", "torso", "masks", "audio"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    camera = Camera(focal=spec.focal, cx=spec.size / 2.0, cy=spec.size / 2.0,
                    width=spec.size, height=spec.size)
    mouth = band_limited_walk(rng, spec.num_frames)
    eye = 0.005 * (0.2 + 0.8 * band_limited_walk(rng, spec.num_frames))
    logits = logits_from_drive(mouth, rng, noise=spec.logit_noise)
    rotations, translations = pose_trajectory(spec)

    background = checkerboard(spec.size)
    save_rgb(os.path.join(out_dir, "background.png"), background)
    logits.astype("<f4").tofile(os.path.join(out_dir, "audio", "logits.f32"))

    entries = []
    for i in range(spec.num_frames):
        rot, tr = rotations[i], translations[i]
        plate, _ = torso_plate(camera, rot, tr, background)
        field = AnalyticField(mouth=mouth[i], eye=eye[i])
        img = render_frame_float(camera, rot, tr, field, plate)
        mask = face_mask(camera, rot, tr)

        name = f"{i:04d}.png"
        save_rgb(os.path.join(out_dir, "frames", name), img)
        save_rgb(os.path.join(out_dir, "torso", name), plate)
        save_mask(os.path.join(out_dir, "masks", name), mask)
        pose = np.eye(4)
        pose[:3, :3] = rot
        pose[:3, 3] = tr
        entries.append({
            "image": f"frames/{name}",
            "torso": f"torso/{name}",
            "mask": f"masks/{name}",
            "pose": [[float(v) for v in row] for row in pose],
            "eye": float(eye[i]),
            "lips": list(lips_rect(camera, rot, tr)),
            "audio": i,
        })

    manifest = {
        "schema": SCHEMA,
        "camera": {"focal": camera.focal, "cx": camera.cx, "cy": camera.cy,
                   "width": camera.width, "height": camera.height},
        "background": "background.png",
        "logits": {"path": "audio/logits.f32", "dim": LOGIT_DIM},
        "frames": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path
