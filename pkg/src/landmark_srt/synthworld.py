"""Synthetic multi-view video with exact ground truth.

The subject is a rigid textured plate (the plane ``z = 0`` of an object frame)
carrying ``K`` planar landmarks. Its pose changes smoothly over time and it is
seen by ``M`` static pinhole cameras. Because the plate is planar, the image of
plate point ``(a, b)`` in view ``m`` at frame ``t`` is the homography

    H_mt = P_m @ [[R_t[:, 0], R_t[:, 1], T_t], [0, 0, 1]]

so rendering (evaluate the texture at ``H^-1 x``) and dense flow
(``H_mt H_m(t-1)^-1 x - x``) are both exact.

The module also holds the training-time image transforms: the six-step
augmentation, the random affine pairs used for the P-error, and annotation
noise.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera_geometry import format_camera, look_at_camera, parse_camera, project
from .rng import stream
from .tensor_core import read_flow, read_pf2, sample, write_flow, write_pf2


class ConfigInfeasibleError(ValueError):
    """The configured motion or cameras take landmarks out of frame."""


# landmark layout in plate units; the first K are used
TEMPLATE = np.array([
    [-0.45, -0.35], [0.45, -0.35], [0.0, 0.05], [-0.3, 0.42], [0.3, 0.42],
    [0.0, -0.55], [-0.6, 0.05], [0.6, 0.05], [0.0, 0.5],
])
# fixed per-landmark blob contrast, shared by all subjects
CONTRAST = np.array([1.0, -1.0, 0.8, -0.8, 1.2, -0.6, 0.6, -1.2, 0.9])


@dataclass
class SceneConfig:
    K: int = 5
    M: int = 4
    T: int = 50
    image_size: int = 64
    focal: float = 110.0
    distance: float = 4.0
    yaw_spread_deg: float = 30.0
    pitch_deg: float = 8.0
    rot_amp_deg: tuple = (15.0, 10.0, 10.0)
    trans_amp: tuple = (0.2, 0.2, 0.3)
    period_range: tuple = (25.0, 60.0)
    layout_jitter: float = 0.06
    n_blobs: int = 40
    landmark_sigma: float = 0.08
    blob_sigma: tuple = (0.05, 0.12)
    blob_amp: float = 0.6
    margin: float = 8.0
    label_noise_std: float = 0.0
    corruption_frac: float = 0.0
    corruption_size: int = 9
    subject: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("rot_amp_deg", "trans_amp", "period_range", "blob_sigma"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.K < 1 or self.M < 1 or self.T < 1:
            raise ValueError("K, M and T must be at least 1")
        if self.K > len(TEMPLATE):
            raise ValueError(f"at most {len(TEMPLATE)} landmarks are supported")
        if self.image_size < 16 or self.focal <= 0 or self.distance <= 0:
            raise ValueError("image_size, focal and distance must be positive (image >= 16)")
        if self.label_noise_std < 0 or not 0 <= self.corruption_frac <= 1:
            raise ValueError("bad noise or corruption settings")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scene keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Subject:
    landmarks: np.ndarray   # (K, 2) plate coordinates
    blob_centers: np.ndarray
    blob_sigmas: np.ndarray
    blob_amps: np.ndarray
    landmark_sigma: float
    contrast: np.ndarray

    def texture(self, a, b):
        """Plate intensity at plate coordinates ``(a, b)``."""
        a = np.asarray(a, dtype=np.float64)[..., None]
        b = np.asarray(b, dtype=np.float64)[..., None]
        lm = self.landmarks
        out = 0.5 + np.sum(self.contrast * np.exp(-((a - lm[:, 0]) ** 2 + (b - lm[:, 1]) ** 2)
                                                  / (2 * self.landmark_sigma ** 2)), axis=-1)
        c = self.blob_centers
        out += np.sum(self.blob_amps * np.exp(-((a - c[:, 0]) ** 2 + (b - c[:, 1]) ** 2)
                                              / (2 * self.blob_sigmas ** 2)), axis=-1)
        return out


def make_subject(cfg: SceneConfig, subject: int | None = None) -> Subject:
    sid = cfg.subject if subject is None else subject
    rng = stream(cfg.seed, "subject", sid)
    lm = TEMPLATE[:cfg.K] + rng.normal(scale=cfg.layout_jitter, size=(cfg.K, 2))
    n = cfg.n_blobs
    return Subject(
        landmarks=lm,
        blob_centers=rng.uniform(-1.5, 1.5, (n, 2)),
        blob_sigmas=rng.uniform(*cfg.blob_sigma, n),
        blob_amps=rng.uniform(-cfg.blob_amp, cfg.blob_amp, n),
        landmark_sigma=cfg.landmark_sigma,
        contrast=CONTRAST[:cfg.K].copy(),
    )


def rotation(yaw, pitch, roll) -> np.ndarray:
    """``Ry(yaw) @ Rx(pitch) @ Rz(roll)``, angles in radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Ry @ Rx @ Rz


def make_cameras(cfg: SceneConfig, yaws_deg=None) -> np.ndarray:
    """Cameras on an arc on the ``-z`` side, all looking at the origin."""
    if yaws_deg is None:
        yaws_deg = np.linspace(-cfg.yaw_spread_deg, cfg.yaw_spread_deg, cfg.M) if cfg.M > 1 else [0.0]
    c = (cfg.image_size - 1) / 2.0
    cams = []
    for i, yd in enumerate(yaws_deg):
        yaw = np.deg2rad(yd)
        pitch = np.deg2rad(cfg.pitch_deg) * (1 if i % 2 else -1) if cfg.M > 1 else 0.0
        pos = cfg.distance * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), -np.cos(yaw) * np.cos(pitch)])
        cams.append(look_at_camera(pos, focal=cfg.focal, principal=(c, c)))
    return np.array(cams)


def pose_trajectory(cfg: SceneConfig):
    """Per-frame rotations ``(T, 3, 3)`` and translations ``(T, 3)``."""
    rng = stream(cfg.seed, "motion", cfg.subject)
    lo, hi = cfg.period_range
    w = 2 * np.pi / rng.uniform(lo, hi, 6)
    ph = rng.uniform(0, 2 * np.pi, 6)
    amp_r = np.deg2rad(cfg.rot_amp_deg)
    amp_t = np.asarray(cfg.trans_amp)
    # the plate is turned by 180 degrees about z so image "up" is plate "up"
    base = rotation(0.0, 0.0, np.pi)
    Rs, Ts = [], []
    for t in range(cfg.T):
        ang = amp_r * np.sin(w[:3] * t + ph[:3])
        Rs.append(rotation(*ang) @ base)
        Ts.append(amp_t * np.sin(w[3:] * t + ph[3:]))
    return np.array(Rs), np.array(Ts)


def plate_homography(P, R, T) -> np.ndarray:
    """3x3 map from homogeneous plate coordinates to pixels."""
    E = np.zeros((4, 3))
    E[:3, 0] = R[:, 0]
    E[:3, 1] = R[:, 1]
    E[:3, 2] = T
    E[3, 2] = 1.0
    return P @ E


def apply_homography(Hm, xs, ys):
    q = Hm[:, 0, None] * xs.ravel() + Hm[:, 1, None] * ys.ravel() + Hm[:, 2, None]
    return (q[0] / q[2]).reshape(xs.shape), (q[1] / q[2]).reshape(xs.shape)


def render(subject: Subject, Hm, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    a, b = apply_homography(np.linalg.inv(Hm), xs, ys)
    return subject.texture(a, b)


def landmark_bbox(points, expand: float = 0.25) -> np.ndarray:
    """Tight box ``(x0, y0, x1, y1)`` around the points, grown by ``expand``."""
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    c, half = (lo + hi) / 2, (hi - lo) / 2 * (1 + expand)
    return np.concatenate([c - half, c + half])


def bbox_scale(bbox) -> float:
    """``sqrt`` of the box area, the size normaliser used everywhere."""
    b = np.asarray(bbox, dtype=np.float64)
    return float(np.sqrt((b[2] - b[0]) * (b[3] - b[1])))


@dataclass
class Scene:
    config: SceneConfig
    cameras: np.ndarray            # (M, 3, 4)
    images: np.ndarray             # (M, T, S, S)
    landmarks2d: np.ndarray        # (M, T, K, 2)
    landmarks3d: np.ndarray        # (T, K, 3)
    flow: np.ndarray               # (M, T, 2, S, S): frame t-1 -> t on the grid of t-1
    bflow: np.ndarray              # (M, T, 2, S, S): same motion on the grid of t
    bboxes: np.ndarray             # (M, T, 4)
    homographies: np.ndarray = field(repr=False, default=None)   # (M, T, 3, 3)
    subject: Subject | None = field(repr=False, default=None)
    corruptions: list = field(default_factory=list)               # (m, t, k)

    @property
    def shape(self):
        return self.images.shape[:2]

    def render_points(self, m: int, t: int, pts) -> np.ndarray:
        """Exact (continuous) image intensity of view ``m``, frame ``t`` at ``pts``."""
        pts = np.asarray(pts, dtype=np.float64)
        a, b = apply_homography(np.linalg.inv(self.homographies[m, t]), pts[..., 0], pts[..., 1])
        return self.subject.texture(a, b)


def _flows(H_prev, H_curr, size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    fx, fy = apply_homography(H_curr @ np.linalg.inv(H_prev), xs, ys)
    bx, by = apply_homography(H_prev @ np.linalg.inv(H_curr), xs, ys)
    return np.stack([fx - xs, fy - ys]), np.stack([xs - bx, ys - by])


def paste_occluder(image, center, size: int, rng) -> np.ndarray:
    """Copy of ``image`` with a random-noise square pasted at ``center``."""
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = out.shape
    cx, cy = int(round(center[0])), int(round(center[1]))
    r = size // 2
    y0, y1 = max(0, cy - r), min(h, cy + r + 1)
    x0, x1 = max(0, cx - r), min(w, cx + r + 1)
    out[y0:y1, x0:x1] = rng.uniform(-1.0, 2.0, (y1 - y0, x1 - x0))
    return out


def generate_scene(cfg: SceneConfig) -> Scene:
    """Render a deterministic multi-view video of one subject."""
    S = cfg.image_size
    subj = make_subject(cfg)
    cams = make_cameras(cfg)
    Rs, Ts = pose_trajectory(cfg)
    lm_obj = np.concatenate([subj.landmarks, np.zeros((cfg.K, 1))], axis=1)
    X = np.einsum("tij,kj->tki", Rs, lm_obj) + Ts[:, None, :]
    L2 = np.array([[[project(P, x) for x in X[t]] for t in range(cfg.T)] for P in cams])
    lo, hi = cfg.margin, S - 1 - cfg.margin
    if np.any(L2 < lo) or np.any(L2 > hi):
        raise ConfigInfeasibleError(
            f"landmarks leave the frame (range {L2.min():.1f}..{L2.max():.1f}, allowed {lo}..{hi})")
    Hs = np.array([[plate_homography(P, Rs[t], Ts[t]) for t in range(cfg.T)] for P in cams])
    images = np.array([[render(subj, Hs[m, t], S) for t in range(cfg.T)] for m in range(cfg.M)])
    flow = np.zeros((cfg.M, cfg.T, 2, S, S))
    bflow = np.zeros_like(flow)
    for m in range(cfg.M):
        for t in range(1, cfg.T):
            flow[m, t], bflow[m, t] = _flows(Hs[m, t - 1], Hs[m, t], S)
    bboxes = np.array([[landmark_bbox(L2[m, t]) for t in range(cfg.T)] for m in range(cfg.M)])
    corruptions = []
    if cfg.corruption_frac > 0 and cfg.T > 1:
        rng = stream(cfg.seed, "corruption", cfg.subject)
        for m in range(cfg.M):
            for t in range(1, cfg.T):
                if rng.random() < cfg.corruption_frac:
                    k = int(rng.integers(cfg.K))
                    images[m, t] = paste_occluder(images[m, t], L2[m, t, k], cfg.corruption_size, rng)
                    corruptions.append((m, t, k))
    return Scene(cfg, cams, images, L2, X, flow, bflow, bboxes, Hs, subj, corruptions)


@dataclass
class ImageSet:
    """Independent labelled images (one random subject, pose and view each)."""

    images: np.ndarray     # (N, S, S)
    landmarks: np.ndarray  # (N, K, 2)
    bboxes: np.ndarray     # (N, 4)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.landmarks[idx], self.bboxes[idx])


def generate_image_set(cfg: SceneConfig, n: int, name: str = "labeled") -> ImageSet:
    """``n`` single frames of distinct subjects from random poses and views.

    Subject ids are drawn from a namespace disjoint per ``name`` so labelled,
    test and video subjects never coincide.
    """
    rng = stream(cfg.seed, "imageset", name)
    S = cfg.image_size
    imgs, lms, boxes = [], [], []
    for i in range(n):
        subj = make_subject(cfg, subject=f"{name}-{i}")
        yaw = rng.uniform(-cfg.yaw_spread_deg, cfg.yaw_spread_deg)
        cam = make_cameras(SceneConfig(**{**asdict(cfg), "M": 1}), yaws_deg=[yaw])[0]
        for _ in range(100):
            ang = np.deg2rad(cfg.rot_amp_deg) * rng.uniform(-1, 1, 3)
            R = rotation(*ang) @ rotation(0.0, 0.0, np.pi)
            T = np.asarray(cfg.trans_amp) * rng.uniform(-1, 1, 3)
            X = np.concatenate([subj.landmarks, np.zeros((cfg.K, 1))], axis=1) @ R.T + T
            L = np.array([project(cam, x) for x in X])
            if L.min() >= cfg.margin and L.max() <= S - 1 - cfg.margin:
                break
        else:
            raise ConfigInfeasibleError("could not place a labelled subject in frame")
        imgs.append(render(subj, plate_homography(cam, R, T), S))
        lms.append(L)
        boxes.append(landmark_bbox(L))
    return ImageSet(np.array(imgs), np.array(lms), np.array(boxes))


def perturb_annotations(labels, std: float, seed: int, name: str = "label_noise") -> np.ndarray:
    """I.i.d. Gaussian offsets of standard deviation ``std`` on every coordinate."""
    if std < 0:
        raise ValueError("std must be non-negative")
    labels = np.asarray(labels, dtype=np.float64)
    if std == 0:
        return labels.copy()
    return labels + stream(seed, name).normal(scale=std, size=labels.shape)


# --- affine crops ----------------------------------------------------------

def affine_apply(theta, pts) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ theta[:, :2].T + theta[:, 2]


def affine_invert(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    A = theta[:, :2]
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("affine transform is not invertible")
    Ai = np.linalg.inv(A)
    return np.hstack([Ai, (-Ai @ theta[:, 2])[:, None]])


def crop_transform(center, size, angle_deg: float, out_size: int) -> np.ndarray:
    """2x3 map from image to crop pixels.

    The square of side ``size`` centred at ``center`` and rotated by
    ``angle_deg`` becomes the ``out_size`` crop; image content turns by
    ``+angle_deg`` (counter-clockwise on screen, y down) about the crop centre.
    """
    s = out_size / float(size)
    a = np.deg2rad(angle_deg)
    c, si = np.cos(a), np.sin(a)
    # y points down, so a counter-clockwise turn on screen is [[c, s], [-s, c]]
    A = s * np.array([[c, si], [-si, c]])
    oc = (out_size - 1) / 2.0
    return np.hstack([A, (np.array([oc, oc]) - A @ np.asarray(center, dtype=np.float64))[:, None]])


def warp_crop(image, theta, out_size: int, padding: str = "border") -> np.ndarray:
    """Resample ``image`` into the ``out_size`` crop given by ``theta``."""
    inv = affine_invert(theta)
    ys, xs = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    src = affine_apply(inv, np.stack([xs.ravel(), ys.ravel()], axis=1))
    return sample(image, src[:, 0], src[:, 1], padding=padding).reshape(out_size, out_size)


def expand_box(bbox, frac: float):
    b = np.asarray(bbox, dtype=np.float64)
    c = (b[:2] + b[2:]) / 2
    wh = (b[2:] - b[:2]) * (1 + frac)
    return c, wh


@dataclass(frozen=True)
class AugmentConfig:
    expand: float = 0.2
    resize_range: tuple = (0.9, 1.1)
    resize_prob: float = 0.5
    max_shift: float = 0.1
    max_rotation_deg: float = 40.0
    out_size: int = 32
    intensity_range: tuple = (0.6, 1.4)


@dataclass(frozen=True)
class AugmentDraw:
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)      # fractions of the box side
    angle_deg: float = 0.0
    intensity: float = 1.0


def draw_augment(rng, cfg: AugmentConfig = AugmentConfig()) -> AugmentDraw:
    scale = rng.uniform(*cfg.resize_range) if rng.random() < cfg.resize_prob else 1.0
    shift = tuple(rng.uniform(-cfg.max_shift, cfg.max_shift, 2))
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    intensity = rng.uniform(*cfg.intensity_range)
    return AugmentDraw(scale, shift, angle, intensity)


@dataclass
class Crop:
    image: np.ndarray
    theta: np.ndarray      # image -> crop
    labels: np.ndarray | None


def _check_box(image, bbox):
    b = np.asarray(bbox, dtype=np.float64)
    h, w = np.shape(image)
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ValueError("empty bounding box")
    if b[0] < -0.5 or b[1] < -0.5 or b[2] > w - 0.5 or b[3] > h - 0.5:
        raise ValueError("bounding box is not inside the image")
    return b


def augment(image, bbox, labels, rng=None, cfg: AugmentConfig = AugmentConfig(),
            draw: AugmentDraw | None = None) -> Crop:
    """Expand, resize, translate, rotate, crop, scale intensity, in that order.

    Labels go through the same 2x3 map as the pixels. With ``draw`` the random
    choices are taken from it instead of ``rng``.
    """
    b = _check_box(image, bbox)
    if draw is None:
        draw = draw_augment(rng, cfg)
    # 1. expand the box
    c, wh = expand_box(b, cfg.expand)
    side = float(np.max(wh))
    # 2. resizing the image by s is a crop of side/s at the same place
    side /= draw.scale
    # 3. translate the crop window
    c = c + np.asarray(draw.shift) * side
    if side <= 1.0:
        raise ValueError("augmented crop is empty")
    # 4./5. rotate about the window centre and crop
    theta = crop_transform(c, side, draw.angle_deg, cfg.out_size)
    crop = warp_crop(image, theta, cfg.out_size)
    # 6. intensity
    crop = crop * draw.intensity
    lab = None if labels is None else affine_apply(theta, labels)
    return Crop(crop, theta, lab)


def center_crop(image, bbox, labels=None, cfg: AugmentConfig = AugmentConfig()) -> Crop:
    """The deterministic crop of the expanded box used at test time."""
    return augment(image, bbox, labels, cfg=cfg, draw=AugmentDraw())


@dataclass(frozen=True)
class EltConfig:
    expand: float = 0.2
    scale_range: tuple = (0.8, 1.2)
    max_shift: float = 0.1
    max_rotation_deg: float = 30.0
    out_size: int = 32


def elt_theta(bbox, rng, cfg: EltConfig = EltConfig()) -> np.ndarray:
    c, wh = expand_box(bbox, cfg.expand)
    side = float(np.max(wh)) * rng.uniform(*cfg.scale_range)
    c = c + rng.uniform(-cfg.max_shift, cfg.max_shift, 2) * side
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    return crop_transform(c, side, angle, cfg.out_size)


def elt_transform_pair(image, bbox, rng, cfg: EltConfig = EltConfig()):
    """Two independently transformed crops: ``(img_a, theta_a, img_b, theta_b)``."""
    _check_box(image, bbox)
    ta = elt_theta(bbox, rng, cfg)
    tb = elt_theta(bbox, rng, cfg)
    return warp_crop(image, ta, cfg.out_size), ta, warp_crop(image, tb, cfg.out_size), tb


# --- scene directories -----------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def _echo_config(cfg: SceneConfig) -> list[str]:
    lines = []
    for k, v in cfg.to_dict().items():
        vals = v if isinstance(v, list) else [v]
        lines.append("config " + k + " " + " ".join(str(x) for x in vals))
    return lines


def _parse_config(lines) -> SceneConfig:
    d = {}
    tuples = {f.name for f in fields(SceneConfig) if isinstance(f.default, tuple)}
    ints = {f.name for f in fields(SceneConfig) if isinstance(f.default, int)}
    for ln in lines:
        _, key, *vals = ln.split()
        if key in tuples:
            d[key] = tuple(float(x) for x in vals)
        elif key in ints:
            d[key] = int(vals[0])
        else:
            d[key] = float(vals[0])
    return SceneConfig(**d)


def write_scene(scene: Scene, path) -> None:
    cfg = scene.config
    os.makedirs(path, exist_ok=True)
    M, T = scene.shape
    lines = ["scene v1"] + _echo_config(cfg)
    lines += [f"camera {m} " + format_camera(scene.cameras[m]) for m in range(M)]
    lines += [f"corruption {m} {t} {k}" for m, t, k in scene.corruptions]
    with open(os.path.join(path, "manifest"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    rows = []
    for t in range(T):
        for m in range(M):
            for k in range(cfg.K):
                x, y = scene.landmarks2d[m, t, k]
                rows.append(f"2d {t} {m} {k} {_fmt(x)} {_fmt(y)}")
    for t in range(T):
        for k in range(cfg.K):
            rows.append(f"3d {t} {k} " + " ".join(_fmt(v) for v in scene.landmarks3d[t, k]))
    with open(os.path.join(path, "labels"), "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    for m in range(M):
        vdir = os.path.join(path, f"view{m}")
        os.makedirs(vdir, exist_ok=True)
        for t in range(T):
            write_pf2(os.path.join(vdir, f"frame{t}.pf2"), scene.images[m, t])
            if t >= 1:
                write_flow(os.path.join(vdir, f"flow{t}.flow"), *scene.flow[m, t])
                write_flow(os.path.join(vdir, f"bflow{t}.flow"), *scene.bflow[m, t])


def read_scene(path) -> Scene:
    """Load a scene directory; the continuous renderer is rebuilt from the config."""
    mpath = os.path.join(path, "manifest")
    if not os.path.isfile(mpath):
        raise FileNotFoundError(f"no scene manifest at {mpath}")
    with open(mpath) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "scene v1":
        raise ValueError(f"{mpath} is not a scene manifest")
    cfg = _parse_config([ln for ln in lines if ln.startswith("config ")])
    cams = np.array([parse_camera(ln.split(None, 2)[2]) for ln in lines if ln.startswith("camera ")])
    corr = [tuple(int(v) for v in ln.split()[1:]) for ln in lines if ln.startswith("corruption ")]
    M, T, K, S = cfg.M, cfg.T, cfg.K, cfg.image_size
    L2 = np.zeros((M, T, K, 2))
    L3 = np.zeros((T, K, 3))
    with open(os.path.join(path, "labels")) as fh:
        for ln in fh:
            p = ln.split()
            if p[0] == "2d":
                t, m, k = int(p[1]), int(p[2]), int(p[3])
                L2[m, t, k] = float(p[4]), float(p[5])
            elif p[0] == "3d":
                t, k = int(p[1]), int(p[2])
                L3[t, k] = [float(v) for v in p[3:6]]
    images = np.zeros((M, T, S, S))
    flow = np.zeros((M, T, 2, S, S))
    bflow = np.zeros_like(flow)
    for m in range(M):
        vdir = os.path.join(path, f"view{m}")
        for t in range(T):
            images[m, t] = read_pf2(os.path.join(vdir, f"frame{t}.pf2"))
            if t >= 1:
                flow[m, t] = read_flow(os.path.join(vdir, f"flow{t}.flow"))
                bflow[m, t] = read_flow(os.path.join(vdir, f"bflow{t}.flow"))
    bboxes = np.array([[landmark_bbox(L2[m, t]) for t in range(T)] for m in range(M)])
    Rs, Ts = pose_trajectory(cfg)
    Hs = np.array([[plate_homography(cams[m], Rs[t], Ts[t]) for t in range(T)] for m in range(M)])
    return Scene(cfg, cams, images, L2, L3, flow, bflow, bboxes, Hs, make_subject(cfg), corr)


def write_image_set(iset: ImageSet, path) -> None:
    os.makedirs(path, exist_ok=True)
    N, K = iset.landmarks.shape[:2]
    with open(os.path.join(path, "manifest"), "w", newline="\n") as fh:
        fh.write(f"imageset v1\ncount {N}\nK {K}\n")
    rows = [f"{i} {k} {_fmt(x)} {_fmt(y)}" for i in range(N) for k, (x, y) in enumerate(iset.landmarks[i])]
    with open(os.path.join(path, "labels"), "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(os.path.join(path, "bboxes"), "w", newline="\n") as fh:
        fh.write("\n".join(" ".join(_fmt(v) for v in b) for b in iset.bboxes) + "\n")
    for i in range(N):
        write_pf2(os.path.join(path, f"img{i}.pf2"), iset.images[i])


def read_image_set(path) -> ImageSet:
    mpath = os.path.join(path, "manifest")
    if not os.path.isfile(mpath):
        raise FileNotFoundError(f"no image-set manifest at {mpath}")
    with open(mpath) as fh:
        head = fh.read().split()
    if head[:2] != ["imageset", "v1"]:
        raise ValueError(f"{mpath} is not an image-set manifest")
    N, K = int(head[3]), int(head[5])
    L = np.zeros((N, K, 2))
    with open(os.path.join(path, "labels")) as fh:
        for ln in fh:
            i, k, x, y = ln.split()
            L[int(i), int(k)] = float(x), float(y)
    B = np.loadtxt(os.path.join(path, "bboxes"), ndmin=2)
    imgs = np.array([read_pf2(os.path.join(path, f"img{i}.pf2")) for i in range(N)])
    return ImageSet(imgs, L, B)
