"""Procedural 68-point faces with known pose, expression and identity.

Used as a planted-truth source: shapes come from a 3-D template that is
deformed (identity, expression), rotated in yaw, projected orthographically
and placed by a 2-D similarity. ``render_face`` draws a grayscale image whose
local structure around each landmark is consistent across samples, so
detectors trained on renders transfer to new renders.

Template units: the jaw spans x in [-1, 1]; y grows downward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .schemes import FRONTAL_68

EXPRESSIONS = ("neutral", "smile")
DEFAULT_POSES = (0.0, 20.0, 40.0)
POSE_JITTER = 6.0


def _template_3d() -> np.ndarray:
    p = np.zeros((68, 3))
    phi = np.linspace(0, np.pi, 17)
    p[:17, 0] = -np.cos(phi) * (1 - 0.12 * np.sin(phi) ** 2)
    p[:17, 1] = -0.25 + 1.28 * np.sin(phi) ** 1.15
    p[:17, 2] = -0.45 + 0.85 * np.sin(phi)
    bx = np.linspace(-0.82, -0.2, 5)
    p[17:22, 0] = bx
    p[17:22, 1] = -0.56 - 0.09 * np.sin(np.linspace(0.3, np.pi - 0.3, 5))
    p[17:22, 2] = 0.25
    p[22:27, 0] = -bx[::-1]
    p[22:27, 1] = p[17:22, 1][::-1]
    p[22:27, 2] = 0.25
    p[27:31, 0] = 0.0
    p[27:31, 1] = np.linspace(-0.38, 0.1, 4)
    p[27:31, 2] = np.linspace(0.45, 0.8, 4)
    p[31:36, 0] = np.linspace(-0.2, 0.2, 5)
    p[31:36, 1] = [0.2, 0.23, 0.25, 0.23, 0.2]
    p[31:36, 2] = [0.45, 0.55, 0.62, 0.55, 0.45]
    right_eye = [(-0.62, -0.3), (-0.5, -0.365), (-0.34, -0.365), (-0.22, -0.3), (-0.34, -0.245), (-0.5, -0.245)]
    p[36:42, :2] = right_eye
    p[42:48, :2] = [(-x, y) for x, y in (right_eye[3], right_eye[2], right_eye[1], right_eye[0], right_eye[5], right_eye[4])]
    p[36:48, 2] = 0.3
    outer = [(-0.36, 0.56), (-0.22, 0.49), (-0.08, 0.46), (0.0, 0.475), (0.08, 0.46), (0.22, 0.49),
             (0.36, 0.56), (0.22, 0.64), (0.08, 0.67), (0.0, 0.675), (-0.08, 0.67), (-0.22, 0.64)]
    p[48:60, :2] = outer
    inner = [(-0.3, 0.56), (-0.1, 0.54), (0.0, 0.545), (0.1, 0.54), (0.3, 0.56), (0.1, 0.58), (0.0, 0.585), (-0.1, 0.58)]
    p[60:68, :2] = inner
    p[48:68, 2] = 0.42 - 0.25 * np.abs(p[48:68, 0])
    return p


TEMPLATE_3D = _template_3d()

_RIGHT_EYE = np.arange(36, 42)
_LEFT_EYE = np.arange(42, 48)
_MOUTH = np.arange(48, 68)
_LOWER_LIP = np.array([55, 56, 57, 58, 59, 65, 66, 67])
_UPPER_LIP = np.array([49, 50, 51, 52, 53, 61, 62, 63])
_CORNERS = np.array([48, 54, 60, 64])


@dataclass
class FaceParams:
    """Everything needed to regenerate one synthetic face shape.

    ``identity`` holds eight coefficients in template units (face width,
    face length, eye spacing, eye size, mouth width, nose length, brow
    height, mouth height). ``smile`` and ``mouth_open`` drive the expression.
    """

    yaw: float = 0.0
    roll: float = 0.0
    scale: float = 75.0
    center: tuple[float, float] = (128.0, 128.0)
    identity: np.ndarray = field(default_factory=lambda: np.zeros(8))
    smile: float = 0.0
    mouth_open: float = 0.0
    jitter: np.ndarray | None = None


def deformed_template(params: FaceParams) -> np.ndarray:
    p = TEMPLATE_3D.copy()
    a = np.asarray(params.identity, dtype=float)
    p[:17, 0] *= 1 + a[0]
    p[[17, 26], 0] *= 1 + 0.5 * a[0]
    p[9:16, 1] += a[1] * (p[9:16, 1] + 0.25)
    p[1:8, 1] += a[1] * (p[1:8, 1] + 0.25)
    p[8, 1] += a[1] * 1.03
    for eye, sign in ((_RIGHT_EYE, -1), (_LEFT_EYE, 1)):
        c = p[eye, :2].mean(axis=0)
        p[eye, :2] = c + (p[eye, :2] - c) * (1 + a[3])
        p[eye, 0] += sign * a[2]
    mc = p[_MOUTH, :2].mean(axis=0)
    p[_MOUTH, 0] = mc[0] + (p[_MOUTH, 0] - mc[0]) * (1 + a[4])
    p[27:36, 1] = -0.38 + (p[27:36, 1] + 0.38) * (1 + a[5])
    p[17:27, 1] += a[6]
    p[_MOUTH, 1] += a[7]

    # expression
    s = params.smile
    p[_CORNERS, 0] += np.sign(p[_CORNERS, 0]) * 0.07 * s
    p[_CORNERS, 1] -= 0.08 * s
    p[[49, 53, 59, 55], 1] -= 0.03 * s
    p[[49, 53], 0] += np.sign(p[[49, 53], 0]) * 0.03 * s
    p[_LOWER_LIP, 1] += params.mouth_open
    p[_UPPER_LIP, 1] -= 0.15 * params.mouth_open
    return p


def project(points3d: np.ndarray, yaw_deg: float) -> np.ndarray:
    y = np.deg2rad(yaw_deg)
    x = points3d[:, 0] * np.cos(y) + points3d[:, 2] * np.sin(y)
    return np.stack([x, points3d[:, 1]], axis=1)


def face_shape(params: FaceParams) -> np.ndarray:
    """Image-space 68-point shape for ``params``."""
    pts = project(deformed_template(params), params.yaw)
    if params.jitter is not None:
        pts = pts + params.jitter
    r = np.deg2rad(params.roll)
    rot = np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])
    return params.scale * pts @ rot.T + np.asarray(params.center)


def sample_params(rng: np.random.Generator, pose: float, expression: str, *,
                  pose_jitter: float = POSE_JITTER, scale_range=(68.0, 82.0), roll_range=8.0,
                  center=(128.0, 128.0), center_jitter: float = 8.0,
                  identity_std: float = 0.04, mouth_std: float = 0.02,
                  landmark_noise: float = 0.008, contour_slide: float = 0.02) -> FaceParams:
    """Random face of one (pose, expression) mode.

    ``landmark_noise`` mimics annotation noise; ``contour_slide`` moves jaw
    points along the jaw direction (placement ambiguity of contour points).
    """
    if expression not in EXPRESSIONS:
        raise ValueError(f"unknown expression {expression!r}")
    identity = rng.normal(0, identity_std, 8)
    identity[[4, 7]] = rng.normal(0, mouth_std, 2)
    if expression == "smile":
        smile = rng.uniform(0.8, 1.2)
        mouth_open = rng.uniform(0.02, 0.06)
    else:
        smile = rng.uniform(-0.1, 0.15)
        mouth_open = rng.uniform(0.0, 0.015)
    jitter = rng.normal(0, landmark_noise, (68, 2))
    if contour_slide > 0:
        tang = np.gradient(TEMPLATE_3D[:17, :2], axis=0)
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        jitter[1:16] += rng.normal(0, contour_slide, (15, 1)) * tang[1:16]
    return FaceParams(
        yaw=pose + rng.uniform(-pose_jitter, pose_jitter),
        roll=rng.uniform(-roll_range, roll_range),
        scale=rng.uniform(*scale_range),
        center=tuple(np.asarray(center) + rng.uniform(-center_jitter, center_jitter, 2)),
        identity=identity,
        smile=smile,
        mouth_open=mouth_open,
        jitter=jitter,
    )


def face_box(shape: np.ndarray) -> tuple[float, float, float, float]:
    """Square face box derived from landmarks (stand-in for a face detector)."""
    lo, hi = shape.min(axis=0), shape.max(axis=0)
    w = hi[0] - lo[0]
    h = hi[1] - lo[1]
    side = max(w, 0.9 * h)
    cx = 0.5 * (lo[0] + hi[0])
    cy = 0.5 * (lo[1] + hi[1])
    return (cx - side / 2, cy - side / 2, side, side)


# ---------------------------------------------------------------------------
# rendering

_SHIFT = 4
_ONE = 1 << _SHIFT


def _fx(pts: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(pts) * _ONE).astype(np.int32).reshape(-1, 1, 2)


def _smooth_noise(rng: np.random.Generator, shape, cell: int, amp: float) -> np.ndarray:
    h, w = shape
    small = rng.normal(0, 1, (h // cell + 2, w // cell + 2)).astype(np.float32)
    big = cv2.resize(small, (w + 2 * cell, h + 2 * cell), interpolation=cv2.INTER_CUBIC)
    return amp * big[cell:cell + h, cell:cell + w]


def render_face(shape: np.ndarray, size=(256, 256), rng: np.random.Generator | None = None,
                noise: float = 3.0, occluder: tuple | None = None) -> np.ndarray:
    """Draw a 68-point face into an 8-bit grayscale image.

    Args:
        shape: ``(68, 2)`` image-space landmarks.
        size: ``(height, width)``.
        rng: Source of background texture and pixel noise.
        noise: Std of additive pixel noise.
        occluder: Optional ``(x, y, w, h)`` rectangle painted with clutter.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    h, w = size
    img = (95 + _smooth_noise(rng, (h, w), 24, 22) + _smooth_noise(rng, (h, w), 6, 6)).astype(np.float32)

    jaw = shape[:17]
    brow_top = shape[17:27, 1].min()
    chin_to_brow = shape[8, 1] - brow_top
    # forehead arc closing the jaw
    c = 0.5 * (jaw[0] + jaw[16])
    half = 0.5 * (jaw[16] - jaw[0])
    up = np.array([half[1], -half[0]])
    up = up / max(np.linalg.norm(up), 1e-9) * (c[1] - brow_top + 0.35 * chin_to_brow)
    t = np.linspace(0, np.pi, 25)[1:-1]
    arc = c + np.cos(t)[:, None] * half[None] + np.sin(t)[:, None] * up[None]
    outline = np.vstack([jaw, arc])
    cv2.fillPoly(img, [_fx(outline)], 168, cv2.LINE_AA, _SHIFT)
    cv2.polylines(img, [_fx(jaw)], False, 125, 1, cv2.LINE_AA, _SHIFT)

    for brow in (shape[17:22], shape[22:27]):
        cv2.polylines(img, [_fx(brow)], False, 55, 4, cv2.LINE_AA, _SHIFT)
    cv2.polylines(img, [_fx(shape[27:31])], False, 120, 2, cv2.LINE_AA, _SHIFT)
    cv2.polylines(img, [_fx(shape[31:36])], False, 70, 2, cv2.LINE_AA, _SHIFT)
    cv2.circle(img, tuple(_fx(shape[31:32]).ravel()), 2 * _ONE, 45, -1, cv2.LINE_AA, _SHIFT)
    cv2.circle(img, tuple(_fx(shape[35:36]).ravel()), 2 * _ONE, 45, -1, cv2.LINE_AA, _SHIFT)

    for eye in (shape[36:42], shape[42:48]):
        cv2.fillPoly(img, [_fx(eye)], 232, cv2.LINE_AA, _SHIFT)
        ctr = eye.mean(axis=0)
        r = 0.28 * np.linalg.norm(eye[3] - eye[0])
        cv2.circle(img, tuple(_fx(ctr[None]).ravel()), int(r * _ONE), 50, -1, cv2.LINE_AA, _SHIFT)
        cv2.polylines(img, [_fx(eye)], True, 35, 2, cv2.LINE_AA, _SHIFT)

    cv2.fillPoly(img, [_fx(shape[48:60])], 112, cv2.LINE_AA, _SHIFT)
    cv2.polylines(img, [_fx(shape[48:60])], True, 60, 2, cv2.LINE_AA, _SHIFT)
    inner = shape[60:68]
    if np.linalg.norm(inner[6] - inner[2]) > 1.5:
        cv2.fillPoly(img, [_fx(inner)], 30, cv2.LINE_AA, _SHIFT)
    cv2.polylines(img, [_fx(inner)], True, 45, 1, cv2.LINE_AA, _SHIFT)

    if occluder is not None:
        x, y, ow, oh = (int(round(v)) for v in occluder)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + ow, w), min(y + oh, h)
        if x1 > x0 and y1 > y0:
            patch = 120 + _smooth_noise(rng, (y1 - y0, x1 - x0), 5, 45)
            img[y0:y1, x0:x1] = patch

    img = cv2.GaussianBlur(img, (0, 0), 0.7)
    img += rng.normal(0, noise, img.shape).astype(np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


@dataclass
class RenderedFace:
    image: np.ndarray
    shape: np.ndarray
    box: tuple[float, float, float, float]
    pose: int
    expression: int
    params: FaceParams


def sample_rendered_face(rng: np.random.Generator, pose_index: int, expression_index: int,
                         poses=DEFAULT_POSES, size=(256, 256), **kwargs) -> RenderedFace:
    center = (size[1] / 2, size[0] / 2)
    params = sample_params(rng, poses[pose_index], EXPRESSIONS[expression_index], center=center, **kwargs)
    shape = face_shape(params)
    img = render_face(shape, size, rng)
    return RenderedFace(img, shape, face_box(shape), pose_index, expression_index, params)


def mode_shapes(rng: np.random.Generator, pose: float, expression: str, count: int, **kwargs) -> np.ndarray:
    """Stack of ``count`` shapes from one mode (no rendering)."""
    return np.stack([face_shape(sample_params(rng, pose, expression, **kwargs)) for _ in range(count)])


SCHEME = FRONTAL_68
