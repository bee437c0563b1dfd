"""Facial landmark geometry: validation, rasterization, alignment and the smile-intensity proxy.

Points follow the usual 68-point layout (jaw 0-16, brows 17-26, nose 27-35,
eyes 36-47, mouth 48-67) in normalized image coordinates, x to the right and
y downwards, both in [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, ParseError, ShapeError, ValidationError

N_POINTS = 68
IMAGE_SIDE = 64

JAW = slice(0, 17)
BROWS = slice(17, 27)
NOSE = slice(27, 36)
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)
MOUTH = slice(48, 68)
MOUTH_LEFT_CORNER = 48
MOUTH_RIGHT_CORNER = 54

CANONICAL_LEFT_EYE = (0.37, 0.40)
CANONICAL_RIGHT_EYE = (0.63, 0.40)

SMILE_SPAN_WEIGHT = 0.5


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (N_POINTS, 2):
            raise ValidationError(f"expected {N_POINTS} (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ValidationError(
                f"landmark coordinates must lie in [0, 1], got range [{pts.min():.4f}, {pts.max():.4f}]"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        return isinstance(other, LandmarkSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def to_json(self) -> dict:
        return {"points": self.points.tolist()}

    @classmethod
    def from_json(cls, obj) -> "LandmarkSet":
        try:
            return cls(np.asarray(obj["points"], dtype=np.float64))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed landmark set: {exc}") from exc


@dataclass(frozen=True, eq=False)
class LandmarkImage:
    """Single-channel landmark raster stored channel-first, shape (1, side, side)."""

    pixels: np.ndarray
    binary: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] != 1 or px.shape[1] != px.shape[2]:
            raise ShapeError(f"landmark image must be (1, side, side), got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("landmark image values must lie in [0, 1]")
        if self.binary and not np.all((px == 0.0) | (px == 1.0)):
            raise ValidationError("binary landmark image contains values other than 0 and 1")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]


@dataclass(frozen=True)
class AlignmentTransform:
    """Similarity transform p -> scale * R(rotation) p + (tx, ty)."""

    scale: float
    rotation: float
    tx: float
    ty: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("alignment scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix.T + np.array([self.tx, self.ty])

    def inverse(self) -> "AlignmentTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        t = -inv_scale * np.array([[c, -s], [s, c]]) @ np.array([self.tx, self.ty])
        return AlignmentTransform(inv_scale, -self.rotation, float(t[0]), float(t[1]))

    @classmethod
    def identity(cls) -> "AlignmentTransform":
        return cls(1.0, 0.0, 0.0, 0.0)


def neutral_template(
    jaw_width: float = 0.27,
    jaw_height: float = 0.38,
    mouth_half_width: float = 0.09,
    mouth_y: float = 0.66,
    nose_length: float = 0.135,
    brow_y: float = 0.33,
) -> np.ndarray:
    """Neutral face with eyes at the canonical positions, as a (68, 2) array."""
    pts = np.zeros((N_POINTS, 2))
    cx, cy = 0.5, 0.42
    k = np.arange(17)
    pts[JAW, 0] = cx - jaw_width * np.cos(np.pi * k / 16)
    pts[JAW, 1] = cy + jaw_height * np.sin(np.pi * k / 16)

    for start, (ex, ey), sign in ((17, CANONICAL_LEFT_EYE, 1.0), (22, CANONICAL_RIGHT_EYE, -1.0)):
        j = np.arange(5)
        xs = ex + sign * (-0.07 + 0.03 * j)
        if sign < 0:
            xs = xs[::-1]
        pts[start:start + 5, 0] = xs
        pts[start:start + 5, 1] = brow_y - 0.02 * np.sin(np.pi * j / 4)

    top = CANONICAL_LEFT_EYE[1]
    pts[27:31, 0] = 0.5
    pts[27:31, 1] = top + nose_length * np.arange(4) / 3
    nostril_y = top + nose_length + 0.025
    pts[31:36, 0] = [0.46, 0.48, 0.5, 0.52, 0.54]
    pts[31:36, 1] = [nostril_y, nostril_y + 0.005, nostril_y + 0.01, nostril_y + 0.005, nostril_y]

    for start, (ex, ey) in ((36, CANONICAL_LEFT_EYE), (42, CANONICAL_RIGHT_EYE)):
        a, b = 0.05, 0.018
        pts[start:start + 6] = [
            (ex - a, ey), (ex - a / 3, ey - b), (ex + a / 3, ey - b),
            (ex + a, ey), (ex + a / 3, ey + b), (ex - a / 3, ey + b),
        ]

    m, my = mouth_half_width, mouth_y
    pts[48:60] = [
        (0.5 - m, my), (0.5 - 0.6 * m, my - 0.015), (0.5 - 0.25 * m, my - 0.025),
        (0.5, my - 0.02), (0.5 + 0.25 * m, my - 0.025), (0.5 + 0.6 * m, my - 0.015),
        (0.5 + m, my), (0.5 + 0.6 * m, my + 0.02), (0.5 + 0.25 * m, my + 0.03),
        (0.5, my + 0.032), (0.5 - 0.25 * m, my + 0.03), (0.5 - 0.6 * m, my + 0.02),
    ]
    pts[60:68] = [
        (0.5 - 0.8 * m, my), (0.5 - 0.3 * m, my - 0.005), (0.5, my - 0.005),
        (0.5 + 0.3 * m, my - 0.005), (0.5 + 0.8 * m, my), (0.5 + 0.3 * m, my + 0.005),
        (0.5, my + 0.005), (0.5 - 0.3 * m, my + 0.005),
    ]
    return pts


def to_pixel(points: np.ndarray, side: int) -> np.ndarray:
    """Round normalized coordinates to integer (col, row) pixel indices."""
    return np.floor(np.asarray(points) * (side - 1) + 0.5).astype(np.int64)


def rasterize_points(points: np.ndarray, side: int = IMAGE_SIDE, dilation: int = 3) -> np.ndarray:
    """Binary raster of an arbitrary (n, 2) point array; the building block of `rasterize`."""
    if side < 16:
        raise ValidationError("raster side must be at least 16")
    if dilation < 1 or dilation % 2 == 0:
        raise ValidationError("dilation must be a positive odd integer")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
        raise ValidationError("landmark coordinates must lie in [0, 1]")
    img = np.zeros((side, side), dtype=np.float32)
    r = dilation // 2
    for col, row in to_pixel(pts, side):
        img[max(row - r, 0):row + r + 1, max(col - r, 0):col + r + 1] = 1.0
    return img


def rasterize(lms: LandmarkSet, side: int = IMAGE_SIDE, dilation: int = 3) -> LandmarkImage:
    return LandmarkImage(rasterize_points(lms.points, side, dilation)[None], binary=True)


def binarize_decoded(img: LandmarkImage, threshold: float = 0.5) -> LandmarkImage:
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    return LandmarkImage((img.pixels >= threshold).astype(np.float32), binary=True)


def eye_centers(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points)
    return points[..., LEFT_EYE, :].mean(axis=-2), points[..., RIGHT_EYE, :].mean(axis=-2)


def similarity_to_canonical(points: np.ndarray) -> AlignmentTransform:
    left, right = eye_centers(points)
    src = complex(*(right - left))
    if abs(src) < 1e-12:
        raise DegenerateGeometryError("eye centers coincide; cannot align")
    dst = complex(CANONICAL_RIGHT_EYE[0] - CANONICAL_LEFT_EYE[0], CANONICAL_RIGHT_EYE[1] - CANONICAL_LEFT_EYE[1])
    a = dst / src
    b = complex(*CANONICAL_LEFT_EYE) - a * complex(*left)
    return AlignmentTransform(abs(a), math.atan2(a.imag, a.real), b.real, b.imag)


def align(lms: LandmarkSet) -> tuple[LandmarkSet, AlignmentTransform]:
    """Move the eye centers onto the canonical horizontal eye line."""
    transform = similarity_to_canonical(lms.points)
    return LandmarkSet(transform.apply(lms.points)), transform


def smile_intensity_array(points: np.ndarray, span_weight: float = SMILE_SPAN_WEIGHT) -> np.ndarray:
    """Vectorized smile intensity over any leading batch dimensions of (..., 68, 2) arrays.

    Measured in the face's own frame (eye axis and its upward normal), so it is
    invariant to similarity transforms.
    """
    points = np.asarray(points, dtype=np.float64)
    left, right = eye_centers(points)
    axis = right - left
    iod = np.linalg.norm(axis, axis=-1)
    if np.any(iod < 1e-12):
        raise DegenerateGeometryError("zero inter-ocular distance")
    u = axis / iod[..., None]
    up = np.stack([u[..., 1], -u[..., 0]], axis=-1)
    corners = points[..., [MOUTH_LEFT_CORNER, MOUTH_RIGHT_CORNER], :]
    span = np.einsum("...i,...i->...", corners[..., 1, :] - corners[..., 0, :], u) / iod
    center = points[..., MOUTH, :].mean(axis=-2)
    lift = np.einsum("...i,...i->...", corners.mean(axis=-2) - center, up) / iod
    return np.maximum(span_weight * span + (1.0 - span_weight) * lift, 0.0)


def smile_intensity(lms: LandmarkSet) -> float:
    return float(smile_intensity_array(lms.points))


@dataclass(frozen=True, eq=False)
class DisplacementModel:
    """Linear model of expression displacements (frame t minus frame 0), flattened to 136-d."""

    components: np.ndarray

    @classmethod
    def fit(cls, sequences, n_components: int = 10) -> "DisplacementModel":
        disp = np.concatenate([(np.asarray(s) - np.asarray(s)[:1]).reshape(len(s), -1) for s in sequences])
        _, _, vt = np.linalg.svd(disp, full_matrices=False)
        return cls(vt[:n_components].copy())

    def project(self, displacement: np.ndarray, weights: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
        w = np.repeat(weights, 2)
        basis = self.components.T
        lhs = basis.T @ (w[:, None] * basis) + ridge * np.eye(basis.shape[1])
        coef = np.linalg.solve(lhs, basis.T @ (w * displacement.reshape(-1)))
        return (basis @ coef).reshape(N_POINTS, 2)


def track_landmarks(
    masks: np.ndarray,
    init: np.ndarray,
    model: DisplacementModel | None = None,
    radius: float = 3.0,
    iterations: int = 6,
) -> np.ndarray:
    """Recover point positions from binary landmark rasters by frame-to-frame tracking.

    Each frame runs a few Lloyd steps seeded by the previous frame: ink pixels
    within `radius` of a point are assigned to the nearest point and every point
    moves to the centroid of its pixels. With a displacement model, the raw
    displacement from `init` is replaced by its weighted projection onto the
    model after every step, which keeps overlapping dots from swapping owners.
    Returns (T, 68, 2) normalized coordinates clipped to [0, 1].
    """
    masks = np.asarray(masks)
    if masks.ndim == 4:
        masks = masks[:, 0]
    side = masks.shape[-1]
    origin = np.asarray(init, dtype=np.float64) * (side - 1)
    current = origin.copy()
    out = np.empty((masks.shape[0], N_POINTS, 2))
    for t, mask in enumerate(masks):
        rows, cols = np.nonzero(mask >= 0.5)
        ink = np.stack([cols, rows], axis=1).astype(np.float64)
        if len(ink):
            for _ in range(iterations):
                d2 = ((ink[:, None, :] - current[None, :, :]) ** 2).sum(-1)
                nearest = d2.argmin(axis=1)
                near = d2[np.arange(len(ink)), nearest] <= radius ** 2
                sums = np.zeros_like(current)
                np.add.at(sums, nearest[near], ink[near])
                counts = np.bincount(nearest[near], minlength=N_POINTS)
                hit = counts > 0
                target = current.copy()
                target[hit] = sums[hit] / counts[hit, None]
                if model is None:
                    current = target
                else:
                    disp = (target - origin) / (side - 1)
                    weights = np.where(hit, 1.0, 0.05)
                    current = origin + model.project(disp, weights) * (side - 1)
        out[t] = current
    return np.clip(out / (side - 1), 0.0, 1.0)


def load_landmark_file(path) -> LandmarkSet:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return LandmarkSet.from_json(obj)


def save_landmark_file(lms: LandmarkSet, path) -> None:
    Path(path).write_text(json.dumps(lms.to_json()))
