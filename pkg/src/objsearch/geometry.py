"""Small geometric helpers shared across the simulator: axis-aligned boxes,
yaw-pitch-roll rotations, ray/face intersection and look-at frames.

Conventions: right-handed base frame, z up, meters, radians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a vector; raises on zero length."""
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize zero-length vector")
    return np.asarray(v, dtype=float) / n


def rotation_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix for intrinsic z-y'-x'' (yaw, pitch, roll)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


@dataclass
class Aabb:
    """Axis-aligned box given by lower/upper corners."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @classmethod
    def from_points(cls, pts: np.ndarray) -> "Aabb":
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @classmethod
    def from_center(cls, center, half) -> "Aabb":
        center = np.asarray(center, dtype=float)
        half = np.asarray(half, dtype=float)
        return cls(center - half, center + half)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def volume(self) -> float:
        ext = np.maximum(self.hi - self.lo, 0.0)
        return float(ext[0] * ext[1] * ext[2])

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(self.lo - margin, self.hi + margin)

    def scaled(self, factor: float) -> "Aabb":
        c, h = self.center, self.half
        return Aabb(c - h * factor, c + h * factor)

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box inflated by ``margin``."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return np.all((pts >= self.lo - margin) & (pts <= self.hi + margin), axis=1)

    def intersects(self, other: "Aabb", margin: float = 0.0) -> bool:
        return bool(
            np.all(self.lo - margin <= other.hi) and np.all(other.lo - margin <= self.hi)
        )

    def grid(self, counts) -> np.ndarray:
        """Regular grid of points spanning the box (cell centers)."""
        axes = []
        for a in range(3):
            n = int(counts[a])
            if n <= 1:
                axes.append(np.array([0.5 * (self.lo[a] + self.hi[a])]))
            else:
                step = (self.hi[a] - self.lo[a]) / n
                axes.append(self.lo[a] + step * (np.arange(n) + 0.5))
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def to_jsonable(self) -> dict:
        return {"lo": [float(x) for x in self.lo], "hi": [float(x) for x in self.hi]}

    @classmethod
    def from_jsonable(cls, d: dict) -> "Aabb":
        return cls(np.array(d["lo"], dtype=float), np.array(d["hi"], dtype=float))


# Oriented-box faces ----------------------------------------------------------

# Face layout per box: axis index, sign. Order fixed so face ids are stable.
FACE_AXES = ((0, +1), (0, -1), (1, +1), (1, -1), (2, +1), (2, -1))


def face_frames(center: np.ndarray, half: np.ndarray, rot: np.ndarray) -> list[dict]:
    """The six rectangular faces of an oriented box.

    Each entry holds the face center, outward normal, in-plane axes and half
    extents, all in the base frame.
    """
    faces = []
    for axis, sign in FACE_AXES:
        u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
        normal = sign * rot[:, axis]
        faces.append(
            {
                "center": center + normal * half[axis],
                "normal": normal,
                "u": rot[:, u_axis],
                "v": rot[:, v_axis],
                "hu": half[u_axis],
                "hv": half[v_axis],
            }
        )
    return faces


def rays_hit_rects(
    origin: np.ndarray,
    dirs: np.ndarray,
    rect_centers: np.ndarray,
    rect_normals: np.ndarray,
    rect_u: np.ndarray,
    rect_v: np.ndarray,
    rect_hu: np.ndarray,
    rect_hv: np.ndarray,
    edge_eps: float = 1e-9,
) -> np.ndarray:
    """Ray parameters t for rays ``origin + t*dirs`` against F rectangles.

    Returns an (N, F) array; entries are +inf where a ray misses a rectangle
    or travels parallel to its plane.
    """
    dirs = np.asarray(dirs, dtype=float)
    n_rays = dirs.shape[0]
    n_rect = rect_centers.shape[0]
    if n_rays == 0 or n_rect == 0:
        return np.full((n_rays, n_rect), np.inf)
    denom = dirs @ rect_normals.T  # (N, F)
    # distance from origin to each plane along its normal
    plane_off = np.einsum("fj,fj->f", rect_centers - origin[None, :], rect_normals)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = plane_off[None, :] / denom
    t_safe = np.where(np.isfinite(t), t, -1.0)
    hit = origin[None, None, :] + t_safe[:, :, None] * dirs[:, None, :]  # (N, F, 3)
    rel = hit - rect_centers[None, :, :]
    lu = np.einsum("nfj,fj->nf", rel, rect_u)
    lv = np.einsum("nfj,fj->nf", rel, rect_v)
    ok = (
        np.isfinite(t)
        & (t > 0.0)
        & (np.abs(lu) <= rect_hu[None, :] + edge_eps)
        & (np.abs(lv) <= rect_hv[None, :] + edge_eps)
        & (np.abs(denom) > 1e-12)
    )
    return np.where(ok, t, np.inf)


def stack_faces(face_lists: list[list[dict]]):
    """Flatten per-box face dicts into the arrays rays_hit_rects expects."""
    if not face_lists:
        z = np.zeros((0, 3))
        return z, z, z, z, np.zeros(0), np.zeros(0)
    all_faces = [f for faces in face_lists for f in faces]
    centers = np.array([f["center"] for f in all_faces])
    normals = np.array([f["normal"] for f in all_faces])
    us = np.array([f["u"] for f in all_faces])
    vs = np.array([f["v"] for f in all_faces])
    hu = np.array([f["hu"] for f in all_faces])
    hv = np.array([f["hv"] for f in all_faces])
    return centers, normals, us, vs, hu, hv


def orthonormal_tangents(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangent basis perpendicular to unit vector ``d``."""
    ref = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(d, ref))) > 0.999:
        ref = np.array([1.0, 0.0, 0.0])
    t1 = unit(np.cross(ref, d))
    t2 = np.cross(d, t1)
    return t1, t2
