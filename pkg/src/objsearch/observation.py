"""Virtual wrist camera: frustum and occlusion visibility, synthetic
detections, and canonical orthographic renders used as reasoner prompts.

All functions here are pure in (world, pose, intrinsics, noise, seed); the
same inputs give bit-identical output, which the replay/determinism tests
rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import geometry
from .geometry import Aabb, unit

if TYPE_CHECKING:
    from .world import WorldState

FACET_KEYS = ("+x", "-x", "+y", "-y", "+z", "-z")

# a surface sample counts as occluded only if something blocks the ray
# strictly before it, beyond this slack
OCCLUSION_TOL = 1e-3
# minimum alignment between a facet normal and the view ray for the facet's
# text tag to be readable
TAG_FACING_MIN = 0.1
# fraction of a facet's samples that must be visible for its tag to be read
TAG_VISIBLE_MIN = 0.25


@dataclass
class CameraPose:
    """Camera position plus orthonormal forward/up frame."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        self.forward = np.asarray(self.forward, dtype=float)
        self.up = np.asarray(self.up, dtype=float)

    @classmethod
    def look_at(cls, position, target, up_hint=(0.0, 0.0, 1.0)) -> "CameraPose":
        position = np.asarray(position, dtype=float)
        fwd = unit(np.asarray(target, dtype=float) - position)
        hint = np.asarray(up_hint, dtype=float)
        if abs(float(np.dot(fwd, unit(hint)))) > 0.999:
            hint = np.array([1.0, 0.0, 0.0])
        up = unit(hint - np.dot(hint, fwd) * fwd)
        return cls(position, fwd, up)

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.forward, self.up)

    def validate(self, tol: float = 1e-9) -> None:
        if abs(np.linalg.norm(self.forward) - 1.0) > tol:
            raise ValueError("camera forward not unit length")
        if abs(np.linalg.norm(self.up) - 1.0) > tol:
            raise ValueError("camera up not unit length")
        if abs(float(np.dot(self.forward, self.up))) > tol:
            raise ValueError("camera forward/up not orthogonal")

    def to_jsonable(self) -> dict:
        return {
            "position": [float(x) for x in self.position],
            "forward": [float(x) for x in self.forward],
            "up": [float(x) for x in self.up],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "CameraPose":
        return cls(
            np.array(d["position"], dtype=float),
            np.array(d["forward"], dtype=float),
            np.array(d["up"], dtype=float),
        )


@dataclass
class CameraIntrinsics:
    fov_h: float = np.pi / 3
    fov_v: float = np.pi / 3
    raster_w: int = 64
    raster_h: int = 64
    near: float = 0.05
    far: float = 3.0
    tau_vis: float = 0.05

    def validate(self) -> None:
        if not (0.0 < self.fov_h < np.pi and 0.0 < self.fov_v < np.pi):
            raise ValueError("fov out of range")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if not 0.0 < self.tau_vis <= 1.0:
            raise ValueError("tau_vis out of range")
        if self.raster_w <= 0 or self.raster_h <= 0:
            raise ValueError("raster dims must be positive")


@dataclass
class NoiseModel:
    """Synthetic detector imperfections; all default to zero (exact)."""

    p_label: float = 0.0
    p_drop: float = 0.0
    sigma_pt: float = 0.0
    sigma_desc: float = 0.0


@dataclass
class Detection:
    visible_points: np.ndarray
    descriptor: np.ndarray
    observed_label: str
    visible_fraction: float
    frustum_clipped: bool
    facet_tags: list[str]
    source_id: str  # ground-truth provenance; metrics/oracle plumbing only


@dataclass
class Observation:
    step: int
    camera: CameraPose
    detections: list[Detection] = field(default_factory=list)


def frustum_mask(pose: CameraPose, intr: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Which points fall inside the camera frustum (incl. near/far planes)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    rel = pts - pose.position
    depth = rel @ pose.forward
    x = rel @ pose.right
    y = rel @ pose.up
    with np.errstate(invalid="ignore"):
        ok = (
            (depth >= intr.near)
            & (depth <= intr.far)
            & (np.abs(x) <= depth * np.tan(intr.fov_h / 2) + 1e-12)
            & (np.abs(y) <= depth * np.tan(intr.fov_v / 2) + 1e-12)
        )
    return ok


def observe(
    world: "WorldState",
    pose: CameraPose,
    intr: CameraIntrinsics,
    noise: Optional[NoiseModel] = None,
    rng_seed: int = 0,
) -> Observation:
    """Render one synthetic observation of the world from ``pose``.

    For every object each surface sample is ray-tested against all occluder
    faces (closed container faces, other boxes, the object's own box).  An
    object is detected when at least ``tau_vis`` of its camera-facing samples
    are visible.  The noise model may then drop the detection, scramble the
    label, or jitter points.
    """
    pose.validate(tol=1e-6)
    noise = noise or NoiseModel()
    rng = np.random.default_rng(np.random.SeedSequence([0x0B5E, rng_seed & 0xFFFFFFFF]))

    centers, normals, us, vs, hu, hv = world.occluder_faces()
    label_pool = sorted({o.class_label for o in world.objects.values()})

    detections: list[Detection] = []
    for oid in world.object_ids():
        obj = world.objects[oid]
        pts, face_idx = world.surface_points(oid)
        if len(pts) == 0:
            continue
        rel = pts - pose.position
        dist = np.linalg.norm(rel, axis=1)
        dist = np.maximum(dist, 1e-12)
        dirs = rel / dist[:, None]

        in_frustum = frustum_mask(pose, intr, pts)
        t = geometry.rays_hit_rects(pose.position, dirs, centers, normals, us, vs, hu, hv)
        blocked = np.any(t < (dist[:, None] - OCCLUSION_TOL), axis=1)

        # face "facing" test: outward normal points back toward the camera
        face_vis_count = np.zeros(6, dtype=int)
        face_total = np.zeros(6, dtype=int)
        facing = np.zeros(6, dtype=bool)
        tag_facing = np.zeros(6, dtype=bool)
        frames = world.face_frames(oid)
        for f in range(6):
            to_cam = pose.position - frames[f]["center"]
            d = float(np.dot(frames[f]["normal"], to_cam)) / max(np.linalg.norm(to_cam), 1e-12)
            facing[f] = d > 0.0
            tag_facing[f] = d > TAG_FACING_MIN
        visible = in_frustum & ~blocked
        for f in range(6):
            sel = face_idx == f
            face_total[f] = int(np.sum(sel))
            face_vis_count[f] = int(np.sum(visible & sel))

        facing_sample = facing[face_idx]
        n_facing = int(np.sum(facing_sample))
        denom = n_facing if n_facing > 0 else len(pts)
        vf = float(np.sum(visible & facing_sample)) / denom
        clipped = bool(np.any(facing_sample & ~in_frustum & ~blocked))

        if vf < intr.tau_vis or not np.any(visible):
            continue
        if noise.p_drop > 0 and rng.random() < noise.p_drop:
            continue

        visible_facets = []
        for f in range(6):
            if face_total[f] == 0 or not tag_facing[f]:
                continue
            if face_vis_count[f] / face_total[f] >= TAG_VISIBLE_MIN:
                visible_facets.append(FACET_KEYS[f])
        tags = sorted(
            obj.facets[k].tag for k in visible_facets if obj.facets[k].tag is not None
        )
        label = obj.fine_label if tags else obj.class_label
        if noise.p_label > 0 and rng.random() < noise.p_label and len(label_pool) > 1:
            alt = [c for c in label_pool if c != obj.class_label]
            label = alt[int(rng.integers(len(alt)))]

        facing_keys = [FACET_KEYS[f] for f in range(6) if facing[f]]
        if not facing_keys:
            facing_keys = list(FACET_KEYS)
        desc = np.mean([obj.facets[k].descriptor for k in facing_keys], axis=0)
        if noise.sigma_desc > 0:
            desc = desc + rng.normal(0.0, noise.sigma_desc, size=desc.shape)

        vis_pts = pts[visible]
        if noise.sigma_pt > 0:
            vis_pts = vis_pts + rng.normal(0.0, noise.sigma_pt, size=vis_pts.shape)

        detections.append(
            Detection(
                visible_points=vis_pts,
                descriptor=desc,
                observed_label=label,
                visible_fraction=min(vf, 1.0),
                frustum_clipped=clipped,
                facet_tags=tags,
                source_id=oid,
            )
        )
    return Observation(step=world.step, camera=pose, detections=detections)


# Canonical orthographic views -------------------------------------------------

# name -> (view direction, image u axis); v axis is +z everywhere
VIEW_FRAMES = {
    "front": (np.array([0.0, -1.0, 0.0]), np.array([1.0, 0.0, 0.0])),
    "left": (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
    "right": (np.array([-1.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0])),
}
_V_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass
class ViewRaster:
    depth: np.ndarray  # uint8 (h, w); 0 = empty
    mask: np.ndarray  # uint8 (h, w); 255 where a highlight point lands


@dataclass
class CanonicalViews:
    front: ViewRaster
    left: ViewRaster
    right: ViewRaster

    def items(self):
        return (("front", self.front), ("left", self.left), ("right", self.right))


def _rasterize(pts, highlight, view_dir, u_axis, lo, hi, w, h) -> ViewRaster:
    depth_img = np.zeros((h, w), dtype=np.uint8)
    mask_img = np.zeros((h, w), dtype=np.uint8)

    def to_pixels(p):
        u = p @ u_axis
        v = p @ _V_AXIS
        u_lo = min(float(lo @ u_axis), float(hi @ u_axis))
        u_hi = max(float(lo @ u_axis), float(hi @ u_axis))
        v_lo, v_hi = float(lo[2]), float(hi[2])
        cols = np.clip(((u - u_lo) / max(u_hi - u_lo, 1e-9) * w).astype(int), 0, w - 1)
        rows = np.clip(((v - v_lo) / max(v_hi - v_lo, 1e-9) * h).astype(int), 0, h - 1)
        return (h - 1 - rows), cols

    if len(pts):
        d = pts @ view_dir
        d_lo, d_hi = float(d.min()), float(d.max())
        dq = 1 + np.round(254.0 * (d - d_lo) / max(d_hi - d_lo, 1e-9)).astype(int)
        rows, cols = to_pixels(pts)
        best = np.full((h, w), np.inf)
        for r, c, dv, dqv in zip(rows, cols, d, dq):
            if dv < best[r, c]:
                best[r, c] = dv
                depth_img[r, c] = dqv
    if highlight is not None and len(highlight):
        rows, cols = to_pixels(highlight)
        mask_img[rows, cols] = 255
    return ViewRaster(depth=depth_img, mask=mask_img)


def render_canonical_views(
    points: np.ndarray,
    highlight: Optional[np.ndarray] = None,
    raster_w: int = 64,
    raster_h: int = 64,
) -> CanonicalViews:
    """Front/left/right orthographic depth rasters of a point cloud.

    Scene bounds are the padded bounding box of points plus highlights; an
    empty cloud yields all-zero rasters.
    """
    if raster_w <= 0 or raster_h <= 0:
        raise ValueError("raster dims must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    hl = None
    if highlight is not None:
        hl = np.asarray(highlight, dtype=float).reshape(-1, 3)
    stack = [p for p in (pts, hl) if p is not None and len(p)]
    if not stack:
        zero = lambda: ViewRaster(
            np.zeros((raster_h, raster_w), dtype=np.uint8),
            np.zeros((raster_h, raster_w), dtype=np.uint8),
        )
        return CanonicalViews(zero(), zero(), zero())
    every = np.concatenate(stack, axis=0)
    box = Aabb.from_points(every)
    pad = np.maximum(0.05, 0.05 * (box.hi - box.lo))
    lo, hi = box.lo - pad, box.hi + pad

    rasters = {}
    for name, (view_dir, u_axis) in VIEW_FRAMES.items():
        rasters[name] = _rasterize(pts, hl, view_dir, u_axis, lo, hi, raster_w, raster_h)
    return CanonicalViews(**rasters)


def write_pgm(path, arr: np.ndarray) -> None:
    """Binary (P5) PGM, maxval 255."""
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def save_views(views: CanonicalViews, directory, prefix: str) -> dict[str, str]:
    """Write depth + mask PGMs for each view; returns name -> path map."""
    import os

    paths = {}
    for name, raster in views.items():
        depth_path = os.path.join(str(directory), f"{prefix}_{name}.pgm")
        mask_path = os.path.join(str(directory), f"{prefix}_{name}_mask.pgm")
        write_pgm(depth_path, raster.depth)
        write_pgm(mask_path, raster.mask)
        paths[name] = depth_path
        paths[name + "_mask"] = mask_path
    return paths
