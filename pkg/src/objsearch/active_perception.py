"""Two-stage viewpoint selection on a virtual sphere around the target.

Stage 1 samples N movement directions at a fixed geodesic offset from the
camera's radial projection; stage 2 samples M poses along the chosen
great-circle arc.  Every emitted pose sits on the sphere and looks at its
center.  The reasoner picks among candidates from rendered canonical views
plus per-candidate predicted-coverage summaries; it may also ask to halve
the viewing distance ("look closer").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import memory as memory_mod
from .errors import EmptyTarget, NoFeasibleCandidate, OutOfRange
from .geometry import Aabb, orthonormal_tangents, unit
from .observation import (
    CameraIntrinsics,
    CameraPose,
    frustum_mask,
    render_canonical_views,
    save_views,
)
from .reasoner import ReasonerRequest, validate_index


@dataclass
class PerceptionParams:
    k: float = 1.5  # sphere radius gain over target size
    r_min: float = 0.25
    r_max: float = 1.0
    n_directions: int = 8
    m_poses: int = 4
    alpha: float = np.deg2rad(30.0)  # stage-1 geodesic offset
    alpha_max: float = np.deg2rad(90.0)  # stage-2 arc length
    look_closer_factor: float = 0.5
    floor_margin: float = 0.02


@dataclass
class PerceptionSphere:
    center: np.ndarray
    radius: float


@dataclass
class ViewCandidate:
    pose: CameraPose
    index: int
    summary: float = 0.0

    def jsonable(self, sphere: PerceptionSphere) -> dict:
        rel = self.pose.position - sphere.center
        r = max(float(np.linalg.norm(rel)), 1e-12)
        return {
            "index": self.index,
            "position": [float(x) for x in self.pose.position],
            "pose": self.pose.to_jsonable(),
            "polar": float(np.arccos(np.clip(rel[2] / r, -1.0, 1.0))),
            "azimuth": float(np.arctan2(rel[1], rel[0])),
            "summary": float(self.summary),
        }


@dataclass
class SelectedView:
    pose: CameraPose
    look_closer: bool = False
    direction_index: Optional[int] = None
    pose_index: Optional[int] = None


def build_sphere(
    target_points: np.ndarray,
    intr: CameraIntrinsics,
    current: CameraPose,
    params: Optional[PerceptionParams] = None,
) -> PerceptionSphere:
    """Sphere sized so the target roughly fills the narrower field of view."""
    params = params or PerceptionParams()
    pts = np.asarray(target_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyTarget("no target points")
    center = pts.mean(axis=0)
    box = Aabb.from_points(pts)
    size = float(np.max(box.hi - box.lo))
    fov = min(intr.fov_h, intr.fov_v)
    radius = params.k * size / (2.0 * np.tan(fov / 2.0))
    radius = float(np.clip(radius, params.r_min, params.r_max))
    return PerceptionSphere(center=center, radius=radius)


def _feasible(pos: np.ndarray, obstacles: list[Aabb], floor_z: float,
              margin: float) -> bool:
    if pos[2] < floor_z + margin:
        return False
    return not any(bool(b.contains(pos[None, :], margin=0.01)[0]) for b in obstacles)


def _radial(current: CameraPose, sphere: PerceptionSphere) -> np.ndarray:
    rel = current.position - sphere.center
    if np.linalg.norm(rel) < 1e-9:
        return np.array([0.0, 0.0, 1.0])
    return unit(rel)


def sample_directions(
    sphere: PerceptionSphere,
    current: CameraPose,
    n: int,
    obstacles: Optional[list[Aabb]] = None,
    floor_z: float = 0.0,
    params: Optional[PerceptionParams] = None,
) -> list[ViewCandidate]:
    """N look-at poses at geodesic offset alpha around the camera's radial
    projection; infeasible ones retry at alpha/2, then drop."""
    params = params or PerceptionParams()
    obstacles = obstacles or []
    if n < 1:
        raise ValueError("need at least one direction")
    r0 = _radial(current, sphere)
    t1, t2 = orthonormal_tangents(r0)
    out: list[ViewCandidate] = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        lateral = np.cos(phi) * t1 + np.sin(phi) * t2
        for alpha in (params.alpha, params.alpha / 2.0):
            d = np.cos(alpha) * r0 + np.sin(alpha) * lateral
            pos = sphere.center + sphere.radius * unit(d)
            if _feasible(pos, obstacles, floor_z, params.floor_margin):
                pose = CameraPose.look_at(pos, sphere.center)
                out.append(ViewCandidate(pose=pose, index=len(out)))
                break
    if not out:
        raise NoFeasibleCandidate("all direction candidates culled")
    return out


def sample_poses_along(
    sphere: PerceptionSphere,
    chosen: ViewCandidate,
    m: int,
    current: CameraPose,
    obstacles: Optional[list[Aabb]] = None,
    floor_z: float = 0.0,
    params: Optional[PerceptionParams] = None,
) -> list[ViewCandidate]:
    """M poses at fractions of alpha_max along the great circle from the
    camera's projection through the chosen direction."""
    params = params or PerceptionParams()
    obstacles = obstacles or []
    if m < 1:
        raise ValueError("need at least one pose")
    e1 = _radial(current, sphere)
    d_c = unit(chosen.pose.position - sphere.center)
    lateral = d_c - float(np.dot(d_c, e1)) * e1
    if np.linalg.norm(lateral) < 1e-9:
        _, lateral = orthonormal_tangents(e1)
    e2 = unit(lateral)
    out: list[ViewCandidate] = []
    for i in range(1, m + 1):
        theta_full = params.alpha_max * i / m
        for theta in (theta_full, theta_full / 2.0):
            d = np.cos(theta) * e1 + np.sin(theta) * e2
            pos = sphere.center + sphere.radius * unit(d)
            if _feasible(pos, obstacles, floor_z, params.floor_margin):
                pose = CameraPose.look_at(pos, sphere.center)
                out.append(ViewCandidate(pose=pose, index=len(out)))
                break
    if not out:
        raise NoFeasibleCandidate("all pose candidates culled")
    return out


def coverage_scores(
    candidates: list[ViewCandidate],
    current: CameraPose,
    probes: np.ndarray,
    mem: "memory_mod.Memory",
    intr: CameraIntrinsics,
    occupancy_voxel: float = 0.02,
) -> None:
    """Fill each candidate's summary with the count of region probes it would
    newly reveal relative to the current pose (per the memory's own cloud)."""
    probes = np.asarray(probes, dtype=float).reshape(-1, 3)
    cloud, _ = mem.cloud()

    def visible_set(pose: CameraPose) -> np.ndarray:
        if len(probes) == 0:
            return np.zeros(0, dtype=bool)
        vis = frustum_mask(pose, intr, probes)
        free, _ = memory_mod.ray_free(pose.position, probes, cloud, occupancy_voxel)
        return vis & free

    current_vis = visible_set(current)
    for cand in candidates:
        cand_vis = visible_set(cand.pose)
        cand.summary = float(np.sum(cand_vis & ~current_vis))


def _ask_index(reasoner, variant: str, payload: dict, n: int):
    """One reasoner round-trip with a single retry on a bad index."""
    resp = reasoner.respond(ReasonerRequest(variant, payload))
    if variant == "select_pose" and resp.result.get("look_closer"):
        return "look_closer"
    try:
        return validate_index(resp.result, n)
    except OutOfRange:
        resp = reasoner.respond(ReasonerRequest(variant, payload))
        if variant == "select_pose" and resp.result.get("look_closer"):
            return "look_closer"
        return validate_index(resp.result, n)


def _look_closer_pose(current: CameraPose, sphere: PerceptionSphere,
                      intr: CameraIntrinsics,
                      params: PerceptionParams) -> CameraPose:
    rel = current.position - sphere.center
    dist = float(np.linalg.norm(rel))
    new_dist = max(dist * params.look_closer_factor, intr.near + 0.05)
    pos = sphere.center + unit(rel) * new_dist if dist > 1e-9 else current.position
    return CameraPose(position=pos, forward=current.forward.copy(),
                      up=current.up.copy())


def select_view(
    candidates: list[ViewCandidate],
    goal_text: str,
    mem: "memory_mod.Memory",
    world_points: np.ndarray,
    reasoner,
    *,
    sphere: PerceptionSphere,
    current: CameraPose,
    intr: CameraIntrinsics,
    probes: np.ndarray,
    obstacles: Optional[list[Aabb]] = None,
    floor_z: float = 0.0,
    params: Optional[PerceptionParams] = None,
    raster_dir=None,
    instruction_index: Optional[int] = None,
    known_sources: Optional[list[str]] = None,
) -> SelectedView:
    """Run both selection stages and return the chosen pose.

    The prompt package couples canonical renders of the scene cloud (candidate
    positions highlighted) with the indexed candidate list; external adapters
    receive the renders as PGM paths.
    """
    params = params or PerceptionParams()
    if not candidates:
        raise NoFeasibleCandidate("empty candidate list")

    def packet(cands: list[ViewCandidate], stage: str) -> dict:
        payload: dict = {
            "goal": goal_text,
            "candidates": [c.jsonable(sphere) for c in cands],
            "instruction_index": instruction_index,
            "known_sources": known_sources or [],
            "rasters": None,
        }
        if reasoner.wants_rasters and raster_dir is not None:
            views = render_canonical_views(
                world_points,
                highlight=np.array([c.pose.position for c in cands]),
                raster_w=intr.raster_w,
                raster_h=intr.raster_h,
            )
            payload["rasters"] = save_views(views, raster_dir, stage)
        return payload

    coverage_scores(candidates, current, probes, mem, intr)
    if len(candidates) == 1:
        chosen_dir = candidates[0]
        dir_idx = 0
    else:
        dir_idx = _ask_index(reasoner, "select_direction",
                             packet(candidates, "direction"), len(candidates))
        chosen_dir = candidates[dir_idx]

    poses = sample_poses_along(sphere, chosen_dir, params.m_poses, current,
                               obstacles, floor_z, params)
    coverage_scores(poses, current, probes, mem, intr)
    if len(poses) == 1:
        return SelectedView(pose=poses[0].pose, direction_index=dir_idx, pose_index=0)
    pick = _ask_index(reasoner, "select_pose", packet(poses, "pose"), len(poses))
    if pick == "look_closer":
        return SelectedView(
            pose=_look_closer_pose(current, sphere, intr, params),
            look_closer=True,
            direction_index=dir_idx,
        )
    return SelectedView(pose=poses[pick].pose, direction_index=dir_idx, pose_index=pick)
