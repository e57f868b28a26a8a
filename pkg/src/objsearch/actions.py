"""Interactive-perception primitives and terminal retrieval.

Primitives are precondition-checked world transitions: a failed call returns
an unchanged world plus the failure reason (transactional).  Kinematic
feasibility is proxied by a reach radius around the robot base and by the
"was it visible last observation" rule instead of a real planner.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry
from .errors import InvariantViolation
from .geometry import Aabb
from .memory import Memory
from .observation import CameraIntrinsics, frustum_mask
from .world import ROBOT_BASE, WorldState

REACH_RADIUS = 0.9

OK = "ok"
NOT_A_CONTAINER = "not_a_container"
ALREADY_OPEN = "already_open"
ALREADY_CLOSED = "already_closed"
NOT_MOVABLE = "not_movable"
NOT_EXPOSED = "not_exposed"
NOT_OBSERVED = "not_observed"
OUT_OF_REACH = "out_of_reach"
DESTINATION_BLOCKED = "destination_blocked"
UNKNOWN_ENTITY = "unknown_entity"
GRIPPER_BUSY = "gripper_busy"

PRIMITIVE_KINDS = ("open", "close", "pick_place", "rotate", "retrieve")


@dataclass
class Primitive:
    kind: str
    node_id: Optional[str]
    object_id: str
    destination: Optional[np.ndarray] = None  # pick_place pose
    angle: Optional[float] = None  # rotate yaw delta
    goal_region: Optional[Aabb] = None  # retrieve


@dataclass
class ActionOutcome:
    success: bool
    reason: str
    world_delta: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {"success": self.success, "reason": self.reason,
                "world_delta": self.world_delta}


def bind_node_to_object(world: WorldState, node) -> Optional[str]:
    """Resolve a memory node to the nearest world object by centroid."""
    c = node.centroid()
    best, best_d = None, 0.15
    for oid in world.object_ids():
        d = float(np.linalg.norm(world.objects[oid].center - c))
        if d < best_d:
            best, best_d = oid, d
    return best


def _within_reach(point: np.ndarray) -> bool:
    return float(np.linalg.norm(np.asarray(point) - ROBOT_BASE)) <= REACH_RADIUS


def _detected_last(mem: Memory, object_id: str) -> bool:
    obs = mem.last_observation
    if obs is None:
        return False
    return any(d.source_id == object_id for d in obs.detections)


def _handle_visible(world: WorldState, mem: Memory, intr: CameraIntrinsics,
                    handle: np.ndarray) -> bool:
    obs = mem.last_observation
    if obs is None:
        return False
    if not bool(frustum_mask(obs.camera, intr, handle[None, :])[0]):
        return False
    centers, normals, us, vs, hu, hv = world.occluder_faces()
    rel = handle - obs.camera.position
    dist = float(np.linalg.norm(rel))
    dirs = (rel / max(dist, 1e-12))[None, :]
    t = geometry.rays_hit_rects(obs.camera.position, dirs, centers, normals,
                                us, vs, hu, hv)
    return not bool(np.any(t < dist - 1e-3))


def _enclosed(world: WorldState, object_id: str) -> bool:
    cid = world.inside_of.get(object_id)
    return cid is not None and world.containers[cid].state == "closed"


def _burdened(world: WorldState, object_id: str) -> list[str]:
    return sorted(o for o, s in world.on_top_of.items() if s == object_id)


def _support_below(world: WorldState, oid: str, x: float, y: float) -> float:
    """Resting height for a footprint centered at (x, y)."""
    top = 0.0
    obj = world.objects[oid]
    half = obj.extent
    for sid, other in world.objects.items():
        if sid == oid:
            continue
        box = other.aabb()
        if (box.lo[0] - half[0] <= x <= box.hi[0] + half[0]
                and box.lo[1] - half[1] <= y <= box.hi[1] + half[1]):
            top = max(top, float(box.hi[2]))
    return top


def _placement_free(world: WorldState, oid: str, pose: np.ndarray) -> bool:
    """Interpenetration test; resting contact (zero z-overlap) is allowed."""
    trial = copy.deepcopy(world.objects[oid])
    trial.pose = pose
    box = trial.aabb()
    for sid, other in world.objects.items():
        if sid == oid:
            continue
        obox = other.aabb()
        overlap = np.minimum(box.hi, obox.hi) - np.maximum(box.lo, obox.lo)
        if overlap[0] > 1e-3 and overlap[1] > 1e-3 and overlap[2] > 2e-3:
            return False
    return True


def execute_primitive(
    world: WorldState,
    p: Primitive,
    mem: Memory,
    intr: Optional[CameraIntrinsics] = None,
) -> tuple[WorldState, ActionOutcome]:
    """Apply one primitive; on any precondition failure the world is returned
    untouched with the reason."""
    intr = intr or CameraIntrinsics()

    def fail(reason: str, **delta) -> tuple[WorldState, ActionOutcome]:
        return world, ActionOutcome(False, reason, dict(delta))

    if p.object_id not in world.objects:
        return fail(UNKNOWN_ENTITY)
    obj = world.objects[p.object_id]

    if p.kind in ("open", "close"):
        cont = world.containers.get(p.object_id)
        if cont is None:
            return fail(NOT_A_CONTAINER)
        if p.kind == "open" and cont.state == "open":
            return fail(ALREADY_OPEN)
        if p.kind == "close" and cont.state == "closed":
            return fail(ALREADY_CLOSED)
        if not _handle_visible(world, mem, intr, cont.handle_point):
            return fail(NOT_OBSERVED)
        if not _within_reach(cont.handle_point):
            return fail(OUT_OF_REACH)
        snapshot = world.copy()
        cont.state = "open" if p.kind == "open" else "closed"
        try:
            world.refresh_derived()
            world.check_invariants()
        except InvariantViolation:
            return snapshot, ActionOutcome(False, DESTINATION_BLOCKED, {})
        return world, ActionOutcome(True, OK, {"container": p.object_id,
                                               "state": cont.state})

    if p.kind == "pick_place":
        if not obj.movable:
            return fail(NOT_MOVABLE)
        if not _detected_last(mem, p.object_id):
            return fail(NOT_OBSERVED)
        if _enclosed(world, p.object_id):
            return fail(NOT_EXPOSED)
        if _burdened(world, p.object_id):
            return fail(NOT_EXPOSED)
        if not _within_reach(obj.center):
            return fail(OUT_OF_REACH)
        if p.destination is None:
            return fail(DESTINATION_BLOCKED, destination=None)
        dest = np.asarray(p.destination, dtype=float).copy()
        if not _within_reach(dest[:3]):
            return fail(OUT_OF_REACH, destination=list(map(float, dest)))
        dest[2] = _support_below(world, p.object_id, dest[0], dest[1]) + obj.extent[2]
        trial_pose = np.array([dest[0], dest[1], dest[2], dest[3] if len(dest) > 3
                               else obj.pose[3], 0.0, 0.0])
        if not _placement_free(world, p.object_id, trial_pose):
            return fail(DESTINATION_BLOCKED, destination=list(map(float, dest)))
        snapshot = world.copy()
        former = obj.aabb()
        obj.pose = trial_pose
        try:
            world.refresh_derived()
            world.check_invariants()
        except InvariantViolation:
            return snapshot, ActionOutcome(False, DESTINATION_BLOCKED, {})
        return world, ActionOutcome(True, OK, {
            "moved": p.object_id,
            "former_footprint": former.to_jsonable(),
            "to": [float(x) for x in trial_pose],
        })

    if p.kind == "rotate":
        if not obj.movable:
            return fail(NOT_MOVABLE)
        if not _detected_last(mem, p.object_id):
            return fail(NOT_OBSERVED)
        if _enclosed(world, p.object_id):
            return fail(NOT_EXPOSED)
        if _burdened(world, p.object_id):
            return fail(NOT_EXPOSED)
        if not _within_reach(obj.center):
            return fail(OUT_OF_REACH)
        if p.angle is None:
            return fail(DESTINATION_BLOCKED)
        snapshot = world.copy()
        obj.pose[3] = float((obj.pose[3] + p.angle) % (2 * np.pi))
        try:
            world.refresh_derived()
            world.check_invariants()
        except InvariantViolation:
            return snapshot, ActionOutcome(False, DESTINATION_BLOCKED, {})
        return world, ActionOutcome(True, OK, {"rotated": p.object_id,
                                               "angle": float(p.angle)})

    if p.kind == "retrieve":
        if world.held is not None:
            return fail(GRIPPER_BUSY)
        if not _detected_last(mem, p.object_id):
            return fail(NOT_OBSERVED)
        if _enclosed(world, p.object_id):
            return fail(NOT_EXPOSED)
        if _burdened(world, p.object_id):
            return fail(NOT_EXPOSED)
        if not obj.movable:
            return fail(NOT_MOVABLE)
        if not _within_reach(obj.center):
            return fail(OUT_OF_REACH)
        region = p.goal_region if p.goal_region is not None else world.goal_region
        spot = _goal_spot(world, p.object_id, region)
        if spot is None:
            return fail(DESTINATION_BLOCKED)
        snapshot = world.copy()
        former = obj.aabb()
        obj.pose = spot
        try:
            world.refresh_derived()
            world.check_invariants()
        except InvariantViolation:
            return snapshot, ActionOutcome(False, DESTINATION_BLOCKED, {})
        return world, ActionOutcome(True, OK, {
            "retrieved": p.object_id,
            "former_footprint": former.to_jsonable(),
            "to": [float(x) for x in spot],
        })

    return fail(UNKNOWN_ENTITY, kind=p.kind)


def _goal_spot(world: WorldState, oid: str, region: Aabb) -> Optional[np.ndarray]:
    obj = world.objects[oid]
    xs = np.linspace(region.lo[0] + obj.extent[0], region.hi[0] - obj.extent[0], 4)
    ys = np.linspace(region.lo[1] + obj.extent[1], region.hi[1] - obj.extent[1], 4)
    for x in xs:
        for y in ys:
            z = _support_below(world, oid, float(x), float(y)) + obj.extent[2]
            pose = np.array([x, y, z, obj.pose[3], 0.0, 0.0])
            center = pose[:3]
            if not bool(region.contains(center[None, :], margin=1e-6)[0]):
                continue
            if _placement_free(world, oid, pose):
                return pose
    return None


def retrieve(
    world: WorldState,
    target_id: str,
    goal_region: Optional[Aabb],
    mem: Memory,
    intr: Optional[CameraIntrinsics] = None,
) -> tuple[WorldState, ActionOutcome]:
    """Grasp-and-relocate terminal action (grasp synthesis abstracted away)."""
    prim = Primitive(kind="retrieve", node_id=None, object_id=target_id,
                     goal_region=goal_region)
    return execute_primitive(world, prim, mem, intr)
