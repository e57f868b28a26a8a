"""Ground-truth simulated tabletop environment.

Objects are oriented boxes with per-face surface samples; containers are
objects with a binary open/closed state whose closed faces block every ray
and whose aperture face stops occluding (and stops being sampled) when open.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry, relations, vocab
from .errors import InvariantViolation, ParseError, UnknownEntity, ValidationError
from .geometry import Aabb
from .observation import CameraPose

FACET_KEYS = ("+x", "-x", "+y", "-y", "+z", "-z")
SAMPLES_PER_EDGE = 8
CATEGORIES = (
    "hidden_inside",
    "recursive_search",
    "reposition_to_reveal",
    "sequential_retrieval",
    "semantic_targeting",
    "compositional_reasoning",
)

ROBOT_BASE = np.zeros(3)
DESCRIPTOR_DIM = 16
_SIZE_FEATURE_SCALE = 2.0
_TAG_BLEND = 0.3


def embed_text(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a string (hash-seeded gaussian)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    v = rng.normal(size=dim)
    return v / max(np.linalg.norm(v), 1e-12)


@dataclass
class Facet:
    descriptor: np.ndarray
    tag: Optional[str] = None


def build_facets(
    class_label: str, extent: np.ndarray, facet_tags: dict[str, str]
) -> dict[str, Facet]:
    """Per-face descriptors: shared class appearance, tinted where tagged.

    Untagged faces of same-class same-size objects are indistinguishable by
    design; only centroid distance or a discriminative facet separates them.
    """
    base = np.concatenate(
        [
            embed_text(class_label, 10),
            embed_text(class_label + "/color", 3),
            np.asarray(extent, dtype=float) * _SIZE_FEATURE_SCALE,
        ]
    )
    facets = {}
    for key in FACET_KEYS:
        tag = facet_tags.get(key)
        desc = base.copy()
        if tag is not None:
            tint = np.concatenate([embed_text(tag, 10), np.zeros(6)])
            desc = (1.0 - _TAG_BLEND) * desc + _TAG_BLEND * tint
        facets[key] = Facet(descriptor=desc, tag=tag)
    return facets


@dataclass
class SimObject:
    id: str
    class_label: str
    fine_label: str
    pose: np.ndarray  # x, y, z, yaw, pitch, roll
    extent: np.ndarray  # half sizes
    movable: bool
    facets: dict[str, Facet]
    semantic_tag: Optional[str] = None

    def __post_init__(self) -> None:
        self.pose = np.asarray(self.pose, dtype=float)
        self.extent = np.asarray(self.extent, dtype=float)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3]

    def rotation(self) -> np.ndarray:
        return geometry.rotation_ypr(self.pose[3], self.pose[4], self.pose[5])

    def aabb(self) -> Aabb:
        rot = self.rotation()
        corners = np.array(
            [
                self.center + rot @ (self.extent * np.array(s))
                for s in [
                    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
                    (-1, 1, 1), (-1, 1, -1), (-1, -1, 1), (-1, -1, -1),
                ]
            ]
        )
        return Aabb.from_points(corners)

    def face_frames(self) -> list[dict]:
        return geometry.face_frames(self.center, self.extent, self.rotation())

    def facet_normal(self, key: str) -> np.ndarray:
        idx = FACET_KEYS.index(key)
        axis, sign = geometry.FACE_AXES[idx]
        return sign * self.rotation()[:, axis]


def _face_grid(half_u: float, half_v: float, n: int) -> np.ndarray:
    """Cell-centered (n x n) sample grid over a rectangle, local 2D coords."""
    u = half_u * (2.0 * (np.arange(n) + 0.5) / n - 1.0)
    v = half_v * (2.0 * (np.arange(n) + 0.5) / n - 1.0)
    gu, gv = np.meshgrid(u, v, indexing="ij")
    return np.stack([gu.ravel(), gv.ravel()], axis=1)


def surface_samples(obj: SimObject, skip_face: Optional[int] = None):
    """Surface sample points for one object and their face indices."""
    rot = obj.rotation()
    pts, fids = [], []
    for f, (axis, sign) in enumerate(geometry.FACE_AXES):
        if f == skip_face:
            continue
        u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
        grid = _face_grid(obj.extent[u_axis], obj.extent[v_axis], SAMPLES_PER_EDGE)
        local = np.zeros((len(grid), 3))
        local[:, axis] = sign * obj.extent[axis]
        local[:, u_axis] = grid[:, 0]
        local[:, v_axis] = grid[:, 1]
        pts.append(obj.center + local @ rot.T)
        fids.append(np.full(len(grid), f, dtype=int))
    return np.concatenate(pts, axis=0), np.concatenate(fids)


@dataclass
class Container:
    object_id: str
    state: str  # "open" | "closed"
    interior: Aabb
    handle_point: np.ndarray
    kind: str  # "drawer" | "cabinet"

    def __post_init__(self) -> None:
        self.handle_point = np.asarray(self.handle_point, dtype=float)


def aperture_face(container: Container, obj: SimObject) -> int:
    """Face index the container reveals through when open.

    Drawers open upward (top face); cabinets through the face carrying the
    handle.
    """
    if container.kind == "drawer":
        return FACET_KEYS.index("+z")
    frames = obj.face_frames()
    dists = [float(np.linalg.norm(container.handle_point - f["center"])) for f in frames]
    return int(np.argmin(dists))


@dataclass
class InterventionScript:
    kind: str  # "move_object" | "set_container" | "remove_object"
    target_id: str
    pose: Optional[np.ndarray] = None
    state: Optional[str] = None

    def to_jsonable(self) -> dict:
        d: dict = {"kind": self.kind, "id": self.target_id}
        if self.pose is not None:
            d["pose"] = [float(x) for x in self.pose]
        if self.state is not None:
            d["state"] = self.state
        return d


@dataclass
class Budgets:
    max_steps: int = 30
    max_reasoner_calls: int = 120


@dataclass
class WorldState:
    objects: dict[str, SimObject]
    containers: dict[str, Container]
    camera: CameraPose
    goal_region: Aabb
    inside_of: dict[str, str] = field(default_factory=dict)
    on_top_of: dict[str, str] = field(default_factory=dict)
    held: Optional[str] = None
    step: int = 0

    def object_ids(self) -> list[str]:
        return sorted(self.objects)

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    # geometry --------------------------------------------------------------

    def surface_points(self, oid: str):
        obj = self.objects[oid]
        skip = None
        cont = self.containers.get(oid)
        if cont is not None and cont.state == "open":
            skip = aperture_face(cont, obj)
        return surface_samples(obj, skip_face=skip)

    def face_frames(self, oid: str) -> list[dict]:
        return self.objects[oid].face_frames()

    def occluder_faces(self, exclude: tuple[str, ...] = ()):
        """All blocking faces, stacked for batch ray tests.

        Ordinary objects contribute all six faces; an open container omits
        its aperture so exactly the interior becomes observable.
        """
        lists = []
        for oid in self.object_ids():
            if oid in exclude:
                continue
            frames = self.face_frames(oid)
            cont = self.containers.get(oid)
            if cont is not None and cont.state == "open":
                skip = aperture_face(cont, self.objects[oid])
                frames = [f for i, f in enumerate(frames) if i != skip]
            lists.append(frames)
        return geometry.stack_faces(lists)

    def support_top(self) -> float:
        """Height of the main work surface (largest static object's top)."""
        best, top = -1.0, 0.0
        for obj in self.objects.values():
            if obj.movable:
                continue
            box = obj.aabb()
            area = float((box.hi[0] - box.lo[0]) * (box.hi[1] - box.lo[1]))
            if area > best:
                best, top = area, float(box.hi[2])
        return top

    # bookkeeping -----------------------------------------------------------

    def refresh_derived(self) -> None:
        """Recompute containment/support maps from current poses."""
        self.inside_of = {}
        self.on_top_of = {}
        for oid, obj in self.objects.items():
            for cid, cont in self.containers.items():
                if oid == cid:
                    continue
                if bool(cont.interior.inflate(0.01).contains(obj.center[None, :])[0]):
                    self.inside_of[oid] = cid
                    break
        for oid, obj in self.objects.items():
            if not obj.movable or oid in self.inside_of:
                continue
            box = obj.aabb()
            best, support = None, None
            for sid, other in self.objects.items():
                if sid == oid:
                    continue
                obox = other.aabb()
                if relations._footprint_overlap(box, obox) < 0.3:
                    continue
                gap = float(box.lo[2] - obox.hi[2])
                if abs(gap) <= 0.006 and (best is None or obox.hi[2] > best):
                    best, support = obox.hi[2], sid
            if support is not None:
                self.on_top_of[oid] = support

    def check_invariants(self) -> None:
        for oid, obj in self.objects.items():
            if np.any(obj.extent <= 0):
                raise InvariantViolation(f"{oid}: non-positive extent")
            if set(obj.facets) != set(FACET_KEYS):
                raise InvariantViolation(f"{oid}: facet map incomplete")
        for chain in (self.inside_of, self.on_top_of):
            for start in chain:
                seen, cur = set(), start
                while cur in chain:
                    if cur in seen:
                        raise InvariantViolation("containment/support cycle")
                    seen.add(cur)
                    cur = chain[cur]
        if self.held is not None:
            cid = self.inside_of.get(self.held)
            if cid is not None and self.containers[cid].state == "closed":
                raise InvariantViolation("held object inside closed container")
        self.camera.validate(tol=1e-6)
        for cid, cont in self.containers.items():
            owner = self.objects[cid]
            box = owner.aabb()
            if not (
                np.all(cont.interior.lo >= box.lo - 1e-6)
                and np.all(cont.interior.hi <= box.hi + 1e-6)
            ):
                raise InvariantViolation(f"{cid}: interior leaves owner box")
            local = owner.rotation().T @ (cont.handle_point - owner.center)
            sdf = float(np.max(np.abs(local) - owner.extent))
            if abs(sdf) > 0.005:
                raise InvariantViolation(f"{cid}: handle off the owner surface")


@dataclass
class Scenario:
    name: str
    category: str
    seed: int
    initial_world: WorldState
    instructions: list[str]
    target_ids: list[str]
    interventions: list[tuple[int, InterventionScript]] = field(default_factory=list)
    budgets: Budgets = field(default_factory=Budgets)
    expected_relations: list[tuple[str, str, str]] = field(default_factory=list)


# Intervention application ------------------------------------------------------


def apply_intervention(world: WorldState, script: InterventionScript) -> WorldState:
    """Mutate the world per one script; the agent's memory is not informed."""
    if script.target_id not in world.objects:
        raise UnknownEntity(script.target_id)
    if script.kind == "move_object":
        world.objects[script.target_id].pose = np.asarray(script.pose, dtype=float)
    elif script.kind == "set_container":
        if script.target_id not in world.containers:
            raise UnknownEntity(f"{script.target_id} is not a container")
        world.containers[script.target_id].state = script.state
    elif script.kind == "remove_object":
        if script.target_id in world.containers:
            raise UnknownEntity(f"{script.target_id}: containers cannot be removed")
        del world.objects[script.target_id]
        world.inside_of.pop(script.target_id, None)
        world.on_top_of.pop(script.target_id, None)
        if world.held == script.target_id:
            world.held = None
    else:
        raise UnknownEntity(f"unknown intervention kind {script.kind}")
    world.refresh_derived()
    world.check_invariants()
    return world


# Ground-truth reference graph --------------------------------------------------


def ground_truth_graph(world: WorldState, discovered: set[str]):
    """Reference scene graph over the discovered objects.

    Uses the same relation rules as the agent's memory, applied to the true
    surface samples; Behind edges use the world's current camera.
    """
    from .memory import NodeAttributes, SceneEdge, SceneGraph, SceneNode

    ids = sorted(set(discovered) & set(world.objects))
    points = {oid: world.surface_points(oid)[0] for oid in ids}
    labels = {oid: world.objects[oid].class_label for oid in ids}
    triples = relations.infer_pairwise(points, labels, camera=world.camera)

    nodes = []
    for oid in ids:
        obj = world.objects[oid]
        attrs = NodeAttributes(
            name=obj.class_label,
            movable=obj.movable,
            conf=1.0,
            occl=False,
            view=False,
            desc=f"a {obj.class_label}",
        )
        node = SceneNode(
            node_id=oid,
            kind="known",
            merged_points=points[oid],
            attrs=attrs,
            created_step=0,
        )
        node.alias_labels = {obj.class_label, obj.fine_label}
        nodes.append(node)
    edges = [
        SceneEdge(src=s, dst=d, relation=r, provenance="geometric", created_step=0)
        for (s, d, r) in sorted(triples)
    ]
    return SceneGraph(nodes={n.node_id: n for n in nodes}, edges=edges)


# Scenario file format ----------------------------------------------------------

_TOP_KEYS = {
    "name", "category", "seed", "camera", "goal_region", "objects",
    "containers", "instructions", "targets", "interventions", "budgets",
    "expected_relations",
}
_OBJ_KEYS = {"id", "class_label", "fine_label", "pose", "extent", "movable",
             "facet_tags", "semantic_tag"}
_CONT_KEYS = {"object_id", "state", "kind", "interior", "handle"}
_INT_KEYS = {"trigger_step", "kind", "id", "pose", "state"}
_BUDGET_KEYS = {"max_steps", "max_reasoner_calls"}
_REL_KEYS = {"src", "dst", "relation"}

DEFAULT_CAMERA = dict(position=(0.18, -0.50, 0.85), target=(0.45, 0.05, 0.40))
DEFAULT_GOAL = Aabb(np.array([0.03, -0.36, 0.40]), np.array([0.23, -0.16, 0.60]))


def _reject_unknown(d: dict, allowed: set[str], path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ValidationError(f"{path}.{key}", "unknown key")


def _parse_object(entry: dict, path: str) -> SimObject:
    _reject_unknown(entry, _OBJ_KEYS, path)
    for req in ("id", "class_label", "pose"):
        if req not in entry:
            raise ValidationError(f"{path}.{req}", "missing")
    class_label = entry["class_label"]
    cat = vocab.OBJECT_CATALOG.get(class_label)
    if "extent" in entry:
        extent = np.asarray(entry["extent"], dtype=float)
    elif cat is not None:
        extent = np.array(cat[0], dtype=float)
    else:
        raise ValidationError(f"{path}.extent", "required for unknown class")
    if extent.shape != (3,) or np.any(extent <= 0):
        raise ValidationError(f"{path}.extent", "must be three positive halves")
    pose = np.asarray(entry["pose"], dtype=float)
    if pose.shape != (6,):
        raise ValidationError(f"{path}.pose", "must be [x,y,z,yaw,pitch,roll]")
    movable = entry.get("movable", cat[1] if cat is not None else True)
    facet_tags = entry.get("facet_tags", {}) or {}
    for key in facet_tags:
        if key not in FACET_KEYS:
            raise ValidationError(f"{path}.facet_tags.{key}", "unknown facet")
    semantic_tag = entry.get("semantic_tag")
    if semantic_tag is not None:
        # a zone label is readable from the front and the two x-side facets
        for key in ("-y", "+x", "-x"):
            facet_tags.setdefault(key, semantic_tag)
    return SimObject(
        id=entry["id"],
        class_label=class_label,
        fine_label=entry.get("fine_label", class_label),
        pose=pose,
        extent=extent,
        movable=bool(movable),
        facets=build_facets(class_label, extent, facet_tags),
        semantic_tag=semantic_tag,
    )


def parse_scenario(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ParseError("scenario root must be an object")
    _reject_unknown(data, _TOP_KEYS, "scenario")
    for req in ("name", "category", "seed", "objects", "instructions", "targets"):
        if req not in data:
            raise ValidationError(f"scenario.{req}", "missing")
    if data["category"] not in CATEGORIES:
        raise ValidationError("scenario.category", f"unknown category {data['category']!r}")

    objects: dict[str, SimObject] = {}
    for i, entry in enumerate(data["objects"]):
        obj = _parse_object(entry, f"objects[{i}]")
        if obj.id in objects:
            raise ValidationError(f"objects[{i}].id", f"duplicate id {obj.id!r}")
        objects[obj.id] = obj

    containers: dict[str, Container] = {}
    for i, entry in enumerate(data.get("containers", [])):
        path = f"containers[{i}]"
        _reject_unknown(entry, _CONT_KEYS, path)
        oid = entry.get("object_id")
        if oid not in objects:
            raise ValidationError(f"{path}.object_id", f"dangling reference {oid!r}")
        if oid in containers:
            raise ValidationError(f"{path}.object_id", "duplicate container")
        state = entry.get("state", "closed")
        if state not in ("open", "closed"):
            raise ValidationError(f"{path}.state", state)
        kind = entry.get("kind", "cabinet")
        if kind not in ("cabinet", "drawer"):
            raise ValidationError(f"{path}.kind", kind)
        if "interior" not in entry or "handle" not in entry:
            raise ValidationError(f"{path}", "interior and handle required")
        containers[oid] = Container(
            object_id=oid,
            state=state,
            interior=Aabb.from_jsonable(entry["interior"]),
            handle_point=np.asarray(entry["handle"], dtype=float),
            kind=kind,
        )

    instructions = list(data["instructions"])
    targets = list(data["targets"])
    if len(targets) != len(instructions):
        raise ValidationError("scenario.targets", "one target per instruction")
    for i, tid in enumerate(targets):
        if tid not in objects:
            raise ValidationError(f"targets[{i}]", f"dangling reference {tid!r}")

    interventions: list[tuple[int, InterventionScript]] = []
    for i, entry in enumerate(data.get("interventions", [])):
        path = f"interventions[{i}]"
        _reject_unknown(entry, _INT_KEYS, path)
        kind = entry.get("kind")
        if kind not in ("move_object", "set_container", "remove_object"):
            raise ValidationError(f"{path}.kind", str(kind))
        tid = entry.get("id")
        if tid not in objects:
            raise ValidationError(f"{path}.id", f"dangling reference {tid!r}")
        if kind == "set_container" and tid not in containers:
            raise ValidationError(f"{path}.id", "not a container")
        if kind == "remove_object" and tid in containers:
            raise ValidationError(f"{path}.id", "containers cannot be removed")
        script = InterventionScript(
            kind=kind,
            target_id=tid,
            pose=np.asarray(entry["pose"], dtype=float) if "pose" in entry else None,
            state=entry.get("state"),
        )
        if kind == "move_object" and script.pose is None:
            raise ValidationError(f"{path}.pose", "missing")
        if kind == "set_container" and script.state not in ("open", "closed"):
            raise ValidationError(f"{path}.state", str(script.state))
        interventions.append((int(entry.get("trigger_step", 0)), script))

    expected = []
    for i, entry in enumerate(data.get("expected_relations", [])):
        path = f"expected_relations[{i}]"
        _reject_unknown(entry, _REL_KEYS, path)
        rel = entry.get("relation")
        if rel not in relations.RELATIONS:
            raise ValidationError(f"{path}.relation", f"{rel!r} not a known relation")
        for end in ("src", "dst"):
            if entry.get(end) not in objects:
                raise ValidationError(f"{path}.{end}", "dangling reference")
        expected.append((entry["src"], entry["dst"], rel))

    budgets_entry = data.get("budgets", {})
    _reject_unknown(budgets_entry, _BUDGET_KEYS, "budgets")
    budgets = Budgets(
        max_steps=int(budgets_entry.get("max_steps", 30)),
        max_reasoner_calls=int(budgets_entry.get("max_reasoner_calls", 120)),
    )

    if "camera" in data:
        camera = CameraPose.from_jsonable(data["camera"])
    else:
        camera = CameraPose.look_at(DEFAULT_CAMERA["position"], DEFAULT_CAMERA["target"])
    goal = Aabb.from_jsonable(data["goal_region"]) if "goal_region" in data else Aabb(
        DEFAULT_GOAL.lo.copy(), DEFAULT_GOAL.hi.copy()
    )

    world = WorldState(
        objects=objects,
        containers=containers,
        camera=camera,
        goal_region=goal,
    )
    world.refresh_derived()
    world.check_invariants()
    return Scenario(
        name=data["name"],
        category=data["category"],
        seed=int(data["seed"]),
        initial_world=world,
        instructions=instructions,
        target_ids=targets,
        interventions=interventions,
        budgets=budgets,
        expected_relations=expected,
    )


def load_scenario(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed scenario text: {exc}") from exc
    return parse_scenario(data)


def scenario_to_dict(s: Scenario) -> dict:
    objects = []
    for oid in s.initial_world.object_ids():
        obj = s.initial_world.objects[oid]
        tags = {k: f.tag for k, f in obj.facets.items()
                if f.tag is not None and f.tag != obj.semantic_tag}
        entry: dict = {
            "id": obj.id,
            "class_label": obj.class_label,
            "fine_label": obj.fine_label,
            "pose": [float(x) for x in obj.pose],
            "extent": [float(x) for x in obj.extent],
            "movable": obj.movable,
        }
        if tags:
            entry["facet_tags"] = tags
        if obj.semantic_tag is not None:
            entry["semantic_tag"] = obj.semantic_tag
        objects.append(entry)
    containers = []
    for cid in sorted(s.initial_world.containers):
        cont = s.initial_world.containers[cid]
        containers.append(
            {
                "object_id": cid,
                "state": cont.state,
                "kind": cont.kind,
                "interior": cont.interior.to_jsonable(),
                "handle": [float(x) for x in cont.handle_point],
            }
        )
    return {
        "name": s.name,
        "category": s.category,
        "seed": s.seed,
        "camera": s.initial_world.camera.to_jsonable(),
        "goal_region": s.initial_world.goal_region.to_jsonable(),
        "objects": objects,
        "containers": containers,
        "instructions": list(s.instructions),
        "targets": list(s.target_ids),
        "interventions": [
            dict(trigger_step=t, **script.to_jsonable())
            for t, script in s.interventions
        ],
        "budgets": {
            "max_steps": s.budgets.max_steps,
            "max_reasoner_calls": s.budgets.max_reasoner_calls,
        },
        "expected_relations": [
            {"src": a, "dst": b, "relation": r} for a, b, r in s.expected_relations
        ],
    }


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(s), fh, indent=2, sort_keys=True)
        fh.write("\n")
