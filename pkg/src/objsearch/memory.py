"""Dynamic hierarchical scene-graph memory.

Every observation flows through one pipeline: instance matching, point-set
merging, attribute refresh, relation inference, and Unknown-node hypothesis
for regions the agent cannot currently see (closed containers, camera
shadows, slabs under elevated objects, the unswept workspace).

All model-like judgments (matching, attributes, hypothesis vetoes) are
delegated to a reasoner through typed requests; the deterministic defaults
live in the heuristic reasoner.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import vocab
from .errors import SchemaError
from .geometry import Aabb
from .observation import CameraIntrinsics, CameraPose, Observation, frustum_mask

KNOWN = "known"
UNKNOWN = "unknown"


@dataclass
class MemoryParams:
    theta_match: float = 0.5  # match cost ceiling; above it a detection is New
    lam: float = 1.0  # meters-to-cost weight on centroid distance
    voxel: float = 0.01  # merge voxel size
    theta_full: float = 0.6  # visible fraction counting as a full view
    v_min: float = 0.001  # 1 liter; smaller hidden regions are ignored
    theta_explored: float = 0.8  # probe coverage that resolves an Unknown
    gamma_stale: float = 0.5  # confidence decay for vanished nodes
    occupancy_voxel: float = 0.02  # voxel size for ray-blocking tests
    frontier_cell: float = 0.06  # workspace sweep cell size
    max_exact_assign: int = 10  # detections handled by exact assignment
    # workspace the robot may ever need to sweep (its own reach, not a
    # ground-truth quantity)
    workspace_lo: tuple[float, float] = (0.0, -0.45)
    workspace_hi: tuple[float, float] = (0.95, 0.45)


@dataclass
class NodeAttributes:
    name: str = "unknown"
    movable: bool = True
    conf: float = 0.0
    occl: bool = False
    view: bool = False
    desc: str = ""


@dataclass
class ObsEntry:
    step: int
    descriptor: np.ndarray
    visible_fraction: float
    frustum_clipped: bool
    label: str
    tags: tuple[str, ...] = ()


@dataclass
class SceneNode:
    node_id: str
    kind: str  # "known" | "unknown"
    attrs: NodeAttributes
    created_step: int
    obs_history: list[ObsEntry] = field(default_factory=list)
    merged_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    # bookkeeping beyond the core contract
    seen_tags: set[str] = field(default_factory=set)
    source_ids: set[str] = field(default_factory=set)  # metrics/oracle plumbing
    alias_labels: set[str] = field(default_factory=set)
    stale: bool = False
    last_matched_step: int = -1
    last_decay_step: int = -1
    # unknown-node fields
    region: Optional[Aabb] = None
    parent_id: Optional[str] = None
    relation_to_parent: Optional[str] = None
    coverage: float = 0.0
    blocker_id: Optional[str] = None

    def centroid(self) -> np.ndarray:
        if len(self.merged_points):
            return self.merged_points.mean(axis=0)
        if self.region is not None:
            return self.region.center
        return np.zeros(3)


@dataclass
class SceneEdge:
    src: str
    dst: str
    relation: str
    provenance: str  # "geometric" | "semantic" | "action"
    created_step: int = 0


@dataclass
class SceneGraph:
    nodes: dict[str, SceneNode] = field(default_factory=dict)
    edges: list[SceneEdge] = field(default_factory=list)

    def known_nodes(self) -> list[SceneNode]:
        return [self.nodes[k] for k in sorted(self.nodes) if self.nodes[k].kind == KNOWN]

    def unknown_nodes(self) -> list[SceneNode]:
        return [self.nodes[k] for k in sorted(self.nodes) if self.nodes[k].kind == UNKNOWN]

    def edges_from(self, node_id: str) -> list[SceneEdge]:
        return [e for e in self.edges if e.src == node_id]

    def check_invariants(self) -> None:
        seen = set()
        for e in self.edges:
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise AssertionError(f"edge {e} references missing node")
            if e.src == e.dst:
                raise AssertionError("self edge")
            key = (e.src, e.dst, e.relation)
            if key in seen:
                raise AssertionError(f"duplicate edge {key}")
            seen.add(key)
        for node in self.nodes.values():
            if node.kind == KNOWN:
                if not node.obs_history or not len(node.merged_points):
                    raise AssertionError(f"{node.node_id}: empty known node")
            else:
                if node.obs_history or len(node.merged_points):
                    raise AssertionError(f"{node.node_id}: unknown node with data")
                if node.attrs.name != "unknown":
                    raise AssertionError("unknown node must be named 'unknown'")


@dataclass
class ActionRecord:
    step: int
    target: Optional[str]
    action: str
    goal_text: str
    outcome: dict


@dataclass
class Memory:
    graph: SceneGraph = field(default_factory=SceneGraph)
    last_observation: Optional[Observation] = None
    history: list[ActionRecord] = field(default_factory=list)
    next_node_idx: int = 0
    container_open: dict[str, bool] = field(default_factory=dict)
    explored: set[str] = field(default_factory=set)
    shadow_resolved: dict[str, list[np.ndarray]] = field(default_factory=dict)
    frontier_seen: set[tuple[int, int]] = field(default_factory=set)
    node_prev_centroid: dict[str, np.ndarray] = field(default_factory=dict)

    def note_action(self, record: ActionRecord) -> None:
        """Record an executed decision and fold outcomes into beliefs."""
        if self.history and record.step <= self.history[-1].step:
            raise AssertionError("history steps must strictly increase")
        self.history.append(record)
        ok = bool(record.outcome.get("success"))
        if record.target is None or not ok:
            return
        if record.action == "open":
            self.container_open[record.target] = True
        elif record.action == "close":
            self.container_open[record.target] = False
            self.explored.discard(f"inside::{record.target}")

    def believed_closed(self, node_id: str) -> bool:
        node = self.graph.nodes.get(node_id)
        if node is None:
            return False
        toks = vocab.tokens(node.attrs.name)
        if not toks & vocab.CONTAINER_CLASSES:
            return False
        return not self.container_open.get(node_id, False)

    def cloud(self, exclude: tuple[str, ...] = ()):
        """Stacked Known-node points plus per-point node attribution."""
        pts, owners = [], []
        for node in self.graph.known_nodes():
            if node.node_id in exclude:
                continue
            pts.append(node.merged_points)
            owners.extend([node.node_id] * len(node.merged_points))
        if not pts:
            return np.zeros((0, 3)), []
        return np.concatenate(pts, axis=0), owners


# Voxel hashing / probe rays -----------------------------------------------------

_PACK = 4096
_OFF = 2048


def voxel_keys(pts: np.ndarray, voxel: float) -> np.ndarray:
    ijk = np.floor(np.asarray(pts, dtype=float) / voxel).astype(np.int64) + _OFF
    ijk = np.clip(ijk, 0, _PACK - 1)
    return (ijk[:, 0] * _PACK + ijk[:, 1]) * _PACK + ijk[:, 2]


def _membership(queries: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(queries.shape, dtype=bool)
    idx = np.clip(np.searchsorted(sorted_keys, queries), 0, len(sorted_keys) - 1)
    return sorted_keys[idx] == queries


def ray_free(
    origin: np.ndarray,
    targets: np.ndarray,
    cloud: np.ndarray,
    voxel: float,
    key_owner: Optional[dict[int, str]] = None,
):
    """Which camera->target rays cross no occupied voxel of the cloud.

    Voxels within ~2 cells of either endpoint never block (a probe next to
    its own surface should not self-occlude).  Returns (free mask, blocker
    id per ray or None).
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    n = len(targets)
    if n == 0:
        return np.zeros(0, dtype=bool), []
    keys = np.sort(voxel_keys(cloud, voxel)) if len(cloud) else np.zeros(0, np.int64)
    rel = targets - origin
    dist = np.linalg.norm(rel, axis=1)
    step = voxel * 0.6
    guard = 1.9 * voxel
    max_steps = max(int(np.ceil((dist.max() - 2 * guard) / step)) + 1, 1)
    s = guard + step * np.arange(max_steps)
    valid = s[None, :] < (dist - guard)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = rel / np.maximum(dist, 1e-12)[:, None]
    pos = origin[None, None, :] + s[None, :, None] * dirs[:, None, :]
    qkeys = voxel_keys(pos.reshape(-1, 3), voxel).reshape(n, max_steps)
    hit = _membership(qkeys, keys) & valid
    blocked = hit.any(axis=1)
    blockers: list[Optional[str]] = [None] * n
    if key_owner is not None and blocked.any():
        first = np.argmax(hit, axis=1)
        for i in np.nonzero(blocked)[0]:
            blockers[i] = key_owner.get(int(qkeys[i, first[i]]))
    return ~blocked, blockers


def cloud_index(mem: Memory, voxel: float, exclude: tuple[str, ...] = ()):
    pts, owners = mem.cloud(exclude=exclude)
    if len(pts) == 0:
        return pts, {}
    keys = voxel_keys(pts, voxel)
    owner_map: dict[int, str] = {}
    order = np.argsort(np.array(owners, dtype=object), kind="stable")
    for i in order:
        owner_map.setdefault(int(keys[i]), owners[i])
    return pts, owner_map


# Core operations ----------------------------------------------------------------


def merge_point_sets(existing: np.ndarray, incoming: np.ndarray, voxel: float) -> np.ndarray:
    """Union with one representative (centroid) per occupied voxel."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    existing = np.asarray(existing, dtype=float).reshape(-1, 3)
    incoming = np.asarray(incoming, dtype=float).reshape(-1, 3)
    pts = np.concatenate([existing, incoming], axis=0)
    if len(pts) == 0:
        return pts
    keys = voxel_keys(pts, voxel)
    uniq, inverse = np.unique(keys, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    counts = np.zeros(len(uniq))
    np.add.at(sums, inverse, pts)
    np.add.at(counts, inverse, 1.0)
    return sums / counts[:, None]


def match_detections(
    graph: SceneGraph,
    obs: Observation,
    reasoner,
    params: Optional[MemoryParams] = None,
) -> dict[int, Optional[str]]:
    """Detection index -> existing node id, or None for a new instance."""
    params = params or MemoryParams()
    known = graph.known_nodes()
    if not obs.detections:
        return {}
    if not known:
        return {i: None for i in range(len(obs.detections))}
    payload = {
        "params": {"theta_match": params.theta_match, "lam": params.lam,
                   "exact_limit": params.max_exact_assign},
        "detections": [
            {
                "index": i,
                "centroid": [float(x) for x in det.visible_points.mean(axis=0)],
                "descriptor": [float(x) for x in det.descriptor],
                "label": det.observed_label,
                "source_id": det.source_id,
            }
            for i, det in enumerate(obs.detections)
        ],
        "nodes": [
            {
                "node_id": n.node_id,
                "centroid": [float(x) for x in n.centroid()],
                "descriptor": [float(x) for x in n.obs_history[-1].descriptor],
                "name": n.attrs.name,
                "source_ids": sorted(n.source_ids),
            }
            for n in known
        ],
    }
    from .reasoner import ReasonerRequest

    resp = reasoner.respond(ReasonerRequest("match_instances", payload))
    assignment = resp.result.get("assignment")
    if not isinstance(assignment, list) or len(assignment) != len(obs.detections):
        raise SchemaError("match_instances: bad assignment length")
    node_ids = {n.node_id for n in known}
    out: dict[int, Optional[str]] = {}
    used: set[str] = set()
    for i, nid in enumerate(assignment):
        if nid is None:
            out[i] = None
            continue
        if nid not in node_ids:
            raise SchemaError(f"match_instances: unknown node {nid!r}")
        if nid in used:
            raise SchemaError(f"match_instances: node {nid!r} assigned twice")
        used.add(nid)
        out[i] = nid
    return out


def _modal_label(entries: list[ObsEntry]) -> tuple[str, float]:
    counts: dict[str, int] = {}
    for e in entries:
        counts[e.label] = counts.get(e.label, 0) + 1
    best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return best[0], best[1] / len(entries)


def heuristic_attributes(node: SceneNode, params: MemoryParams) -> NodeAttributes:
    """Deterministic attribute rules over a node's observation history."""
    entries = node.obs_history
    name, conf = _modal_label(entries)
    occl = all(
        e.visible_fraction < params.theta_full and not e.frustum_clipped
        for e in entries
    )
    view = all(e.frustum_clipped for e in entries)
    toks = vocab.tokens(name)
    movable = True
    for tok in toks:
        if tok in vocab.OBJECT_CATALOG:
            movable = vocab.OBJECT_CATALOG[tok][1]
            break
    desc = f"a {name}, seen {len(entries)}x"
    if node.seen_tags:
        desc += ", labeled " + "/".join(sorted(node.seen_tags))
    if occl:
        desc += ", always partly occluded"
    if view:
        desc += ", never fully in frame"
    return NodeAttributes(name=name, movable=movable, conf=conf, occl=occl,
                          view=view, desc=desc)


def update_attributes(node: SceneNode, reasoner) -> NodeAttributes:
    """Single-node attribute refresh through the reasoner."""
    from .reasoner import ReasonerRequest

    payload = {"nodes": [_attr_entry(node)]}
    resp = reasoner.respond(ReasonerRequest("infer_attributes", payload))
    return _parse_attrs(resp.result["attributes"][0])


def _attr_entry(node: SceneNode) -> dict:
    return {
        "node_id": node.node_id,
        "history": [
            {
                "step": e.step,
                "label": e.label,
                "visible_fraction": float(e.visible_fraction),
                "frustum_clipped": bool(e.frustum_clipped),
                "tags": list(e.tags),
            }
            for e in node.obs_history
        ],
        "tags": sorted(node.seen_tags),
        "source_ids": sorted(node.source_ids),
    }


def _parse_attrs(d: dict) -> NodeAttributes:
    try:
        return NodeAttributes(
            name=str(d["name"]),
            movable=bool(d["movable"]),
            conf=float(d["conf"]),
            occl=bool(d["occl"]),
            view=bool(d["view"]),
            desc=str(d["desc"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"infer_attributes: {exc}") from exc


def infer_relations(
    graph: SceneGraph,
    camera: Optional[CameraPose],
    history: list[ActionRecord],
    step: int = 0,
) -> list[SceneEdge]:
    """Recompute relation edges: geometric + semantic replaced, action kept."""
    from . import relations as rel_rules

    known = [n for n in graph.known_nodes() if not n.stale]
    points = {n.node_id: n.merged_points for n in known}
    labels = {n.node_id: n.attrs.name for n in known}
    triples = rel_rules.infer_pairwise(points, labels, camera=camera)

    edges: list[SceneEdge] = []
    for src, dst, rel in sorted(triples):
        prov = "semantic" if rel == "belong" else "geometric"
        edges.append(SceneEdge(src, dst, rel, prov, created_step=step))

    kept_action = [e for e in graph.edges if e.provenance == "action"
                   and e.src in graph.nodes and e.dst in graph.nodes]
    new_keys = {(e.src, e.dst, e.relation) for e in edges}
    for e in kept_action:
        if (e.src, e.dst, e.relation) not in new_keys:
            edges.append(e)
            new_keys.add((e.src, e.dst, e.relation))

    # edges touching Unknown nodes are owned by hypothesize_unknowns
    for e in graph.edges:
        node_kinds = (graph.nodes[e.src].kind, graph.nodes[e.dst].kind)
        if UNKNOWN in node_kinds and (e.src, e.dst, e.relation) not in new_keys:
            edges.append(e)
            new_keys.add((e.src, e.dst, e.relation))
    return edges


def _under_hints(mem: Memory, created: list[SceneNode], step: int) -> list[SceneEdge]:
    """Action rule: a node appearing where a lifted object used to rest was
    under it."""
    edges = []
    for rec in mem.history:
        fp = rec.outcome.get("former_footprint")
        if fp is None or rec.target not in mem.graph.nodes:
            continue
        box = Aabb.from_jsonable(fp)
        for node in created:
            c = node.centroid()
            if (
                box.lo[0] - 0.02 <= c[0] <= box.hi[0] + 0.02
                and box.lo[1] - 0.02 <= c[1] <= box.hi[1] + 0.02
                and c[2] <= box.hi[2] + 0.02
            ):
                edges.append(SceneEdge(node.node_id, rec.target, "under",
                                       "action", created_step=step))
    return edges


# Unknown-node machinery ---------------------------------------------------------


def _support_node(mem: Memory) -> Optional[SceneNode]:
    best, best_area = None, 0.0
    for node in mem.graph.known_nodes():
        if node.attrs.movable or not len(node.merged_points):
            continue
        box = Aabb.from_points(node.merged_points)
        area = float((box.hi[0] - box.lo[0]) * (box.hi[1] - box.lo[1]))
        if area > best_area:
            best, best_area = node, area
    return best


def _frontier_cells(mem: Memory, params: MemoryParams):
    lo = np.array(params.workspace_lo)
    hi = np.array(params.workspace_hi)
    nx = int(np.ceil((hi[0] - lo[0]) / params.frontier_cell))
    ny = int(np.ceil((hi[1] - lo[1]) / params.frontier_cell))
    cells = [(i, j) for i in range(nx) for j in range(ny)]
    centers = {
        (i, j): lo + params.frontier_cell * (np.array([i, j]) + 0.5) for i, j in cells
    }
    return cells, centers


def _largest_cluster(cells: list[tuple[int, int]]) -> list[tuple[int, int]]:
    remaining = set(cells)
    best: list[tuple[int, int]] = []
    while remaining:
        seed = min(remaining)
        comp, stack = [], [seed]
        remaining.discard(seed)
        while stack:
            c = stack.pop()
            comp.append(c)
            for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = (c[0] + d[0], c[1] + d[1])
                if nb in remaining:
                    remaining.discard(nb)
                    stack.append(nb)
        if len(comp) > len(best):
            best = comp
    return best


def _shadow_region(node: SceneNode, camera: CameraPose, mem: Memory,
                   floor_z: float) -> Optional[Aabb]:
    """Box hidden behind a node along the dominant horizontal view axis,
    truncated at the first obstacle."""
    box = Aabb.from_points(node.merged_points)
    view = box.center - camera.position
    axis = 0 if abs(view[0]) >= abs(view[1]) else 1
    sign = 1.0 if view[axis] > 0 else -1.0
    far = box.hi[axis] if sign > 0 else box.lo[axis]
    length = 0.4
    for other in mem.graph.known_nodes():
        if other.node_id == node.node_id:
            continue
        obox = Aabb.from_points(other.merged_points)
        other_axis = 1 - axis
        if obox.hi[other_axis] < box.lo[other_axis] or obox.lo[other_axis] > box.hi[other_axis]:
            continue
        near = obox.lo[axis] if sign > 0 else obox.hi[axis]
        gap = sign * (near - far)
        if 0.0 < gap < length:
            length = gap
    if length <= 0.01:
        return None
    lo, hi = box.lo.copy(), box.hi.copy()
    if sign > 0:
        lo[axis], hi[axis] = far, far + length
    else:
        lo[axis], hi[axis] = far - length, far
    lo[2], hi[2] = floor_z, max(box.hi[2], floor_z + 0.02)
    return Aabb(lo, hi)


def _under_region(node: SceneNode, mem: Memory, floor_z: float) -> Optional[Aabb]:
    box = Aabb.from_points(node.merged_points)
    bottom = float(box.lo[2])
    support = floor_z
    from . import relations as rel_rules

    for other in mem.graph.known_nodes():
        if other.node_id == node.node_id:
            continue
        obox = Aabb.from_points(other.merged_points)
        if rel_rules._footprint_overlap(box, obox) < 0.3:
            continue
        top = float(obox.hi[2])
        if support < top <= bottom + 1e-3:
            support = top
    if bottom - support <= 0.005:
        return None
    lo = np.array([box.lo[0], box.lo[1], support])
    hi = np.array([box.hi[0], box.hi[1], bottom])
    return Aabb(lo, hi)


def _coverage(region_probes: np.ndarray, camera: CameraPose, intr: CameraIntrinsics,
              mem: Memory, params: MemoryParams):
    pts, owner_map = cloud_index(mem, params.occupancy_voxel)
    in_frustum = frustum_mask(camera, intr, region_probes)
    free, blockers = ray_free(camera.position, region_probes, pts,
                              params.occupancy_voxel, key_owner=owner_map)
    visible = in_frustum & free
    cov = float(np.mean(visible)) if len(region_probes) else 1.0
    blocked_owners = [b for i, b in enumerate(blockers) if b is not None and in_frustum[i]]
    blocker = None
    if blocked_owners:
        counts: dict[str, int] = {}
        for b in blocked_owners:
            counts[b] = counts.get(b, 0) + 1
        cand, n = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if n >= 0.3 * len(region_probes):
            blocker = cand
    return cov, blocker


def _region_probes(region: Aabb, kind: str) -> np.ndarray:
    if kind == "inside":
        return region.grid((3, 3, 3))
    if kind == "under":
        return region.grid((3, 3, 2))
    return region.grid((3, 3, 2))


def hypothesize_unknowns(
    mem: Memory,
    camera: CameraPose,
    intr: CameraIntrinsics,
    reasoner,
    params: Optional[MemoryParams] = None,
    step: int = 0,
) -> None:
    """Maintain Unknown nodes over unobserved regions.

    Closed containers get an Inside child; big camera shadows and raised
    objects get Behind/Under children; the unswept workspace keeps a single
    frontier child on the support surface.  An Unknown resolves once enough
    probe rays into its region come back unoccluded.
    """
    params = params or MemoryParams()
    graph = mem.graph
    support = _support_node(mem)
    floor_z = 0.0
    if support is not None:
        floor_z = float(Aabb.from_points(support.merged_points).hi[2])

    # --- update frontier bookkeeping (sticky "seen" cells)
    if support is not None:
        cells, centers = _frontier_cells(mem, params)
        unseen = [c for c in cells if c not in mem.frontier_seen]
        if unseen:
            probes = np.array([
                np.array([centers[c][0], centers[c][1], floor_z + 0.04]) for c in unseen
            ])
            pts, _ = mem.cloud()
            vis = frustum_mask(camera, intr, probes)
            free, _ = ray_free(camera.position, probes, pts, params.occupancy_voxel)
            for c, ok in zip(unseen, vis & free):
                if ok:
                    mem.frontier_seen.add(c)

    proposals: list[dict] = []

    def ensure(uid: str, parent: SceneNode, relation: str, region: Aabb):
        if uid in graph.nodes:
            graph.nodes[uid].region = region
            return
        proposals.append({
            "unknown_id": uid,
            "parent": parent.node_id,
            "relation": relation,
            "region": region.to_jsonable(),
        })

    # closed containers -> inside child
    for node in graph.known_nodes():
        if not mem.believed_closed(node.node_id):
            continue
        if f"inside::{node.node_id}" in mem.explored:
            continue
        region = Aabb.from_points(node.merged_points).scaled(0.7)
        ensure(f"u_inside::{node.node_id}", node, "inside", region)

    # camera shadows and raised-bottom slabs
    for node in graph.known_nodes():
        if support is not None and node.node_id == support.node_id:
            continue
        prev = mem.node_prev_centroid.get(node.node_id)
        cen = node.centroid()
        if prev is not None and np.linalg.norm(cen - prev) > 0.05:
            mem.shadow_resolved.pop(node.node_id, None)
            mem.explored.discard(f"under::{node.node_id}")
        mem.node_prev_centroid[node.node_id] = cen

        sreg = _shadow_region(node, camera, mem, floor_z)
        if sreg is not None and sreg.volume > params.v_min:
            uid = f"u_behind::{node.node_id}"
            centers_done = mem.shadow_resolved.get(node.node_id, [])
            if uid not in graph.nodes and all(
                np.linalg.norm(sreg.center - c) > 0.15 for c in centers_done
            ):
                ensure(uid, node, "behind", sreg)

        if node.attrs.movable and f"under::{node.node_id}" not in mem.explored:
            ureg = _under_region(node, mem, floor_z)
            if ureg is not None and ureg.volume > params.v_min:
                ensure(f"u_under::{node.node_id}", node, "under", ureg)

    # workspace frontier
    if support is not None:
        cells, centers = _frontier_cells(mem, params)
        unseen = [c for c in cells if c not in mem.frontier_seen]
        seen_frac = 1.0 - len(unseen) / max(len(cells), 1)
        uid = f"u_frontier::{support.node_id}"
        if seen_frac < params.theta_explored and f"frontier::{support.node_id}" not in mem.explored:
            cluster = _largest_cluster(unseen)
            pts2d = np.array([centers[c] for c in cluster])
            lo = np.array([pts2d[:, 0].min() - 0.03, pts2d[:, 1].min() - 0.03, floor_z])
            hi = np.array([pts2d[:, 0].max() + 0.03, pts2d[:, 1].max() + 0.03,
                           floor_z + 0.25])
            ensure(uid, support, "behind", Aabb(lo, hi))

    # reasoner veto on new proposals
    accepted = {p["unknown_id"]: True for p in proposals}
    if proposals:
        from .reasoner import ReasonerRequest

        resp = reasoner.respond(ReasonerRequest("hypothesize_unknown",
                                                {"proposals": proposals}))
        verdicts = resp.result.get("accept")
        if not isinstance(verdicts, list) or len(verdicts) != len(proposals):
            raise SchemaError("hypothesize_unknown: bad accept list")
        accepted = {p["unknown_id"]: bool(v) for p, v in zip(proposals, verdicts)}

    for prop in proposals:
        uid = prop["unknown_id"]
        if not accepted[uid]:
            mem.explored.add(uid.split("::", 1)[0].replace("u_", "") + "::" + prop["parent"])
            continue
        node = SceneNode(
            node_id=uid,
            kind=UNKNOWN,
            attrs=NodeAttributes(name="unknown", movable=False, conf=0.0,
                                 occl=False, view=False, desc="unexplored region"),
            created_step=step,
            region=Aabb.from_jsonable(prop["region"]),
            parent_id=prop["parent"],
            relation_to_parent=prop["relation"],
        )
        graph.nodes[uid] = node
        graph.edges.append(SceneEdge(uid, prop["parent"], prop["relation"],
                                     "geometric", created_step=step))

    # resolve unknowns whose region is now sufficiently observed
    for node in list(graph.unknown_nodes()):
        kind = node.relation_to_parent or "behind"
        if node.node_id.startswith("u_frontier::"):
            cells, _ = _frontier_cells(mem, params)
            cov = 1.0 - sum(1 for c in cells if c not in mem.frontier_seen) / max(len(cells), 1)
            blocker = None
        else:
            probes = _region_probes(node.region, kind)
            cov, blocker = _coverage(probes, camera, intr, mem, params)
        node.coverage = cov
        node.blocker_id = blocker
        if cov >= params.theta_explored:
            parent = node.parent_id
            if node.node_id.startswith("u_inside::") and parent is not None:
                mem.explored.add(f"inside::{parent}")
                mem.container_open[parent] = True
            elif node.node_id.startswith("u_under::") and parent is not None:
                mem.explored.add(f"under::{parent}")
            elif node.node_id.startswith("u_frontier::") and parent is not None:
                mem.explored.add(f"frontier::{parent}")
            elif parent is not None:
                mem.shadow_resolved.setdefault(parent, []).append(node.region.center)
            graph.edges = [e for e in graph.edges
                           if e.src != node.node_id and e.dst != node.node_id]
            del graph.nodes[node.node_id]


# Full update ---------------------------------------------------------------------


def _absorb(node: SceneNode, det, step: int, params: MemoryParams) -> None:
    entry = ObsEntry(
        step=step,
        descriptor=np.asarray(det.descriptor, dtype=float),
        visible_fraction=float(det.visible_fraction),
        frustum_clipped=bool(det.frustum_clipped),
        label=det.observed_label,
        tags=tuple(det.facet_tags),
    )
    replaced = False
    for i, e in enumerate(node.obs_history):
        if e.step == step:
            node.obs_history[i] = entry
            replaced = True
            break
    if not replaced:
        node.obs_history.append(entry)
        node.merged_points = merge_point_sets(node.merged_points,
                                              det.visible_points, params.voxel)
    node.seen_tags.update(det.facet_tags)
    node.source_ids.add(det.source_id)
    node.last_matched_step = step
    node.stale = False


def _prune_stale_points(node: SceneNode, obs: Observation, intr: CameraIntrinsics,
                        params: MemoryParams) -> None:
    """Drop merged points that should be visible now but have no support in
    the current frame (e.g. pre-move voxels, a door face after opening)."""
    pts = node.merged_points
    if len(pts) < 8:
        return
    det_pts = [d.visible_points for d in obs.detections if len(d.visible_points)]
    frame_cloud = np.concatenate(det_pts, axis=0) if det_pts else np.zeros((0, 3))
    in_frustum = frustum_mask(obs.camera, intr, pts)
    if not in_frustum.any():
        return
    free = np.zeros(len(pts), dtype=bool)
    idx = np.nonzero(in_frustum)[0]
    f, _ = ray_free(obs.camera.position, pts[idx], frame_cloud, params.occupancy_voxel)
    free[idx] = f
    own = [d.visible_points for d in obs.detections
           if d.source_id in node.source_ids and len(d.visible_points)]
    if own:
        own_keys = np.sort(voxel_keys(np.concatenate(own, axis=0), 2 * params.voxel))
        supported = _membership(voxel_keys(pts, 2 * params.voxel), own_keys)
    else:
        supported = np.zeros(len(pts), dtype=bool)
    drop = in_frustum & free & ~supported
    if drop.any() and (~drop).sum() >= 4:
        node.merged_points = pts[~drop]


def _vanished(node: SceneNode, obs: Observation, intr: CameraIntrinsics,
              params: MemoryParams) -> bool:
    pts = node.merged_points
    if len(pts) == 0:
        return False
    sample = pts[:: max(1, len(pts) // 24)]
    det_pts = [d.visible_points for d in obs.detections if len(d.visible_points)]
    frame_cloud = np.concatenate(det_pts, axis=0) if det_pts else np.zeros((0, 3))
    vis = frustum_mask(obs.camera, intr, sample)
    free, _ = ray_free(obs.camera.position, sample, frame_cloud, params.occupancy_voxel)
    observable = vis & free
    return float(np.mean(observable)) >= params.theta_explored


def update_memory(
    mem: Memory,
    obs: Observation,
    reasoner,
    intr: Optional[CameraIntrinsics] = None,
    params: Optional[MemoryParams] = None,
) -> Memory:
    """Fold one observation into memory; total and idempotent per step."""
    params = params or MemoryParams()
    intr = intr or CameraIntrinsics()
    step = obs.step

    assignment = match_detections(mem.graph, obs, reasoner, params)
    matched_nodes: list[SceneNode] = []
    created: list[SceneNode] = []
    for i in sorted(assignment):
        det = obs.detections[i]
        nid = assignment[i]
        if nid is None:
            node = SceneNode(
                node_id=f"n{mem.next_node_idx:03d}",
                kind=KNOWN,
                attrs=NodeAttributes(name=det.observed_label),
                created_step=step,
            )
            mem.next_node_idx += 1
            mem.graph.nodes[node.node_id] = node
            created.append(node)
        else:
            node = mem.graph.nodes[nid]
        _absorb(node, det, step, params)
        matched_nodes.append(node)

    for node in matched_nodes:
        _prune_stale_points(node, obs, intr, params)

    touched = [n for n in matched_nodes]
    if touched:
        from .reasoner import ReasonerRequest

        payload = {"nodes": [_attr_entry(n) for n in touched]}
        resp = reasoner.respond(ReasonerRequest("infer_attributes", payload))
        attrs = resp.result.get("attributes")
        if not isinstance(attrs, list) or len(attrs) != len(touched):
            raise SchemaError("infer_attributes: bad attributes list")
        for node, a in zip(touched, attrs):
            node.attrs = _parse_attrs(a)

    matched_ids = {n.node_id for n in matched_nodes}
    for node in mem.graph.known_nodes():
        if node.node_id in matched_ids:
            continue
        if _vanished(node, obs, intr, params):
            node.stale = True
            if node.last_decay_step != step:
                node.attrs.conf *= params.gamma_stale
                node.last_decay_step = step

    prev_keys = {(e.src, e.dst, e.relation) for e in mem.graph.edges}
    edges = infer_relations(mem.graph, obs.camera, mem.history, step=step)
    edges.extend(
        e for e in _under_hints(mem, created, step)
        if (e.src, e.dst, e.relation) not in {(x.src, x.dst, x.relation) for x in edges}
    )
    mem.graph.edges = edges
    new_edges = [e for e in edges if (e.src, e.dst, e.relation) not in prev_keys
                 and e.provenance in ("geometric", "semantic")
                 and mem.graph.nodes[e.src].kind == KNOWN
                 and mem.graph.nodes[e.dst].kind == KNOWN]
    if new_edges:
        from .reasoner import ReasonerRequest

        payload = {
            "edges": [
                {"src": e.src, "dst": e.dst, "relation": e.relation} for e in new_edges
            ]
        }
        resp = reasoner.respond(ReasonerRequest("infer_relations_veto", payload))
        keep = resp.result.get("accept")
        if not isinstance(keep, list) or len(keep) != len(new_edges):
            raise SchemaError("infer_relations_veto: bad accept list")
        vetoed = {
            (e.src, e.dst, e.relation)
            for e, ok in zip(new_edges, keep) if not ok
        }
        if vetoed:
            mem.graph.edges = [
                e for e in mem.graph.edges
                if (e.src, e.dst, e.relation) not in vetoed
            ]

    hypothesize_unknowns(mem, obs.camera, intr, reasoner, params, step=step)
    mem.last_observation = obs
    return mem


# Serialization -------------------------------------------------------------------


def graph_to_jsonable(graph: SceneGraph) -> dict:
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        c = n.centroid()
        nodes.append(
            {
                "node_id": nid,
                "kind": n.kind,
                "name": n.attrs.name,
                "movable": n.attrs.movable,
                "conf": round(float(n.attrs.conf), 6),
                "occl": n.attrs.occl,
                "view": n.attrs.view,
                "desc": n.attrs.desc,
                "n_points": int(len(n.merged_points)),
                "centroid": [round(float(x), 4) for x in c],
                "tags": sorted(n.seen_tags),
                "region": n.region.to_jsonable() if n.region is not None else None,
                "parent": n.parent_id,
            }
        )
    edges = sorted(
        (
            {"src": e.src, "dst": e.dst, "relation": e.relation,
             "provenance": e.provenance}
            for e in graph.edges
        ),
        key=lambda d: (d["src"], d["dst"], d["relation"]),
    )
    return {"nodes": nodes, "edges": edges}


def graph_hash(graph: SceneGraph) -> str:
    blob = json.dumps(graph_to_jsonable(graph), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
