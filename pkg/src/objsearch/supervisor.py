"""Decision loop: observe -> update memory -> decide -> act, per instruction.

The supervisor serializes the agent's knowledge into a Decide request, maps
the reasoner's answer onto a Decision, dispatches it (camera move, primitive,
or retrieval), and records everything into a replayable transcript.  The
whole loop is deterministic for a given scenario seed and reasoner.
"""

from __future__ import annotations

import json
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import active_perception as ap
from . import actions as actions_mod
from . import memory as memory_mod
from .errors import NoFeasibleCandidate, ReasonerError, SchemaError
from .geometry import Aabb
from .memory import (
    ActionRecord,
    Memory,
    MemoryParams,
    _region_probes,
    graph_hash,
    graph_to_jsonable,
    update_memory,
)
from .observation import CameraIntrinsics, CameraPose, NoiseModel, observe
from .reasoner import ReasonerRequest, Reasoner
from .world import ROBOT_BASE, Scenario, WorldState, apply_intervention

ABLATIONS = (None, "fixed_camera", "three_fixed_cameras", "generative_pose",
             "no_memory")

HIGH_LEVEL = {
    "active_perception": "active_perception",
    "open": "interactive_perception",
    "close": "interactive_perception",
    "pick_place": "interactive_perception",
    "rotate": "interactive_perception",
    "retrieve": "manipulation",
}


@dataclass
class Decision:
    target: Optional[str]
    action: str  # one of HIGH_LEVEL keys, or "done"/"fail"
    goal_text: str
    params: dict = field(default_factory=dict)
    declare_done: bool = False
    declare_failure: Optional[str] = None

    @property
    def high_level(self) -> Optional[str]:
        return HIGH_LEVEL.get(self.action)

    def to_jsonable(self) -> dict:
        return {
            "target": self.target,
            "action": self.action,
            "goal_text": self.goal_text,
            "params": _jsonable(self.params),
            "declare_done": self.declare_done,
            "declare_failure": self.declare_failure,
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


@dataclass
class StepRecord:
    step: int
    instruction_index: int
    camera: dict
    n_detections: int
    newly_discovered: list[str]
    memory_hash: str
    graph_diff: dict
    decision: dict
    outcome: dict
    odr: float

    def to_jsonable(self) -> dict:
        return {
            "step": self.step,
            "instruction_index": self.instruction_index,
            "camera": self.camera,
            "n_detections": self.n_detections,
            "newly_discovered": self.newly_discovered,
            "memory_hash": self.memory_hash,
            "graph_diff": self.graph_diff,
            "decision": self.decision,
            "outcome": self.outcome,
            "odr": round(self.odr, 6),
        }


@dataclass
class Transcript:
    scenario_name: str
    category: str
    seed: int
    n_objects: int
    records: list[StepRecord] = field(default_factory=list)
    per_instruction: list[dict] = field(default_factory=list)
    final_status: str = "failure"
    failure_reason: Optional[str] = None
    reasoner_calls: int = 0
    wall_time: float = 0.0  # excluded from serialized bytes (determinism)
    final_graph: Optional[dict] = None
    discovered: list[str] = field(default_factory=list)
    # live objects for metrics; never serialized
    final_world: Optional[WorldState] = None
    final_memory: Optional[Memory] = None

    def odr_series(self) -> list[float]:
        return [r.odr for r in self.records]

    def to_jsonable(self) -> dict:
        return {
            "scenario": {"name": self.scenario_name, "category": self.category,
                         "seed": self.seed},
            "n_objects": self.n_objects,
            "steps": [r.to_jsonable() for r in self.records],
            "per_instruction": self.per_instruction,
            "final_status": self.final_status,
            "failure_reason": self.failure_reason,
            "reasoner_calls": self.reasoner_calls,
            "final_graph": self.final_graph,
            "discovered": sorted(self.discovered),
        }


def save_transcript(t: Transcript, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(t.to_jsonable(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class CountingReasoner(Reasoner):
    """Pass-through wrapper that counts respond() calls."""

    def __init__(self, inner: Reasoner):
        self.inner = inner
        self.calls = 0

    @property
    def wants_rasters(self) -> bool:  # type: ignore[override]
        return self.inner.wants_rasters

    def respond(self, req: ReasonerRequest):
        self.calls += 1
        return self.inner.respond(req)


# Decide -------------------------------------------------------------------------


def _node_entry(mem: Memory, node, last_step: int, reach: float) -> dict:
    aabb = None
    if len(node.merged_points):
        aabb = Aabb.from_points(node.merged_points).to_jsonable()
    inside_closed = False
    parent_container = None
    on_top_blockers = []
    for e in mem.graph.edges:
        if e.src == node.node_id and e.relation == "inside":
            if mem.believed_closed(e.dst):
                inside_closed = True
                parent_container = e.dst
            elif parent_container is None:
                parent_container = e.dst
        if e.dst == node.node_id and e.relation == "on":
            on_top_blockers.append(e.src)
    seen_well = any(e.visible_fraction >= 0.3 for e in node.obs_history)
    c = node.centroid()
    return {
        "node_id": node.node_id,
        "kind": node.kind,
        "name": node.attrs.name,
        "desc": node.attrs.desc,
        "tags": sorted(node.seen_tags),
        "movable": node.attrs.movable,
        "conf": float(node.attrs.conf),
        "occl": node.attrs.occl,
        "view": node.attrs.view,
        "centroid": [float(x) for x in c],
        "aabb": aabb,
        "detected_last": node.last_matched_step == last_step,
        "seen_well": seen_well,
        "inside_closed": inside_closed,
        "parent_container": parent_container,
        "on_top_blockers": sorted(on_top_blockers),
        "reachable": float(np.linalg.norm(c - ROBOT_BASE)) <= reach - 0.02,
        "believed_open": mem.container_open.get(node.node_id, False),
        "source_ids": sorted(node.source_ids),
    }


def build_decide_payload(
    instruction: str,
    instruction_index: int,
    mem: Memory,
    goal_region: Aabb,
    max_steps: int,
    reach: float = actions_mod.REACH_RADIUS,
) -> dict:
    last_step = mem.last_observation.step if mem.last_observation else -1
    nodes = [
        _node_entry(mem, n, last_step, reach)
        for n in mem.graph.known_nodes()
    ]
    by_id = {n["node_id"]: n for n in nodes}
    unknowns = []
    for u in mem.graph.unknown_nodes():
        parent = by_id.get(u.parent_id, {})
        unknowns.append(
            {
                "unknown_id": u.node_id,
                "parent": u.parent_id,
                "relation": u.relation_to_parent,
                "region": u.region.to_jsonable() if u.region is not None else None,
                "volume": float(u.region.volume) if u.region is not None else 0.0,
                "coverage": float(u.coverage),
                "blocker_id": u.blocker_id,
                "parent_name": parent.get("name", ""),
                "parent_tags": parent.get("tags", []),
                "parent_believed_closed": mem.believed_closed(u.parent_id)
                if u.parent_id else False,
            }
        )
    history = [
        {
            "step": r.step,
            "target": r.target,
            "action": r.action,
            "goal_text": r.goal_text,
            "success": bool(r.outcome.get("success")),
            "reason": r.outcome.get("reason", ""),
        }
        for r in mem.history[-12:]
    ]
    failed_destinations = [
        r.outcome["destination"]
        for r in mem.history
        if r.action == "pick_place" and not r.outcome.get("success")
        and r.outcome.get("destination")
    ]
    support = memory_mod._support_node(mem)
    table_aabb = None
    if support is not None:
        table_aabb = Aabb.from_points(support.merged_points).to_jsonable()
    known_sources = sorted({s for n in mem.graph.known_nodes() for s in n.source_ids})
    return {
        "instruction": instruction,
        "instruction_index": instruction_index,
        "goal_region": goal_region.to_jsonable(),
        "reach_radius": reach,
        "base": [float(x) for x in ROBOT_BASE],
        "nodes": nodes,
        "unknowns": unknowns,
        "history": history,
        "failed_destinations": failed_destinations,
        "table_aabb": table_aabb,
        "known_sources": known_sources,
        "max_steps": max_steps,
    }


def decide(
    instruction: str,
    mem: Memory,
    reasoner,
    *,
    instruction_index: int = 0,
    goal_region: Optional[Aabb] = None,
    max_steps: int = 30,
) -> Decision:
    """One supervisor decision: target object, high-level action, goal text."""
    goal_region = goal_region if goal_region is not None else Aabb(
        np.zeros(3), np.ones(3))
    payload = build_decide_payload(instruction, instruction_index, mem,
                                   goal_region, max_steps)
    resp = reasoner.respond(ReasonerRequest("decide", payload))
    result = resp.result
    action = result.get("action")
    if action == "fail":
        return Decision(target=None, action="fail", goal_text="",
                        declare_failure=str(result.get("reason", "unspecified")))
    if action == "done":
        return Decision(target=None, action="done",
                        goal_text=str(result.get("goal_text", "")),
                        declare_done=True)
    if action not in HIGH_LEVEL:
        raise SchemaError(f"decide: unknown action {action!r}")
    target = result.get("target")
    if target not in mem.graph.nodes:
        raise SchemaError(f"decide: target {target!r} not in memory graph")
    return Decision(
        target=target,
        action=action,
        goal_text=str(result.get("goal_text", "")),
        params=result.get("params", {}) or {},
    )


# Episode running ------------------------------------------------------------------


def _observe_seed(scenario_seed: int, step: int, cam_idx: int = 0) -> int:
    return (scenario_seed * 1_000_003 + step * 97 + cam_idx) & 0x7FFFFFFF


def _three_fixed_poses(world: WorldState) -> list[CameraPose]:
    support = None
    best = -1.0
    for obj in world.objects.values():
        if obj.movable:
            continue
        box = obj.aabb()
        area = float((box.hi[0] - box.lo[0]) * (box.hi[1] - box.lo[1]))
        if area > best:
            best, support = area, box
    if support is None:
        support = Aabb(np.array([0.0, -0.4, 0.0]), np.array([1.0, 0.4, 0.4]))
    c = support.center
    top = float(support.hi[2])
    look = np.array([c[0], c[1], top])
    return [
        CameraPose.look_at([c[0], support.lo[1] - 0.35, top + 0.5], look),
        CameraPose.look_at([support.lo[0] - 0.35, c[1], top + 0.5], look),
        CameraPose.look_at([support.hi[0] + 0.35, c[1], top + 0.5], look),
    ]


def _generative_pose(world: WorldState, step: int) -> CameraPose:
    # ungrounded proposal: a pseudo-random hop, deliberately scene-blind
    rng = np.random.default_rng(step)
    direction = rng.normal(size=3)
    direction[2] = abs(direction[2]) * 0.3
    direction /= max(np.linalg.norm(direction), 1e-9)
    pos = world.camera.position + 0.3 * direction
    return CameraPose(pos, world.camera.forward.copy(), world.camera.up.copy())


def _camera_feasible(world: WorldState, pose: CameraPose) -> bool:
    if pose.position[2] < world.support_top() + 0.01:
        return False
    for obj in world.objects.values():
        if bool(obj.aabb().contains(pose.position[None, :], margin=0.01)[0]):
            return False
    return True


def _dispatch_active_perception(
    world: WorldState,
    mem: Memory,
    decision: Decision,
    reasoner,
    intr: CameraIntrinsics,
    ablation: Optional[str],
    raster_dir,
    instruction_index: int,
) -> dict:
    if ablation in ("fixed_camera", "three_fixed_cameras"):
        return {"success": True, "reason": "ablated_noop"}
    if ablation == "generative_pose":
        pose = _generative_pose(world, world.step)
        if _camera_feasible(world, pose):
            world.camera = pose
            return {"success": True, "reason": "ok", "moved_camera": True}
        return {"success": False, "reason": "no_feasible_pose"}

    node = mem.graph.nodes[decision.target]
    if node.kind == memory_mod.UNKNOWN and node.region is not None:
        probes = _region_probes(node.region, node.relation_to_parent or "behind")
        target_points = node.region.grid((3, 3, 3))
    else:
        target_points = node.merged_points
        probes = Aabb.from_points(node.merged_points).inflate(0.05).grid((3, 3, 3))
    obstacles = [world.objects[o].aabb() for o in world.object_ids()]
    floor_z = world.support_top()
    try:
        sphere = ap.build_sphere(target_points, intr, world.camera)
        dirs = ap.sample_directions(sphere, world.camera, ap.PerceptionParams().n_directions,
                                    obstacles, floor_z)
        known_sources = sorted({s for n in mem.graph.known_nodes()
                                for s in n.source_ids})
        cloud, _ = mem.cloud()
        selected = ap.select_view(
            dirs, decision.goal_text, mem, cloud, reasoner,
            sphere=sphere, current=world.camera, intr=intr, probes=probes,
            obstacles=obstacles, floor_z=floor_z, raster_dir=raster_dir,
            instruction_index=instruction_index, known_sources=known_sources,
        )
    except NoFeasibleCandidate:
        return {"success": False, "reason": "no_feasible_pose"}
    if not _camera_feasible(world, selected.pose):
        return {"success": False, "reason": "no_feasible_pose"}
    world.camera = selected.pose
    return {
        "success": True,
        "reason": "ok",
        "moved_camera": True,
        "look_closer": selected.look_closer,
    }


def run_episode(
    scenario: Scenario,
    reasoner,
    intr: Optional[CameraIntrinsics] = None,
    noise: Optional[NoiseModel] = None,
    ablation: Optional[str] = None,
) -> Transcript:
    """Run all instructions of a scenario to completion or budget.

    Failures never raise; they land in the transcript status.  Memory and the
    discovered-object set persist across instructions (unless the no-memory
    ablation is active).
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    intr = intr or CameraIntrinsics()
    noise = noise or NoiseModel()
    t0 = time.perf_counter()

    world = scenario.initial_world.copy()
    counting = CountingReasoner(reasoner)
    if hasattr(reasoner, "bind_episode"):
        reasoner.bind_episode(world, scenario, intr)
    raster_dir = None
    if counting.wants_rasters:
        raster_dir = tempfile.mkdtemp(prefix="objsearch_rasters_")

    mem = Memory()
    mparams = MemoryParams()
    discovered: set[str] = set()
    n_objects = len(world.objects)
    transcript = Transcript(
        scenario_name=scenario.name,
        category=scenario.category,
        seed=scenario.seed,
        n_objects=n_objects,
    )
    pending = sorted(scenario.interventions, key=lambda ts: ts[0])
    fixed_cams = _three_fixed_poses(world) if ablation == "three_fixed_cameras" else None

    global_step = 0
    prev_graph_json: dict = {"nodes": [], "edges": []}
    episode_failed = False

    for instr_idx, instruction in enumerate(scenario.instructions):
        if episode_failed:
            transcript.per_instruction.append(
                {"status": "not_attempted", "steps": 0})
            continue
        status: Optional[str] = None
        reason: Optional[str] = None
        steps_used = 0

        while steps_used < scenario.budgets.max_steps:
            if counting.calls >= scenario.budgets.max_reasoner_calls:
                status, reason = "budget_exhausted", "reasoner_calls"
                break
            world.step = global_step
            if ablation == "no_memory":
                mem = Memory()

            try:
                if fixed_cams is not None:
                    for ci, cam in enumerate(fixed_cams):
                        obs = observe(world, cam, intr, noise,
                                      _observe_seed(scenario.seed, global_step, ci))
                        update_memory(mem, obs, counting, intr, mparams)
                        discovered.update(d.source_id for d in obs.detections)
                else:
                    obs = observe(world, world.camera, intr, noise,
                                  _observe_seed(scenario.seed, global_step))
                    update_memory(mem, obs, counting, intr, mparams)
                    discovered.update(d.source_id for d in obs.detections)

                decision = decide(
                    instruction, mem, counting,
                    instruction_index=instr_idx,
                    goal_region=world.goal_region,
                    max_steps=scenario.budgets.max_steps,
                )
            except ReasonerError as exc:
                status, reason = "failure", f"reasoner_error:{type(exc).__name__}"
                break

            outcome: dict
            if decision.action == "fail":
                status, reason = "failure", decision.declare_failure
                outcome = {"success": False, "reason": "declared_failure"}
            elif decision.action == "done":
                target_obj = scenario.target_ids[instr_idx]
                ok = target_obj in world.objects and bool(
                    world.goal_region.contains(
                        world.objects[target_obj].center[None, :])[0])
                status = "success" if ok else "failure"
                reason = None if ok else "wrong_done_claim"
                outcome = {"success": ok, "reason": "done_declared"}
            elif decision.action == "active_perception":
                try:
                    outcome = _dispatch_active_perception(
                        world, mem, decision, counting, intr, ablation,
                        raster_dir, instr_idx)
                except ReasonerError as exc:
                    status = "failure"
                    reason = f"reasoner_error:{type(exc).__name__}"
                    outcome = {"success": False, "reason": "reasoner_error"}
            else:
                node = mem.graph.nodes.get(decision.target)
                oid = actions_mod.bind_node_to_object(world, node) if node else None
                if oid is None:
                    outcome = {"success": False, "reason": actions_mod.NOT_OBSERVED}
                else:
                    prim = actions_mod.Primitive(
                        kind=decision.action,
                        node_id=decision.target,
                        object_id=oid,
                        destination=np.asarray(decision.params["destination"])
                        if decision.params.get("destination") else None,
                        angle=decision.params.get("angle"),
                        goal_region=Aabb.from_jsonable(decision.params["goal_region"])
                        if decision.params.get("goal_region") else None,
                    )
                    world, act_outcome = actions_mod.execute_primitive(
                        world, prim, mem, intr)
                    outcome = act_outcome.to_jsonable()
                    outcome.update({k: _jsonable(v) for k, v in
                                    act_outcome.world_delta.items()})
                    if decision.params.get("destination") is not None:
                        outcome.setdefault(
                            "destination",
                            _jsonable(decision.params["destination"]))
                    if decision.action == "retrieve" and act_outcome.success:
                        target_obj = scenario.target_ids[instr_idx]
                        ok = target_obj in world.objects and bool(
                            world.goal_region.contains(
                                world.objects[target_obj].center[None, :])[0])
                        status = "success" if ok else "failure"
                        reason = None if ok else "wrong_object"

            graph_json = graph_to_jsonable(mem.graph)
            record = StepRecord(
                step=global_step,
                instruction_index=instr_idx,
                camera=world.camera.to_jsonable(),
                n_detections=len(obs.detections),
                newly_discovered=sorted(
                    set(d.source_id for d in obs.detections) - set(
                        transcript.discovered)),
                memory_hash=graph_hash(mem.graph),
                graph_diff=_graph_diff(prev_graph_json, graph_json),
                decision=decision.to_jsonable(),
                outcome=_jsonable(outcome),
                odr=len(discovered) / max(n_objects, 1),
            )
            prev_graph_json = graph_json
            transcript.discovered = sorted(discovered)
            transcript.records.append(record)
            mem.note_action(ActionRecord(
                step=global_step,
                target=decision.target,
                action=decision.action,
                goal_text=decision.goal_text,
                outcome=_jsonable(outcome),
            ))

            while pending and pending[0][0] == global_step:
                _, script = pending.pop(0)
                try:
                    apply_intervention(world, script)
                except Exception:
                    pass
                else:
                    if script.kind == "remove_object":
                        n_objects = len(world.objects)
            global_step += 1
            steps_used += 1
            if status is not None:
                break

        if status is None:
            status, reason = "budget_exhausted", "max_steps"
        transcript.per_instruction.append({"status": status, "steps": steps_used})
        if status != "success":
            episode_failed = True
            transcript.failure_reason = reason

    transcript.final_status = (
        "success"
        if transcript.per_instruction
        and all(p["status"] == "success" for p in transcript.per_instruction)
        else ("budget_exhausted"
              if any(p["status"] == "budget_exhausted"
                     for p in transcript.per_instruction)
              else "failure")
    )
    transcript.reasoner_calls = counting.calls
    transcript.final_graph = graph_to_jsonable(mem.graph)
    transcript.final_world = world
    transcript.final_memory = mem
    transcript.wall_time = time.perf_counter() - t0
    return transcript


def _graph_diff(prev: dict, cur: dict) -> dict:
    prev_nodes = {n["node_id"]: n for n in prev["nodes"]}
    cur_nodes = {n["node_id"]: n for n in cur["nodes"]}
    prev_edges = {(e["src"], e["dst"], e["relation"]) for e in prev["edges"]}
    cur_edges = {(e["src"], e["dst"], e["relation"]) for e in cur["edges"]}
    renamed = sorted(
        nid for nid in prev_nodes.keys() & cur_nodes.keys()
        if prev_nodes[nid]["name"] != cur_nodes[nid]["name"]
    )
    return {
        "nodes_added": sorted(cur_nodes.keys() - prev_nodes.keys()),
        "nodes_removed": sorted(prev_nodes.keys() - cur_nodes.keys()),
        "nodes_renamed": renamed,
        "edges_added": sorted(map(list, cur_edges - prev_edges)),
        "edges_removed": sorted(map(list, prev_edges - cur_edges)),
    }
