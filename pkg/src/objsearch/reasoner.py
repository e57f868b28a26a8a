"""Pluggable decision backends.

Three implementations of one typed request/response interface:

* ``HeuristicReasoner`` - deterministic rules, a pure function of the request.
* ``OracleReasoner`` - harness-only; reads the ground-truth world bound to it
  at episode start and answers ideally.  Agent modules never construct it.
* ``ExternalReasoner`` - newline-delimited JSON over a child process's
  stdin/stdout, for plugging in an actual model.

Tie-breaking is lowest-index everywhere so episodes replay bit-identically.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import vocab
from .errors import OutOfRange, ProtocolError, SchemaError
from .geometry import Aabb

VARIANTS = (
    "match_instances",
    "infer_attributes",
    "infer_relations_veto",
    "hypothesize_unknown",
    "select_direction",
    "select_pose",
    "decide",
)


@dataclass
class ReasonerRequest:
    variant: str
    payload: dict

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise SchemaError(f"unknown request variant {self.variant!r}")


@dataclass
class ReasonerResponse:
    result: dict


class Reasoner:
    """Interface: one synchronous respond() per request."""

    wants_rasters = False

    def respond(self, req: ReasonerRequest) -> ReasonerResponse:
        raise NotImplementedError

    def close(self) -> None:
        pass


# Shared helpers -----------------------------------------------------------------


def attributes_from_history(history: list[dict], tags: list[str],
                            theta_full: float = 0.6) -> dict:
    """Default attribute rules over a serialized observation history."""
    counts: dict[str, int] = {}
    for e in history:
        counts[e["label"]] = counts.get(e["label"], 0) + 1
    name, n = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    conf = n / len(history)
    occl = all(
        e["visible_fraction"] < theta_full and not e["frustum_clipped"]
        for e in history
    )
    view = all(e["frustum_clipped"] for e in history)
    movable = True
    for tok in vocab.tokens(name):
        if tok in vocab.OBJECT_CATALOG:
            movable = vocab.OBJECT_CATALOG[tok][1]
            break
    desc = f"a {name}, seen {len(history)}x"
    if tags:
        desc += ", labeled " + "/".join(sorted(tags))
    if occl:
        desc += ", always partly occluded"
    if view:
        desc += ", never fully in frame"
    return {"name": name, "movable": movable, "conf": conf, "occl": occl,
            "view": view, "desc": desc}


def assignment_costs(payload: dict) -> np.ndarray:
    dets = payload["detections"]
    nodes = payload["nodes"]
    lam = payload["params"]["lam"]
    cost = np.zeros((len(dets), len(nodes)))
    for i, det in enumerate(dets):
        d_desc = np.asarray(det["descriptor"], dtype=float)
        d_cen = np.asarray(det["centroid"], dtype=float)
        for j, node in enumerate(nodes):
            n_desc = np.asarray(node["descriptor"], dtype=float)
            n_cen = np.asarray(node["centroid"], dtype=float)
            cost[i, j] = float(
                np.linalg.norm(d_desc - n_desc) + lam * np.linalg.norm(d_cen - n_cen)
            )
    return cost


def solve_assignment(payload: dict) -> list[Optional[str]]:
    """Min-cost detection->node assignment with a per-detection New option."""
    dets = payload["detections"]
    nodes = payload["nodes"]
    theta = payload["params"]["theta_match"]
    exact_limit = payload["params"].get("exact_limit", 10)
    if not dets:
        return []
    if not nodes:
        return [None] * len(dets)
    cost = assignment_costs(payload)
    n_det, n_nodes = cost.shape
    if n_det <= exact_limit:
        from scipy.optimize import linear_sum_assignment

        big = 1e9
        padded = np.full((n_det, n_nodes + n_det), big)
        padded[:, :n_nodes] = cost
        for i in range(n_det):
            padded[i, n_nodes + i] = theta
        rows, cols = linear_sum_assignment(padded)
        out: list[Optional[str]] = [None] * n_det
        for r, c in zip(rows, cols):
            if c < n_nodes:
                out[r] = nodes[c]["node_id"]
        return out
    # greedy beyond the exact-solve size
    pairs = sorted(
        (float(cost[i, j]), i, j) for i in range(n_det) for j in range(n_nodes)
    )
    out = [None] * n_det
    used_i: set[int] = set()
    used_j: set[int] = set()
    for c, i, j in pairs:
        if c > theta or i in used_i or j in used_j:
            continue
        out[i] = nodes[j]["node_id"]
        used_i.add(i)
        used_j.add(j)
    return out


def propose_destination(payload: dict, moving: str) -> Optional[list[float]]:
    """First free tabletop spot for a pick-and-place, scanning a fixed grid."""
    table = payload.get("table_aabb")
    if table is None:
        return None
    box = Aabb.from_jsonable(table)
    goal = Aabb.from_jsonable(payload["goal_region"])
    reach = payload.get("reach_radius", 0.9)
    footprints = []
    for node in payload["nodes"]:
        if node["node_id"] == moving or node.get("aabb") is None:
            continue
        footprints.append(Aabb.from_jsonable(node["aabb"]))
    avoid = [np.asarray(p, dtype=float) for p in payload.get("failed_destinations", [])]
    mover_aabb = next(
        (n.get("aabb") for n in payload["nodes"] if n["node_id"] == moving), None
    )
    half = Aabb.from_jsonable(mover_aabb).half if mover_aabb else np.array([0.04, 0.04, 0.04])
    top = float(box.hi[2])
    xs = np.arange(box.lo[0] + 0.08, box.hi[0] - 0.08, 0.08)
    ys = np.arange(box.lo[1] + 0.08, box.hi[1] - 0.08, 0.08)
    for x in xs:
        for y in ys:
            if float(np.hypot(x, y)) > reach - 0.05:
                continue
            spot = Aabb(
                np.array([x - half[0], y - half[1], top]),
                np.array([x + half[0], y + half[1], top + 2 * half[2]]),
            )
            if goal.intersects(spot, margin=0.02):
                continue
            if any(fp.intersects(spot, margin=0.02) for fp in footprints):
                continue
            if any(np.hypot(x - a[0], y - a[1]) < 0.06 for a in avoid):
                continue
            return [float(x), float(y), top + float(half[2]), 0.0, 0.0, 0.0]
    return None


# Heuristic ------------------------------------------------------------------------


def _match_scores(nodes: list[dict], instruction: str):
    """Candidate scoring: exact nodes fully name-match the instruction;
    ambiguous ones share tokens; refined-but-contradicting names are
    excluded."""
    instr = vocab.content_tokens(instruction)
    exact, partial = [], []
    for node in nodes:
        if node["kind"] != "known":
            continue
        name_toks = vocab.tokens(node["name"])
        tag_toks = set()
        for t in node.get("tags", []):
            tag_toks |= vocab.tokens(t)
        overlap = (name_toks | tag_toks) & instr
        if not overlap:
            continue
        if name_toks <= instr | tag_toks and len(name_toks & instr) == len(name_toks):
            exact.append(node)
        elif len(name_toks) > 1 and not name_toks <= instr:
            continue  # identified as something else
        else:
            partial.append(node)
    return exact, partial


def _history_counts(history: list[dict], action: str, target: str) -> int:
    return sum(1 for h in history
               if h["action"] == action and h["target"] == target and h["success"])


def _recent_failure(history: list[dict], action: str, target: str,
                    window: int = 2) -> Optional[str]:
    for h in history[-window:]:
        if h["action"] == action and h["target"] == target and not h["success"]:
            return h.get("reason")
    return None


def _dithering(history: list[dict], action: str, target: str, goal: str) -> bool:
    opposite = {"open": "close", "close": "open"}.get(action)
    if opposite is None:
        return False
    return any(
        h["action"] == opposite and h["target"] == target
        and h["goal_text"] == goal and h["success"]
        for h in history[-2:]
    )


class HeuristicReasoner(Reasoner):
    """Deterministic default rules; no state, no ground truth."""

    def respond(self, req: ReasonerRequest) -> ReasonerResponse:
        handler = getattr(self, "_" + req.variant)
        return ReasonerResponse(handler(req.payload))

    def _match_instances(self, p: dict) -> dict:
        return {"assignment": solve_assignment(p)}

    def _infer_attributes(self, p: dict) -> dict:
        return {
            "attributes": [
                attributes_from_history(n["history"], n["tags"]) for n in p["nodes"]
            ]
        }

    def _infer_relations_veto(self, p: dict) -> dict:
        return {"accept": [True] * len(p["edges"])}

    def _hypothesize_unknown(self, p: dict) -> dict:
        return {"accept": [True] * len(p["proposals"])}

    def _select_direction(self, p: dict) -> dict:
        scores = [c["summary"] for c in p["candidates"]]
        return {"index": int(np.argmax(scores))}

    def _select_pose(self, p: dict) -> dict:
        scores = [c["summary"] for c in p["candidates"]]
        if max(scores) <= 0.0 and p.get("allow_look_closer", True):
            return {"look_closer": True}
        return {"index": int(np.argmax(scores))}

    def _decide(self, p: dict) -> dict:
        nodes = p["nodes"]
        by_id = {n["node_id"]: n for n in nodes}
        history = p["history"]
        instruction = p["instruction"]
        exact, partial = _match_scores(nodes, instruction)

        def act(target, action, goal, params=None):
            return {"target": target, "action": action, "goal_text": goal,
                    "params": params or {}}

        # (1) a confirmed target that can simply be fetched or unblocked
        if len(exact) >= 1:
            node = sorted(exact, key=lambda n: n["node_id"])[0]
            nid = node["node_id"]
            goal = f"retrieve the {node['name']}"
            blockers = [b for b in node.get("on_top_blockers", [])
                        if by_id.get(b, {}).get("movable")]
            if node.get("inside_closed") and node.get("parent_container"):
                parent = node["parent_container"]
                if _recent_failure(history, "open", parent) == "not_observed":
                    return act(parent, "active_perception",
                               f"get a clear view of the {by_id[parent]['name']}")
                if not _dithering(history, "open", parent, goal):
                    return act(parent, "open",
                               f"open the {by_id[parent]['name']} to reach the {node['name']}")
            if blockers:
                blocker = sorted(blockers)[0]
                dest = propose_destination(p, blocker)
                if dest is not None:
                    return act(blocker, "pick_place",
                               f"move the {by_id[blocker]['name']} off the {node['name']}",
                               {"destination": dest})
            if node.get("detected_last") and node.get("reachable", True):
                return act(nid, "retrieve", goal, {"goal_region": p["goal_region"]})
            return act(nid, "active_perception", f"find the {node['name']} again")

        # (2) several same-class candidates: reveal discriminative facets
        if len(partial) >= 2:
            for node in sorted(partial, key=lambda n: n["node_id"]):
                if not node["movable"] or not node.get("detected_last"):
                    continue
                if _history_counts(history, "rotate", node["node_id"]) >= 2:
                    continue
                return act(node["node_id"], "rotate",
                           f"turn the {node['name']} to check its hidden side",
                           {"angle": float(np.pi)})
        if len(partial) == 1:
            node = partial[0]
            blockers = [b for b in node.get("on_top_blockers", [])
                        if by_id.get(b, {}).get("movable")]
            if node.get("inside_closed") and node.get("parent_container"):
                parent = node["parent_container"]
                if not _dithering(history, "open", parent, "inspect"):
                    return act(parent, "open",
                               f"open the {by_id[parent]['name']}")
            if blockers:
                blocker = sorted(blockers)[0]
                dest = propose_destination(p, blocker)
                if dest is not None:
                    return act(blocker, "pick_place",
                               f"uncover the {node['name']}", {"destination": dest})
            if node.get("detected_last") and node.get("reachable", True):
                return act(node["node_id"], "retrieve",
                           f"retrieve the {node['name']}",
                           {"goal_region": p["goal_region"]})
            return act(node["node_id"], "active_perception",
                       f"look for the {node['name']}")

        # (3) explore the most promising Unknown region
        unknowns = p["unknowns"]
        if unknowns:
            def prio(u):
                sem = vocab.semantic_overlap(
                    " ".join(u.get("parent_tags", []) or []), instruction
                )
                return (-sem, -u["volume"], u["unknown_id"])

            for u in sorted(unknowns, key=prio):
                parent = u["parent"]
                pname = by_id.get(parent, {}).get("name", "region")
                if (
                    u.get("parent_believed_closed")
                    and by_id.get(parent, {}).get("seen_well")
                    and _recent_failure(history, "open", parent) is None
                    and not _dithering(history, "open", parent, "search")
                ):
                    return act(parent, "open", f"open the {pname} and search inside")
                blocker = u.get("blocker_id")
                if (
                    blocker
                    and by_id.get(blocker, {}).get("movable")
                    and not u.get("parent_believed_closed")
                    and _recent_failure(history, "pick_place", blocker) is None
                ):
                    dest = propose_destination(p, blocker)
                    if dest is not None:
                        return act(blocker, "pick_place",
                                   f"move the {by_id[blocker]['name']} blocking the view",
                                   {"destination": dest})
                return act(u["unknown_id"], "active_perception",
                           f"inspect the unexplored area near the {pname}")

        return {"target": None, "action": "fail", "goal_text": "",
                "params": {}, "reason": "exhausted"}


# Oracle ---------------------------------------------------------------------------


class OracleReasoner(Reasoner):
    """Ideal answers from ground truth; harness-injected, never agent-built.

    ``bind_episode`` is the quarantine boundary: only the episode runner holds
    the live world and hands it over here.
    """

    def __init__(self) -> None:
        self._world = None
        self._scenario = None
        self._intr = None
        self._fallback = HeuristicReasoner()

    def bind_episode(self, world, scenario, intr) -> None:
        self._world = world
        self._scenario = scenario
        self._intr = intr

    def respond(self, req: ReasonerRequest) -> ReasonerResponse:
        if self._world is None:
            return self._fallback.respond(req)
        handler = getattr(self, "_" + req.variant, None)
        if handler is None:
            return self._fallback.respond(req)
        return ReasonerResponse(handler(req.payload))

    def _match_instances(self, p: dict) -> dict:
        out: list[Optional[str]] = []
        used: set[str] = set()
        by_source: dict[str, str] = {}
        for node in p["nodes"]:
            for sid in node["source_ids"]:
                by_source.setdefault(sid, node["node_id"])
        for det in p["detections"]:
            nid = by_source.get(det["source_id"])
            if nid is not None and nid not in used:
                out.append(nid)
                used.add(nid)
            else:
                out.append(None)
        return {"assignment": out}

    def _infer_attributes(self, p: dict) -> dict:
        attrs = []
        for entry in p["nodes"]:
            base = attributes_from_history(entry["history"], entry["tags"])
            sources = entry.get("source_ids") or []
            obj = self._world.objects.get(sources[0]) if sources else None
            if obj is not None:
                base["name"] = obj.fine_label if entry["tags"] else obj.class_label
                base["movable"] = obj.movable
                base["conf"] = 1.0
            attrs.append(base)
        return {"attributes": attrs}

    def _hypothesize_unknown(self, p: dict) -> dict:
        known = set(p.get("known_sources", []))
        accept = []
        for prop in p["proposals"]:
            region = Aabb.from_jsonable(prop["region"])
            has_content = any(
                oid not in known and bool(region.inflate(0.02).contains(
                    obj.center[None, :])[0])
                for oid, obj in self._world.objects.items()
            )
            accept.append(has_content)
        return {"accept": accept}

    def _score_pose(self, cand: dict, known: set[str], target_id: Optional[str]) -> float:
        from .observation import CameraPose, NoiseModel, observe

        pose = CameraPose.from_jsonable(cand["pose"])
        obs = observe(self._world, pose, self._intr, NoiseModel(), rng_seed=0)
        fresh = {d.source_id for d in obs.detections} - known
        score = float(len(fresh))
        if target_id is not None and any(
            d.source_id == target_id for d in obs.detections
        ):
            score += 5.0
        return score

    def _select(self, p: dict) -> dict:
        known = set(p.get("known_sources", []))
        target_id = None
        idx = p.get("instruction_index")
        if idx is not None and self._scenario is not None:
            target_id = self._scenario.target_ids[idx]
        scores = [self._score_pose(c, known, target_id) for c in p["candidates"]]
        best = int(np.argmax(scores))
        if max(scores) <= 0.0:
            summaries = [c["summary"] for c in p["candidates"]]
            best = int(np.argmax(summaries))
        return {"index": best}

    _select_direction = _select
    _select_pose = _select

    def _decide(self, p: dict) -> dict:
        world = self._world
        target_id = self._scenario.target_ids[p["instruction_index"]]
        nodes = p["nodes"]
        by_id = {n["node_id"]: n for n in nodes}
        history = p["history"]
        node_of: dict[str, str] = {}
        for n in nodes:
            for sid in n.get("source_ids", []):
                node_of.setdefault(sid, n["node_id"])

        def act(target, action, goal, params=None):
            return {"target": target, "action": action, "goal_text": goal,
                    "params": params or {}}

        if target_id not in world.objects:
            return {"target": None, "action": "fail", "goal_text": "",
                    "params": {}, "reason": "target_removed"}

        # enclosing closed container, if any (truth)
        enclosing = None
        cid = world.inside_of.get(target_id)
        if cid is not None and world.containers[cid].state == "closed":
            enclosing = cid
        on_top = sorted(o for o, s in world.on_top_of.items() if s == target_id)

        target_node = node_of.get(target_id)
        steps_used = len(history)
        budget = p.get("max_steps", 30)
        sweep = steps_used < 0.6 * budget

        # keep discovering while cheap: explore unknowns that really hide
        # something undiscovered (drives the discovery-rate metric)
        if sweep:
            known_sources = set(node_of)
            content_unknowns = []
            for u in p["unknowns"]:
                region = Aabb.from_jsonable(u["region"])
                hidden = [
                    oid for oid, obj in world.objects.items()
                    if oid not in known_sources
                    and bool(region.inflate(0.02).contains(obj.center[None, :])[0])
                ]
                if hidden:
                    content_unknowns.append((target_id in hidden, u["volume"], u))
            if content_unknowns:
                content_unknowns.sort(key=lambda t: (-t[0], -t[1], t[2]["unknown_id"]))
                u = content_unknowns[0][2]
                parent = u["parent"]
                bound = self._bind(parent, by_id)
                if (
                    u.get("parent_believed_closed")
                    and by_id.get(parent, {}).get("seen_well")
                    and bound is not None and bound in world.containers
                    and _recent_failure(history, "open", parent) is None
                ):
                    return act(parent, "open",
                               f"open the {by_id[parent]['name']} and look inside")
                blocker = u.get("blocker_id")
                if (
                    blocker and by_id.get(blocker, {}).get("movable")
                    and not u.get("parent_believed_closed")
                    and _recent_failure(history, "pick_place", blocker) is None
                ):
                    dest = propose_destination(p, blocker)
                    if dest is not None:
                        return act(blocker, "pick_place", "clear the hidden area",
                                   {"destination": dest})
                return act(u["unknown_id"], "active_perception",
                           "survey the unexplored area")

        if target_node is not None and enclosing is None and not on_top:
            node = by_id[target_node]
            if node.get("detected_last"):
                return act(target_node, "retrieve",
                           f"retrieve the {node['name']}",
                           {"goal_region": p["goal_region"]})
            return act(target_node, "active_perception",
                       f"re-acquire the {node['name']}")

        if enclosing is not None:
            cont_node = node_of.get(enclosing)
            if cont_node is not None:
                if by_id[cont_node].get("seen_well") and \
                        _recent_failure(history, "open", cont_node) is None:
                    return act(cont_node, "open",
                               f"open the {by_id[cont_node]['name']}")
                return act(cont_node, "active_perception",
                           f"approach the {by_id[cont_node]['name']}")

        if on_top:
            blocker_node = node_of.get(on_top[0])
            if blocker_node is not None:
                dest = propose_destination(p, blocker_node)
                if dest is not None:
                    return act(blocker_node, "pick_place", "uncover the target",
                               {"destination": dest})

        # nothing known yet: look where the target actually is
        tpos = world.objects[target_id].center
        best_u, best_d = None, float("inf")
        for u in p["unknowns"]:
            region = Aabb.from_jsonable(u["region"])
            d = float(np.linalg.norm(region.center - tpos))
            if bool(region.inflate(0.05).contains(tpos[None, :])[0]):
                d -= 10.0
            if d < best_d:
                best_u, best_d = u, d
        if best_u is not None:
            return act(best_u["unknown_id"], "active_perception",
                       "search the unexplored area")
        if nodes:
            return act(sorted(by_id)[0], "active_perception", "scan the scene")
        return {"target": None, "action": "fail", "goal_text": "",
                "params": {}, "reason": "exhausted"}

    @staticmethod
    def _bind(node_id: str, by_id: dict) -> Optional[str]:
        sources = by_id.get(node_id, {}).get("source_ids") or []
        return sources[0] if sources else None


# External process adapter -----------------------------------------------------


class ExternalReasoner(Reasoner):
    """One JSON line out, one JSON line back, over a child process."""

    wants_rasters = True

    def __init__(self, cmd, timeout: float = 60.0):
        if isinstance(cmd, str):
            cmd = shlex.split(cmd)
        self._proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._timeout = timeout
        self._next_id = 0
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def respond(self, req: ReasonerRequest) -> ReasonerResponse:
        rid = self._next_id
        self._next_id += 1
        message = json.dumps(
            {"id": rid, "variant": req.variant, "payload": req.payload},
            sort_keys=True,
        )
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(message + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"adapter pipe closed: {exc}") from exc
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty as exc:
            raise ProtocolError("adapter timed out") from exc
        if line is None:
            raise ProtocolError("adapter closed its stdout")
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response line: {exc}") from exc
        if not isinstance(data, dict) or data.get("id") != rid:
            raise ProtocolError("response id mismatch")
        if "error" in data:
            raise ProtocolError(f"adapter error: {data['error']}")
        if "result" not in data or not isinstance(data["result"], dict):
            raise SchemaError("response missing result object")
        return ReasonerResponse(data["result"])

    def close(self) -> None:
        try:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=5)
        except Exception:
            pass


def validate_index(result: dict, n_candidates: int) -> int:
    """Pull a candidate index out of a select-style result."""
    if "index" not in result:
        raise SchemaError("missing index")
    idx = result["index"]
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise SchemaError(f"index must be an integer, got {idx!r}")
    if not 0 <= idx < n_candidates:
        raise OutOfRange(f"index {idx} outside 0..{n_candidates - 1}")
    return idx


def make_reasoner(spec: str) -> Reasoner:
    """CLI factory: heuristic | oracle | external:CMD."""
    if spec == "heuristic":
        return HeuristicReasoner()
    if spec == "oracle":
        return OracleReasoner()
    if spec.startswith("external:"):
        return ExternalReasoner(spec.split(":", 1)[1])
    raise ValueError(f"unknown reasoner spec {spec!r}")
