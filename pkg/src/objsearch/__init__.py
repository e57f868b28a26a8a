"""Deterministic tabletop object-search simulator and agent.

A single virtual wrist camera observes a box-world tabletop; the agent keeps
a dynamic scene-graph memory with Unknown-node hypotheses, picks viewpoints
on a perception sphere, opens/moves/rotates objects to uncover hidden ones,
and retrieves targets named in free-form instructions.  All model-like
judgments route through a pluggable reasoner (deterministic heuristic,
ground-truth oracle, or an external process speaking NDJSON).
"""

from .actions import ActionOutcome, Primitive, execute_primitive, retrieve
from .active_perception import (
    PerceptionParams,
    PerceptionSphere,
    ViewCandidate,
    build_sphere,
    sample_directions,
    sample_poses_along,
    select_view,
)
from .ged import GedResult, LabeledGraph, graph_edit_distance
from .harness import MetricsReport, evaluate, odr
from .memory import (
    Memory,
    MemoryParams,
    NodeAttributes,
    SceneEdge,
    SceneGraph,
    SceneNode,
    match_detections,
    merge_point_sets,
    update_attributes,
    update_memory,
)
from .observation import (
    CameraIntrinsics,
    CameraPose,
    Detection,
    NoiseModel,
    Observation,
    observe,
    render_canonical_views,
)
from .reasoner import (
    ExternalReasoner,
    HeuristicReasoner,
    OracleReasoner,
    ReasonerRequest,
    ReasonerResponse,
    make_reasoner,
)
from .scenarios import generate_scenario, verify_guarantees
from .supervisor import Decision, Transcript, decide, run_episode
from .world import (
    Container,
    Scenario,
    SimObject,
    WorldState,
    apply_intervention,
    ground_truth_graph,
    load_scenario,
    save_scenario,
)

__all__ = [
    "ActionOutcome", "Primitive", "execute_primitive", "retrieve",
    "PerceptionParams", "PerceptionSphere", "ViewCandidate", "build_sphere",
    "sample_directions", "sample_poses_along", "select_view",
    "GedResult", "LabeledGraph", "graph_edit_distance",
    "MetricsReport", "evaluate", "odr",
    "Memory", "MemoryParams", "NodeAttributes", "SceneEdge", "SceneGraph",
    "SceneNode", "match_detections", "merge_point_sets", "update_attributes",
    "update_memory",
    "CameraIntrinsics", "CameraPose", "Detection", "NoiseModel", "Observation",
    "observe", "render_canonical_views",
    "ExternalReasoner", "HeuristicReasoner", "OracleReasoner",
    "ReasonerRequest", "ReasonerResponse", "make_reasoner",
    "generate_scenario", "verify_guarantees",
    "Decision", "Transcript", "decide", "run_episode",
    "Container", "Scenario", "SimObject", "WorldState", "apply_intervention",
    "ground_truth_graph", "load_scenario", "save_scenario",
]

__version__ = "0.1.0"
