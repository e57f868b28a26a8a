"""Deterministic inter-object relation rules.

The same rule set runs on two kinds of input: ground-truth surface samples
(for the reference graph behind the GED metric) and accumulated per-node
point clouds (for the agent's scene graph).  Keeping one implementation for
both is what makes the metric meaningful.

Edge direction: src is the figure, dst the ground ("cup on table" is
cup -> table).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import vocab
from .geometry import Aabb
from .observation import CameraPose

RELATIONS = ("behind", "belong", "inside", "on", "under")


@dataclass
class RelationParams:
    eps_contact: float = 0.005  # vertical slack for resting contact
    footprint_overlap: float = 0.3  # of the figure's own footprint
    inside_frac: float = 0.8
    inside_margin: float = 0.005
    belong_inflate: float = 0.03
    behind_margin: float = 1e-6


def _footprint_overlap(a: Aabb, b: Aabb) -> float:
    """Overlap area of the xy footprints relative to a's footprint."""
    w = min(a.hi[0], b.hi[0]) - max(a.lo[0], b.lo[0])
    d = min(a.hi[1], b.hi[1]) - max(a.lo[1], b.lo[1])
    if w <= 0 or d <= 0:
        return 0.0
    area_a = max((a.hi[0] - a.lo[0]) * (a.hi[1] - a.lo[1]), 1e-12)
    return (w * d) / area_a


def _ray_enters_box(origin: np.ndarray, target: np.ndarray, box: Aabb) -> bool:
    """Does the segment origin->target enter the box strictly before target?"""
    d = target - origin
    t_lo, t_hi = 0.0, 1.0
    for a in range(3):
        if abs(d[a]) < 1e-12:
            if origin[a] < box.lo[a] or origin[a] > box.hi[a]:
                return False
            continue
        t1 = (box.lo[a] - origin[a]) / d[a]
        t2 = (box.hi[a] - origin[a]) / d[a]
        if t1 > t2:
            t1, t2 = t2, t1
        t_lo = max(t_lo, t1)
        t_hi = min(t_hi, t2)
        if t_lo > t_hi:
            return False
    return t_lo < 1.0 - 1e-6


def _acyclic_filter(edges: list[tuple[str, str]]) -> set[tuple[str, str]]:
    """Keep a deterministic acyclic subset (edges added in sorted order)."""
    kept: set[tuple[str, str]] = set()
    adj: dict[str, set[str]] = {}

    def reaches(a: str, b: str) -> bool:
        stack, seen = [a], set()
        while stack:
            x = stack.pop()
            if x == b:
                return True
            if x in seen:
                continue
            seen.add(x)
            stack.extend(adj.get(x, ()))
        return False

    for src, dst in sorted(edges):
        if reaches(dst, src):
            continue
        kept.add((src, dst))
        adj.setdefault(src, set()).add(dst)
    return kept


def infer_pairwise(
    points: dict[str, np.ndarray],
    labels: dict[str, str],
    camera: Optional[CameraPose] = None,
    params: Optional[RelationParams] = None,
) -> set[tuple[str, str, str]]:
    """All relation triples (src, dst, relation) implied by geometry + labels.

    ``points`` maps entity id -> (N, 3) point set.  Behind edges need the
    camera and are skipped without one.
    """
    p = params or RelationParams()
    ids = sorted(k for k, v in points.items() if len(v))
    boxes = {k: Aabb.from_points(points[k]) for k in ids}
    out: set[tuple[str, str, str]] = set()

    inside_pairs: set[tuple[str, str]] = set()
    for a in ids:
        for b in ids:
            if a == b:
                continue
            ba, bb = boxes[a], boxes[b]
            if bb.volume <= ba.volume:
                continue
            frac = float(np.mean(bb.contains(points[a], margin=p.inside_margin)))
            if frac >= p.inside_frac:
                inside_pairs.add((a, b))
    for a, b in _acyclic_filter(list(inside_pairs)):
        out.add((a, b, "inside"))

    on_pairs: list[tuple[str, str]] = []
    for a in ids:
        for b in ids:
            if a == b or (a, b) in inside_pairs or (b, a) in inside_pairs:
                continue
            ba, bb = boxes[a], boxes[b]
            if _footprint_overlap(ba, bb) < p.footprint_overlap:
                continue
            # top of b evaluated under a's footprint
            fp = Aabb(
                np.array([ba.lo[0] - 0.02, ba.lo[1] - 0.02, -1e9]),
                np.array([ba.hi[0] + 0.02, ba.hi[1] + 0.02, 1e9]),
            )
            under = points[b][fp.contains(points[b])]
            if len(under) == 0:
                continue
            gap = float(ba.lo[2]) - float(under[:, 2].max())
            if abs(gap) <= p.eps_contact:
                on_pairs.append((a, b))
    for a, b in _acyclic_filter(on_pairs):
        out.add((a, b, "on"))
        out.add((b, a, "under"))

    for a in ids:  # part -> whole
        part_keys = vocab.tokens(labels.get(a, "")) & set(vocab.PART_WHOLE)
        if not part_keys:
            continue
        for b in ids:
            if a == b:
                continue
            whole_toks = vocab.tokens(labels.get(b, ""))
            if any(whole_toks & vocab.PART_WHOLE[k] for k in part_keys):
                if bool(boxes[b].inflate(p.belong_inflate).contains(
                        boxes[a].center[None, :])[0]):
                    out.add((a, b, "belong"))

    if camera is not None:
        cam = np.asarray(camera.position, dtype=float)
        for a in ids:  # a hidden behind b
            ca = boxes[a].center
            for b in ids:
                if a == b or (a, b) in inside_pairs:
                    continue
                if bool(boxes[b].contains(ca[None, :])[0]):
                    continue
                if _ray_enters_box(cam, ca, boxes[b]):
                    out.add((a, b, "behind"))
    return out
