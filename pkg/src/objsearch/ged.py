"""Graph edit distance with unit costs.

Node insert/delete/relabel and edge insert/delete/re-relation all cost 1.
Between a mapped node pair, the relation multisets are aligned optimally:
cost = max(|R1|, |R2|) - |R1 & R2|, which folds re-relations (1 each) and
inserts/deletes (1 each) into one expression.

Exact branch-and-bound up to ``exact_limit`` nodes per graph; beyond that a
greedy upper bound is returned and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

# DFS expansion guard so pathological dense graphs cannot hang the metric
_MAX_EXPANSIONS = 4_000_000


@dataclass
class GedResult:
    cost: int
    exact: bool


@dataclass
class LabeledGraph:
    """Minimal graph view the edit distance runs on."""

    nodes: dict[str, frozenset[str]]
    edges: dict[tuple[str, str], frozenset[str]]

    @classmethod
    def build(
        cls,
        nodes: dict[str, Iterable[str]],
        edges: Iterable[tuple[str, str, str]],
    ) -> "LabeledGraph":
        node_map = {k: frozenset(v) for k, v in nodes.items()}
        edge_map: dict[tuple[str, str], set[str]] = {}
        for src, dst, rel in edges:
            if src not in node_map or dst not in node_map:
                continue
            edge_map.setdefault((src, dst), set()).add(rel)
        return cls(node_map, {k: frozenset(v) for k, v in edge_map.items()})


def from_scene_graph(graph, known_only: bool = True) -> LabeledGraph:
    """Project a SceneGraph onto the label/edge view used by the metric."""
    nodes = {}
    for nid, node in graph.nodes.items():
        if known_only and node.kind != "known":
            continue
        labels = {node.attrs.name}
        labels |= getattr(node, "alias_labels", set())
        nodes[nid] = labels
    triples = [
        (e.src, e.dst, e.relation)
        for e in graph.edges
        if e.src in nodes and e.dst in nodes
    ]
    return LabeledGraph.build(nodes, triples)


def _pair_cost(r1: frozenset | None, r2: frozenset | None) -> int:
    if not r1 and not r2:
        return 0
    if not r1:
        return len(r2)
    if not r2:
        return len(r1)
    return max(len(r1), len(r2)) - len(r1 & r2)


class _Search:
    def __init__(self, g1: LabeledGraph, g2: LabeledGraph):
        # order g1 nodes by degree (desc) so edge costs bind early
        deg1: dict[str, int] = {n: 0 for n in g1.nodes}
        for (a, b), rels in g1.edges.items():
            deg1[a] += len(rels)
            deg1[b] += len(rels)
        self.u_ids = sorted(g1.nodes, key=lambda n: (-deg1[n], n))
        self.v_ids = sorted(g2.nodes)
        self.n1, self.n2 = len(self.u_ids), len(self.v_ids)
        self.u_labels = [g1.nodes[u] for u in self.u_ids]
        self.v_labels = [g2.nodes[v] for v in self.v_ids]
        u_pos = {u: i for i, u in enumerate(self.u_ids)}
        v_pos = {v: i for i, v in enumerate(self.v_ids)}
        self.e1: dict[tuple[int, int], frozenset] = {
            (u_pos[a], u_pos[b]): rels for (a, b), rels in g1.edges.items()
        }
        self.e2: dict[tuple[int, int], frozenset] = {
            (v_pos[a], v_pos[b]): rels for (a, b), rels in g2.edges.items()
        }
        self.e2_total = sum(len(r) for r in self.e2.values())
        self.expansions = 0
        self.exhausted = True

    def node_cost(self, i: int, j: int) -> int:
        return 0 if self.u_labels[i] & self.v_labels[j] else 1

    def edge_delta(self, mapping: list[int], i: int, j: int) -> int:
        """Edge cost added by assigning u_i -> v_j (j = -1 deletes u_i)."""
        cost = 0
        for k in range(i):
            jk = mapping[k]
            for (a, b), (x, y) in (((k, i), (jk, j)), ((i, k), (j, jk))):
                r1 = self.e1.get((a, b))
                if r1 is None and (jk < 0 or j < 0):
                    continue
                r2 = self.e2.get((x, y)) if x >= 0 and y >= 0 else None
                cost += _pair_cost(r1, r2)
        return cost

    def leaf_extra(self, used: set[int]) -> int:
        """Insert costs for g2 nodes never used, plus their incident edges."""
        extra = self.n2 - len(used)
        for (a, b), rels in self.e2.items():
            if a not in used or b not in used:
                extra += len(rels)
        return extra

    def greedy(self) -> int:
        mapping: list[int] = []
        used: set[int] = set()
        cost = 0
        for i in range(self.n1):
            best_j, best_c = -1, 1 + self.edge_delta(mapping, i, -1)
            for j in range(self.n2):
                if j in used:
                    continue
                c = self.node_cost(i, j) + self.edge_delta(mapping, i, j)
                if c < best_c:
                    best_j, best_c = j, c
            cost += best_c
            mapping.append(best_j)
            if best_j >= 0:
                used.add(best_j)
        return cost + self.leaf_extra(used)

    def lower_bound(self, i: int, used: set[int]) -> int:
        remaining = self.n1 - i
        avail = [j for j in range(self.n2) if j not in used]
        lb = max(0, len(avail) - remaining)
        for k in range(i, self.n1):
            if any(self.u_labels[k] & self.v_labels[j] for j in avail):
                continue
            lb += 1
        return lb

    def solve(self, upper: int) -> int:
        best = upper
        mapping = [-1] * self.n1
        used: set[int] = set()

        def dfs(i: int, cost: int) -> None:
            nonlocal best
            self.expansions += 1
            if self.expansions > _MAX_EXPANSIONS:
                self.exhausted = False
                return
            if i == self.n1:
                total = cost + self.leaf_extra(used)
                if total < best:
                    best = total
                return
            if cost + self.lower_bound(i, used) >= best:
                return
            options = []
            for j in range(self.n2):
                if j in used:
                    continue
                c = self.node_cost(i, j) + self.edge_delta(mapping, i, j)
                options.append((c, j))
            options.sort()
            options.append((1 + self.edge_delta(mapping, i, -1), -1))
            for c, j in options:
                if cost + c >= best:
                    continue
                mapping[i] = j
                if j >= 0:
                    used.add(j)
                dfs(i + 1, cost + c)
                if j >= 0:
                    used.discard(j)
                mapping[i] = -1

        dfs(0, 0)
        return best


def graph_edit_distance(g1, g2, exact_limit: int = 12) -> GedResult:
    """Minimum unit-cost edit count between two graphs.

    Accepts SceneGraph or LabeledGraph inputs.  Exact up to ``exact_limit``
    nodes per graph; larger inputs get a greedy upper bound (exact=False).
    """
    if not isinstance(g1, LabeledGraph):
        g1 = from_scene_graph(g1)
    if not isinstance(g2, LabeledGraph):
        g2 = from_scene_graph(g2)
    search = _Search(g1, g2)
    ub = search.greedy()
    if max(search.n1, search.n2) > exact_limit:
        return GedResult(cost=ub, exact=False)
    best = search.solve(ub + 1)
    return GedResult(cost=min(best, ub), exact=search.exhausted)
