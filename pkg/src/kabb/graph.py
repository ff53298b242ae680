"""Concept graph, expert capability vectors, and graph-topology metrics.

The concept space is a small undirected dependency graph. Experts and tasks
are real-valued vectors over the concepts; an activation threshold converts
them into the discrete concept sets used by the overlap and dependency
metrics.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import GraphParseError, GraphValidationError

# Capability/requirement entries strictly above this activate a concept.
ACTIVATION_THRESHOLD = 0.5

# Marker for concept pairs with no connecting path.
UNREACHABLE = -1

_CONCEPT_KEYS = {"id", "name", "depth", "root"}
_EXPERT_KEYS = {"expert_id", "name", "capability"}
_TOP_KEYS = {"concepts", "edges", "experts", "synergy_matrix"}


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    depth: int
    root: bool = False


@dataclass(eq=False)
class ExpertProfile:
    """One expert: a non-negative capability weight per concept."""

    expert_id: int
    name: str
    capability: np.ndarray

    def __post_init__(self):
        cap = np.asarray(self.capability, dtype=float)
        if cap.ndim != 1:
            raise GraphValidationError(f"expert {self.expert_id}: capability must be 1-d")
        if np.any(cap < 0) or not np.all(np.isfinite(cap)):
            raise GraphValidationError(f"expert {self.expert_id}: capability entries must be finite and >= 0")
        self.capability = cap

    @cached_property
    def concept_set(self) -> frozenset[int]:
        """Concepts this expert is active on (capability > threshold)."""
        return frozenset(int(i) for i in np.flatnonzero(self.capability > ACTIVATION_THRESHOLD))


@dataclass(eq=False)
class TaskSpec:
    """A task: id plus a non-negative concept requirement vector."""

    task_id: str
    requirement: np.ndarray

    def __post_init__(self):
        req = np.asarray(self.requirement, dtype=float)
        if req.ndim != 1:
            raise GraphValidationError(f"task {self.task_id}: requirement must be 1-d")
        if np.any(req < 0) or not np.all(np.isfinite(req)):
            raise GraphValidationError(f"task {self.task_id}: requirement entries must be finite and >= 0")
        self.requirement = req

    @cached_property
    def active_concepts(self) -> frozenset[int]:
        """Concepts demanded above the activation threshold."""
        return frozenset(int(i) for i in np.flatnonzero(self.requirement > ACTIVATION_THRESHOLD))

    @property
    def routable(self) -> bool:
        return len(self.active_concepts) > 0


@dataclass(eq=False)
class KnowledgeGraph:
    """Immutable-after-load concept graph with expert profiles.

    Edges are unordered concept pairs (the dependency graph is treated as
    undirected). Connectivity is not required; unreachable pairs are capped
    by :attr:`diameter_cap` in the dependency metric.
    """

    concepts: tuple[Concept, ...]
    edges: frozenset[tuple[int, int]]
    experts: tuple[ExpertProfile, ...]
    synergy_matrix: np.ndarray | None = None

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @cached_property
    def depths(self) -> np.ndarray:
        return np.array([c.depth for c in self.concepts], dtype=float)

    @cached_property
    def expert_by_id(self) -> dict[int, ExpertProfile]:
        return {e.expert_id: e for e in self.experts}

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[set[int]] = [set() for _ in range(self.n_concepts)]
        for a, b in self.edges:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return tuple(tuple(sorted(s)) for s in nbrs)

    @cached_property
    def shortest_paths(self) -> np.ndarray:
        """All-pairs BFS hop counts; UNREACHABLE where no path exists."""
        n = self.n_concepts
        dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
        for src in range(n):
            dist[src, src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in self.adjacency[u]:
                    if dist[src, v] == UNREACHABLE:
                        dist[src, v] = dist[src, u] + 1
                        queue.append(v)
        return dist

    @cached_property
    def diameter_cap(self) -> int:
        """Largest finite component diameter, floored at 1.

        Substitutes for the path length of disconnected concept pairs in
        the dependency metric.
        """
        finite = self.shortest_paths[self.shortest_paths != UNREACHABLE]
        return max(int(finite.max()) if finite.size else 0, 1)

    def concept_depth(self, concept_id: int) -> int:
        return self.concepts[concept_id].depth

    def experts_for_concepts(self, concept_ids: Iterable[int]) -> list[ExpertProfile]:
        """Experts active on at least one of the given concepts."""
        wanted = set(concept_ids)
        return [e for e in self.experts if e.concept_set & wanted]


def _check_unknown_keys(obj: dict, allowed: set[str], where: str, strict: bool) -> None:
    unknown = set(obj) - allowed
    if not unknown:
        return
    msg = f"unknown key(s) {sorted(unknown)} in {where}"
    if strict:
        raise GraphParseError(msg)
    warnings.warn(msg, stacklevel=3)


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise GraphParseError(f"missing required field '{key}' in {where}")
    return obj[key]


def _recompute_depths(concepts: list[dict], adjacency: Sequence[Sequence[int]]) -> list[int]:
    roots = [c["id"] for c in concepts if c.get("root")]
    if not roots:
        raise GraphValidationError("depths omitted and no concept flagged as root")
    n = len(concepts)
    depth = [UNREACHABLE] * n
    queue = deque()
    for r in roots:
        depth[r] = 0
        queue.append(r)
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if depth[v] == UNREACHABLE:
                depth[v] = depth[u] + 1
                queue.append(v)
    missing = [i for i, d in enumerate(depth) if d == UNREACHABLE]
    if missing:
        raise GraphValidationError(
            f"concepts {missing} unreachable from any root; give them explicit depths"
        )
    return depth


def load_graph(document: dict, strict: bool = False) -> KnowledgeGraph:
    """Validate a parsed graph document and build a KnowledgeGraph.

    The document has top-level keys ``concepts`` ([{id, name, depth?, root?}]),
    ``edges`` ([[id, id], ...]), ``experts`` ([{expert_id, name, capability}])
    and optionally ``synergy_matrix``. Unknown keys raise in strict mode and
    warn otherwise. Depths are recomputed by BFS from root-flagged concepts
    when any concept omits its depth.
    """
    if not isinstance(document, dict):
        raise GraphParseError("graph document must be a JSON object")
    _check_unknown_keys(document, _TOP_KEYS, "graph document", strict)

    raw_concepts = _require(document, "concepts", "graph document")
    raw_edges = _require(document, "edges", "graph document")
    raw_experts = _require(document, "experts", "graph document")
    if not isinstance(raw_concepts, list) or not raw_concepts:
        raise GraphParseError("'concepts' must be a non-empty array")
    if not isinstance(raw_edges, list):
        raise GraphParseError("'edges' must be an array")
    if not isinstance(raw_experts, list):
        raise GraphParseError("'experts' must be an array")

    n = len(raw_concepts)
    seen_ids = set()
    concept_dicts: list[dict] = [None] * n  # type: ignore[list-item]
    for entry in raw_concepts:
        if not isinstance(entry, dict):
            raise GraphParseError("each concept must be an object")
        _check_unknown_keys(entry, _CONCEPT_KEYS, "concept entry", strict)
        cid = _require(entry, "id", "concept entry")
        name = _require(entry, "name", "concept entry")
        if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0 or cid >= n:
            raise GraphParseError(f"concept id {cid!r} must be an integer in [0, {n})")
        if cid in seen_ids:
            raise GraphValidationError(f"duplicate concept id {cid}")
        seen_ids.add(cid)
        concept_dicts[cid] = dict(entry, name=str(name))

    edge_set: set[tuple[int, int]] = set()
    for pair in raw_edges:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise GraphParseError(f"edge {pair!r} must be a pair [id, id]")
        a, b = pair
        for endpoint in (a, b):
            if not isinstance(endpoint, int) or isinstance(endpoint, bool):
                raise GraphParseError(f"edge endpoint {endpoint!r} must be an integer")
            if endpoint < 0 or endpoint >= n:
                raise GraphValidationError(f"edge {pair!r} references unknown concept id {endpoint}")
        if a == b:
            raise GraphValidationError(f"self-loop edge on concept {a}")
        edge_set.add((min(a, b), max(a, b)))

    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in edge_set:
        nbrs[a].append(b)
        nbrs[b].append(a)

    if any("depth" not in c for c in concept_dicts):
        depths = _recompute_depths(concept_dicts, nbrs)
    else:
        depths = []
        for c in concept_dicts:
            d = c["depth"]
            if not isinstance(d, int) or isinstance(d, bool) or d < 0:
                raise GraphParseError(f"concept {c['id']}: depth {d!r} must be a non-negative integer")
            if c.get("root") and d != 0:
                raise GraphValidationError(f"root concept {c['id']} must have depth 0")
            depths.append(d)

    concepts = tuple(
        Concept(id=c["id"], name=c["name"], depth=depths[i], root=bool(c.get("root", False)))
        for i, c in enumerate(concept_dicts)
    )

    experts: list[ExpertProfile] = []
    seen_experts: set[int] = set()
    for entry in raw_experts:
        if not isinstance(entry, dict):
            raise GraphParseError("each expert must be an object")
        _check_unknown_keys(entry, _EXPERT_KEYS, "expert entry", strict)
        eid = _require(entry, "expert_id", "expert entry")
        name = _require(entry, "name", "expert entry")
        cap = _require(entry, "capability", "expert entry")
        if not isinstance(eid, int) or isinstance(eid, bool) or eid < 0:
            raise GraphParseError(f"expert_id {eid!r} must be a non-negative integer")
        if eid in seen_experts:
            raise GraphValidationError(f"duplicate expert_id {eid}")
        seen_experts.add(eid)
        cap_arr = np.asarray(cap, dtype=float)
        if cap_arr.shape != (n,):
            raise GraphValidationError(
                f"expert {eid}: capability length {cap_arr.shape} does not match {n} concepts"
            )
        experts.append(ExpertProfile(expert_id=eid, name=str(name), capability=cap_arr))

    synergy = None
    if "synergy_matrix" in document:
        synergy = np.asarray(document["synergy_matrix"], dtype=float)
        m = len(experts)
        if synergy.shape != (m, m):
            raise GraphValidationError(f"synergy_matrix must be {m}x{m}")
        if not np.allclose(synergy, synergy.T, atol=1e-12):
            raise GraphValidationError("synergy_matrix must be symmetric")
        if np.any(synergy < 0) or np.any(synergy > 1):
            raise GraphValidationError("synergy_matrix entries must lie in [0, 1]")
        if not np.allclose(np.diag(synergy), 1.0, atol=1e-12):
            raise GraphValidationError("synergy_matrix diagonal must be 1")

    return KnowledgeGraph(
        concepts=concepts,
        edges=frozenset(edge_set),
        experts=tuple(experts),
        synergy_matrix=synergy,
    )


def load_graph_file(path, strict: bool = False) -> KnowledgeGraph:
    """Parse a JSON graph file; JSON syntax errors keep their line info."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return load_graph(document, strict=strict)


def serialize_graph(graph: KnowledgeGraph) -> dict:
    """Emit a document that load_graph maps back to an equal graph."""
    doc: dict = {
        "concepts": [
            {"id": c.id, "name": c.name, "depth": c.depth, "root": c.root} for c in graph.concepts
        ],
        "edges": [list(e) for e in sorted(graph.edges)],
        "experts": [
            {"expert_id": e.expert_id, "name": e.name, "capability": e.capability.tolist()}
            for e in graph.experts
        ],
    }
    if graph.synergy_matrix is not None:
        doc["synergy_matrix"] = graph.synergy_matrix.tolist()
    return doc


def concept_jaccard(set_a: frozenset[int] | set[int], set_b: frozenset[int] | set[int]) -> float:
    """Jaccard similarity of two concept sets; 0 when the union is empty."""
    union = len(set_a | set_b)
    if union == 0:
        return 0.0
    return len(set_a & set_b) / union


def union_concepts(subset: Iterable[ExpertProfile]) -> frozenset[int]:
    out: frozenset[int] = frozenset()
    for expert in subset:
        out |= expert.concept_set
    return out


def jaccard_overlap(subset: Sequence[ExpertProfile], task: TaskSpec) -> float:
    """Jaccard overlap between a team's covered concepts and the task's."""
    if not subset:
        raise ValueError("jaccard_overlap: expert subset must be non-empty")
    return concept_jaccard(union_concepts(subset), task.active_concepts)


def dependency_edge_count_sets(
    graph: KnowledgeGraph, set_a: frozenset[int] | set[int], set_b: frozenset[int] | set[int]
) -> int:
    """Total shortest-path hops over cross pairs (a in A\\B, b in B\\A).

    Disconnected pairs each contribute the graph's diameter_cap.
    """
    only_a = sorted(set_a - set_b)
    only_b = sorted(set_b - set_a)
    if not only_a or not only_b:
        return 0
    sp = graph.shortest_paths
    cap = graph.diameter_cap
    total = 0
    for a in only_a:
        row = sp[a]
        for b in only_b:
            hops = row[b]
            total += cap if hops == UNREACHABLE else int(hops)
    return total


def dependency_edge_count(graph: KnowledgeGraph, subset: Sequence[ExpertProfile], task: TaskSpec) -> int:
    """Dependency-path count between a team's concepts and a task's."""
    if not subset:
        raise ValueError("dependency_edge_count: expert subset must be non-empty")
    return dependency_edge_count_sets(graph, union_concepts(subset), task.active_concepts)


def mean_depth(graph: KnowledgeGraph, concept_ids: Iterable[int]) -> float:
    ids = list(concept_ids)
    if not ids:
        raise ValueError("mean_depth: concept set must be non-empty")
    return float(np.mean([graph.concepts[c].depth for c in ids]))


def task_difficulty(graph: KnowledgeGraph, task: TaskSpec) -> float:
    """Task difficulty: mean topology depth of the task's active concepts."""
    if not task.active_concepts:
        raise ValueError(f"task {task.task_id}: no active concepts, difficulty undefined")
    return mean_depth(graph, task.active_concepts)
