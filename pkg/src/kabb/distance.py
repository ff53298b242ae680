"""Team synergy, the knowledge-distance metric, and the matching index.

The distance between an expert team and a task scales a four-term mismatch
bracket (semantic, dependency, history, synergy) by a log difficulty factor.
Each bracket term is clamped to [0, 1] before weighting so the total is
bounded by the difficulty factor alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import GraphValidationError
from .graph import (
    ExpertProfile,
    KnowledgeGraph,
    TaskSpec,
    concept_jaccard,
    dependency_edge_count_sets,
    mean_depth,
    union_concepts,
)

CAPABILITY_COMPLEMENT = "capability-complement"
EXPLICIT_MATRIX = "explicit-matrix"

DEFAULT_HISTORY_RATE = 0.5


@dataclass(frozen=True)
class DistanceWeights:
    """Bracket weights (semantic, dependency, history, synergy); sum to 1."""

    semantic: float = 0.4
    dependency: float = 0.2
    history: float = 0.2
    synergy: float = 0.2

    def __post_init__(self):
        vals = self.as_tuple()
        if any(w < 0 for w in vals):
            raise ValueError(f"distance weights must be non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"distance weights must sum to 1 within 1e-9, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.semantic, self.dependency, self.history, self.synergy)


@dataclass(eq=False)
class SynergyModel:
    """Pairwise synergy coefficients for all experts.

    Either an explicit symmetric matrix supplied with the graph document, or
    the capability-complement default: complementary concept coverage scaled
    by how much of the concept space the pair spans.
    """

    mode: str
    matrix: np.ndarray
    index_of: dict[int, int]

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, expert_ids: Sequence[int]) -> "SynergyModel":
        matrix = np.asarray(matrix, dtype=float)
        m = len(expert_ids)
        if matrix.shape != (m, m):
            raise GraphValidationError(f"synergy matrix must be {m}x{m}")
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise GraphValidationError("synergy matrix must be symmetric")
        if np.any(matrix < 0) or np.any(matrix > 1):
            raise GraphValidationError("synergy matrix entries must lie in [0, 1]")
        return cls(
            mode=EXPLICIT_MATRIX,
            matrix=matrix,
            index_of={eid: i for i, eid in enumerate(expert_ids)},
        )

    @classmethod
    def from_graph(cls, graph: KnowledgeGraph) -> "SynergyModel":
        """Explicit matrix when the document carries one, complement otherwise."""
        ids = [e.expert_id for e in graph.experts]
        if graph.synergy_matrix is not None:
            return cls.from_matrix(graph.synergy_matrix, ids)
        n_concepts = graph.n_concepts
        m = len(ids)
        matrix = np.ones((m, m), dtype=float)
        sets = [e.concept_set for e in graph.experts]
        for i in range(m):
            for j in range(i + 1, m):
                union = sets[i] | sets[j]
                complement = 1.0 - concept_jaccard(sets[i], sets[j])
                coverage = len(union) / n_concepts
                matrix[i, j] = matrix[j, i] = complement * coverage
        return cls(mode=CAPABILITY_COMPLEMENT, matrix=matrix, index_of={eid: i for i, eid in enumerate(ids)})

    def pair(self, id_i: int, id_j: int) -> float:
        return float(self.matrix[self.index_of[id_i], self.index_of[id_j]])


class HistoryView:
    """Frozen per-expert success rates; unknown experts default to 0.5."""

    __slots__ = ("_rates", "_default")

    def __init__(self, rates: Mapping[int, float] | None = None, default: float = DEFAULT_HISTORY_RATE):
        rates = dict(rates) if rates else {}
        for eid, r in rates.items():
            if not (0.0 <= r <= 1.0):
                raise ValueError(f"history rate for expert {eid} must lie in [0, 1], got {r}")
        self._rates = rates
        self._default = default

    def rate(self, expert_id: int) -> float:
        return self._rates.get(expert_id, self._default)


def pairwise_synergy(e_i: ExpertProfile, e_j: ExpertProfile, model: SynergyModel) -> float:
    """Synergy coefficient of a distinct expert pair."""
    if e_i.expert_id == e_j.expert_id:
        raise ValueError("pairwise_synergy is undefined on the diagonal (i == j)")
    return model.pair(e_i.expert_id, e_j.expert_id)


def team_synergy(subset: Sequence[ExpertProfile], model: SynergyModel) -> float:
    """Mean pairwise synergy over a team; singleton teams score 1.0."""
    if not subset:
        raise ValueError("team_synergy: expert subset must be non-empty")
    if len(subset) == 1:
        return 1.0
    idx = sorted(model.index_of[e.expert_id] for e in subset)
    total = 0.0
    count = 0
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            total += float(model.matrix[idx[a], idx[b]])
            count += 1
    return total / count


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def _history_mean(expert_ids: Sequence[int], history: HistoryView) -> float:
    return sum(history.rate(eid) for eid in expert_ids) / len(expert_ids)


def distance_bracket(
    semantic_overlap: float,
    dependency_count: float,
    history_rate: float,
    synergy: float,
    weights: DistanceWeights,
    n_experts: int,
) -> float:
    """Weighted mismatch bracket; every term clamped to [0, 1] first."""
    sem = _clamp01(1.0 - semantic_overlap)
    dep = _clamp01(dependency_count / n_experts)
    hist = _clamp01(1.0 - history_rate)
    syn = _clamp01(1.0 - synergy)
    w = weights
    return w.semantic * sem + w.dependency * dep + w.history * hist + w.synergy * syn


def _distance_from_sets(
    team_concepts: frozenset[int],
    target_concepts: frozenset[int],
    difficulty: float,
    member_ids: Sequence[int],
    subset: Sequence[ExpertProfile],
    graph: KnowledgeGraph,
    weights: DistanceWeights,
    synergy_model: SynergyModel,
    history: HistoryView,
) -> float:
    overlap = concept_jaccard(team_concepts, target_concepts)
    dep = dependency_edge_count_sets(graph, team_concepts, target_concepts)
    hbar = _history_mean(member_ids, history)
    syn = team_synergy(subset, synergy_model)
    bracket = distance_bracket(overlap, dep, hbar, syn, weights, graph.n_experts)
    return math.log1p(difficulty) * bracket


def knowledge_distance(
    subset: Sequence[ExpertProfile],
    task: TaskSpec,
    weights: DistanceWeights,
    graph: KnowledgeGraph,
    synergy_model: SynergyModel,
    history: HistoryView,
) -> float:
    """Knowledge distance between an expert team and a task.

    log(1 + difficulty) times the weighted bracket of semantic mismatch,
    normalized dependency-path count, historical failure rate, and synergy
    shortfall. Zero-depth tasks give distance 0 regardless of the bracket.
    """
    if not subset:
        raise ValueError("knowledge_distance: expert subset must be non-empty")
    if not task.active_concepts:
        raise ValueError("knowledge_distance: task has no active concepts")
    ordered = sorted(subset, key=lambda e: e.expert_id)
    return _distance_from_sets(
        union_concepts(ordered),
        task.active_concepts,
        mean_depth(graph, task.active_concepts),
        [e.expert_id for e in ordered],
        ordered,
        graph,
        weights,
        synergy_model,
        history,
    )


def km_index(subset: Sequence[ExpertProfile], task: TaskSpec, synergy_model: SynergyModel) -> float:
    """Knowledge-matching index: semantic overlap times team synergy."""
    if not subset:
        raise ValueError("km_index: expert subset must be non-empty")
    overlap = concept_jaccard(union_concepts(subset), task.active_concepts)
    return overlap * team_synergy(subset, synergy_model)


def subset_distance(
    subset_a: Sequence[ExpertProfile],
    subset_b: Sequence[ExpertProfile],
    weights: DistanceWeights,
    graph: KnowledgeGraph,
    synergy_model: SynergyModel,
    history: HistoryView,
) -> float:
    """Distance from one team to another, treating the second as the target.

    The second team's concept set plays the task role; history and synergy
    are evaluated on the first team. The difficulty scale uses the maximum
    depth over both teams' concepts, which keeps teams anchored on shallow
    concepts from acting as zero-cost midpoints in triangle comparisons.
    """
    if not subset_a or not subset_b:
        raise ValueError("subset_distance: both subsets must be non-empty")
    ordered = sorted(subset_a, key=lambda e: e.expert_id)
    concepts_a = union_concepts(ordered)
    concepts_b = union_concepts(subset_b)
    joint = concepts_a | concepts_b
    difficulty = max((graph.concepts[c].depth for c in joint), default=0.0)
    return _distance_from_sets(
        concepts_a,
        concepts_b,
        float(difficulty),
        [e.expert_id for e in ordered],
        ordered,
        graph,
        weights,
        synergy_model,
        history,
    )


class DistanceCache:
    """Memoized distance evaluation for the selection hot path.

    Caches the static bracket ingredients (semantic overlap, dependency
    count, team synergy, difficulty) keyed by expert-id tuples and concept
    frozensets; the history term is recomputed per call. Produces floats
    identical to :func:`knowledge_distance`.
    """

    def __init__(self, graph: KnowledgeGraph, weights: DistanceWeights, synergy_model: SynergyModel):
        self.graph = graph
        self.weights = weights
        self.synergy_model = synergy_model
        self._union: dict[tuple[int, ...], frozenset[int]] = {}
        self._static: dict[tuple[tuple[int, ...], frozenset[int]], tuple[float, float]] = {}
        self._synergy: dict[tuple[int, ...], float] = {}
        self._difficulty: dict[frozenset[int], float] = {}

    def team_concepts(self, key: tuple[int, ...]) -> frozenset[int]:
        got = self._union.get(key)
        if got is None:
            by_id = self.graph.expert_by_id
            got = union_concepts([by_id[e] for e in key])
            self._union[key] = got
        return got

    def synergy(self, key: tuple[int, ...]) -> float:
        got = self._synergy.get(key)
        if got is None:
            by_id = self.graph.expert_by_id
            got = team_synergy([by_id[e] for e in key], self.synergy_model)
            self._synergy[key] = got
        return got

    def difficulty(self, concepts: frozenset[int]) -> float:
        got = self._difficulty.get(concepts)
        if got is None:
            got = mean_depth(self.graph, concepts)
            self._difficulty[concepts] = got
        return got

    def _static_terms(self, key: tuple[int, ...], concepts: frozenset[int]) -> tuple[float, float]:
        cache_key = (key, concepts)
        got = self._static.get(cache_key)
        if got is None:
            team = self.team_concepts(key)
            got = (
                concept_jaccard(team, concepts),
                float(dependency_edge_count_sets(self.graph, team, concepts)),
            )
            self._static[cache_key] = got
        return got

    def overlap(self, key: tuple[int, ...], concepts: frozenset[int]) -> float:
        return self._static_terms(key, concepts)[0]

    def normalized_mismatch(
        self, key: tuple[int, ...], concepts: frozenset[int], history: HistoryView
    ) -> float:
        """Bracket value in [0, 1] (the distance without its difficulty scale)."""
        overlap, dep = self._static_terms(key, concepts)
        hbar = _history_mean(key, history)
        return distance_bracket(overlap, dep, hbar, self.synergy(key), self.weights, self.graph.n_experts)

    def distance(self, key: tuple[int, ...], concepts: frozenset[int], history: HistoryView) -> float:
        return math.log1p(self.difficulty(concepts)) * self.normalized_mismatch(key, concepts, history)

    def km(self, key: tuple[int, ...], concepts: frozenset[int]) -> float:
        return self.overlap(key, concepts) * self.synergy(key)
