"""Instruction routing: concept extraction, team selection, dispatch to
expert adapters, weighted fusion of responses, and feedback ingestion.

Concept extraction is a deterministic keyword lexicon (longest phrase
first, case-insensitive). Fusion is the weight computation plus ordered
concatenation; semantic merging of the response texts is out of scope.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .bandit import (
    BanditConfig,
    PosteriorStore,
    SelectionResult,
    select_subset,
    update_posterior,
)
from .distance import DistanceCache, DistanceWeights, SynergyModel
from .errors import DuplicateFeedbackError, FeedbackError, GraphParseError, RoutingError
from .graph import KnowledgeGraph, TaskSpec

DEFAULT_TRACE_CAPACITY = 10_000


@dataclass(frozen=True)
class LexiconEntry:
    phrase: str
    concept: int
    weight: float


class ConceptLexicon:
    """Lowercase keyword/phrase -> (concept id, weight in (0, 1])."""

    def __init__(self, entries: Sequence[LexiconEntry]):
        seen: dict[str, LexiconEntry] = {}
        for entry in entries:
            if not entry.phrase:
                raise GraphParseError("lexicon phrases must be non-empty")
            if entry.concept < 0:
                raise GraphParseError(f"lexicon phrase {entry.phrase!r}: concept id must be >= 0")
            if not (0.0 < entry.weight <= 1.0):
                raise GraphParseError(f"lexicon phrase {entry.phrase!r}: weight must lie in (0, 1]")
            seen[entry.phrase.lower()] = LexiconEntry(entry.phrase.lower(), entry.concept, entry.weight)
        # Longest phrase first so multi-word phrases shadow their substrings.
        self.entries = sorted(seen.values(), key=lambda e: (-len(e.phrase), e.phrase))

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptLexicon":
        entries = []
        for phrase, payload in data.items():
            if not isinstance(payload, dict) or "concept" not in payload or "weight" not in payload:
                raise GraphParseError(f"lexicon entry {phrase!r} must map to {{concept, weight}}")
            entries.append(LexiconEntry(phrase, int(payload["concept"]), float(payload["weight"])))
        return cls(entries)

    @classmethod
    def from_file(cls, path) -> "ConceptLexicon":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise GraphParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def max_concept(self) -> int:
        return max((e.concept for e in self.entries), default=-1)


def extract_concepts(text: str, lexicon: ConceptLexicon, n_concepts: int) -> TaskSpec:
    """Parse an instruction into a task requirement vector.

    Matched phrase weights accumulate per concept (each phrase counted
    once; longer phrases consume their text span first), then the vector is
    scaled so its maximum is 1. No matches leave the zero vector, i.e. an
    unroutable task.
    """
    if not text or not text.strip():
        raise ValueError("instruction text must be non-empty")
    lowered = text.lower()
    consumed = np.zeros(len(lowered), dtype=bool)
    requirement = np.zeros(n_concepts)
    task_id = "task-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    for entry in lexicon.entries:
        if entry.concept >= n_concepts:
            raise GraphParseError(
                f"lexicon phrase {entry.phrase!r} references concept {entry.concept} "
                f"outside the {n_concepts}-concept graph"
            )
        matched = False
        for match in re.finditer(re.escape(entry.phrase), lowered):
            span = slice(match.start(), match.end())
            if consumed[span].any():
                continue
            consumed[span] = True
            matched = True
        if matched:
            requirement[entry.concept] += entry.weight
    peak = requirement.max()
    if peak > 0:
        requirement = requirement / peak
    return TaskSpec(task_id=task_id, requirement=requirement)


class ExpertAdapter(Protocol):
    """Contract for anything that can answer a task on behalf of an expert."""

    expert_id: int

    def respond(self, text: str, concepts: Sequence[int]) -> tuple[str, float]:
        """Return (response text, self score in [0, 1])."""
        ...


@dataclass
class MockExpertAdapter:
    """Deterministic in-tree adapter satisfying the wire contract."""

    expert_id: int
    name: str = ""
    seed: int = 0

    def respond(self, text: str, concepts: Sequence[int]) -> tuple[str, float]:
        payload = f"{self.seed}|{self.expert_id}|{text}".encode("utf-8")
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        unit = int.from_bytes(digest, "big") / float(1 << 64)
        score = 0.3 + 0.7 * unit
        label = self.name or f"expert-{self.expert_id}"
        response = f"[{label}] on concepts {list(concepts)}: {text.strip()}"
        return response, score


@dataclass
class ExpertResponse:
    expert_id: int
    text: str
    self_score: float


@dataclass
class AggregatedAnswer:
    final_text: str
    weights: list[float]
    expert_ids: list[int]
    uniform_fallback: bool = False


def aggregate(
    responses: Sequence[ExpertResponse],
    confidences: Sequence[float],
) -> AggregatedAnswer:
    """Fuse responses: weight_i proportional to confidence_i * self_score_i.

    Weights are normalized to sum to 1; if every product is zero, uniform
    weights are used and the fallback flag set. The final text concatenates
    responses in descending-weight order with their weight annotations.
    """
    if not responses:
        raise ValueError("aggregate requires at least one response")
    if len(responses) != len(confidences):
        raise ValueError("responses and confidences must have equal length")
    raw = np.array([max(c, 0.0) * max(r.self_score, 0.0) for c, r in zip(confidences, responses)])
    total = raw.sum()
    fallback = False
    if total <= 0:
        weights = np.full(len(responses), 1.0 / len(responses))
        fallback = True
    else:
        weights = raw / total
    order = sorted(range(len(responses)), key=lambda i: (-weights[i], responses[i].expert_id))
    pieces = [f"[w={weights[i]:.3f} expert={responses[i].expert_id}] {responses[i].text}" for i in order]
    return AggregatedAnswer(
        final_text="\n".join(pieces),
        weights=[float(w) for w in weights],
        expert_ids=[r.expert_id for r in responses],
        uniform_fallback=fallback,
    )


@dataclass
class TraceEntry:
    task_id: str
    subset: tuple[int, ...]
    km: float
    step: int
    consumed: bool = False


@dataclass
class RoutedDecision:
    task_id: str
    task: TaskSpec
    selection: SelectionResult
    step: int
    text: str = ""

    def member_confidences(self) -> dict[int, float]:
        """Per-expert adjusted confidence for the chosen team.

        Greedy selection scores every pool member as a singleton in its
        first round, so those values are reused; anything missing (e.g.
        exhaustive mode) falls back to the chosen team's confidence.
        """
        team_value = self.selection.chosen_confidence
        return {
            eid: self.selection.confidences.get((eid,), team_value)
            for eid in self.selection.subset
        }


class Router:
    """End-to-end pipeline owner: one store, one graph, one lexicon.

    ``route`` is deterministic given (text, store snapshot, config, seed).
    Selection traces are kept in a bounded ring so feedback can arrive
    later; each task id accepts feedback exactly once.
    """

    def __init__(
        self,
        graph: KnowledgeGraph,
        lexicon: ConceptLexicon,
        config: BanditConfig | None = None,
        store: PosteriorStore | None = None,
        weights: DistanceWeights | None = None,
        adapters: Sequence[ExpertAdapter] | None = None,
        trace_capacity: int = DEFAULT_TRACE_CAPACITY,
        adapter_seed: int = 0,
    ):
        self.graph = graph
        self.lexicon = lexicon
        if lexicon.max_concept() >= graph.n_concepts:
            raise GraphParseError(
                f"lexicon references concept {lexicon.max_concept()} outside the graph"
            )
        self.config = config or BanditConfig()
        self.store = store if store is not None else PosteriorStore(self.config)
        self.weights = weights or DistanceWeights()
        self.synergy_model = SynergyModel.from_graph(graph)
        self.cache = DistanceCache(graph, self.weights, self.synergy_model)
        if adapters is None:
            adapters = [
                MockExpertAdapter(expert_id=e.expert_id, name=e.name, seed=adapter_seed)
                for e in graph.experts
            ]
        self.adapters = {a.expert_id: a for a in adapters}
        self.trace_capacity = trace_capacity
        self._traces: "OrderedDict[str, TraceEntry]" = OrderedDict()
        self.step = 0

    def route(self, text: str, rng: np.random.Generator | None = None, seed: int | None = None) -> RoutedDecision:
        """Instruction -> concepts -> eligible pool -> team selection."""
        if rng is None:
            rng = np.random.default_rng(seed if seed is not None else 0)
        task = extract_concepts(text, self.lexicon, self.graph.n_concepts)
        if not task.routable:
            raise RoutingError(f"unroutable instruction: no lexicon phrase matched {text!r}")
        step = self.step
        selection = select_subset(
            self.store,
            task,
            self.graph,
            self.config,
            rng=rng,
            cache=self.cache,
            now=step,
        )
        self.step += 1
        entry = TraceEntry(task_id=task.task_id, subset=selection.subset, km=selection.km, step=step)
        self._traces[task.task_id] = entry
        while len(self._traces) > self.trace_capacity:
            self._traces.popitem(last=False)
        return RoutedDecision(task_id=task.task_id, task=task, selection=selection, step=step, text=text)

    def dispatch(
        self, decision: RoutedDecision, timeout: float | None = None
    ) -> list[ExpertResponse]:
        """Fan the task out to the selected experts' adapters.

        Adapters run concurrently; one that misses the timeout contributes
        an empty response with self score 0.
        """
        members = decision.selection.subset
        with ThreadPoolExecutor(max_workers=max(len(members), 1)) as pool:
            futures = {
                eid: pool.submit(
                    self.adapters[eid].respond, decision.text, decision.selection.selected_concepts
                )
                for eid in members
            }
            responses = []
            for eid in members:
                try:
                    text, score = futures[eid].result(timeout=timeout)
                except FutureTimeout:
                    text, score = "", 0.0
                responses.append(ExpertResponse(expert_id=eid, text=text, self_score=score))
        return responses

    def answer(
        self, text: str, rng: np.random.Generator | None = None, seed: int | None = None,
        timeout: float | None = None,
    ) -> tuple[RoutedDecision, AggregatedAnswer]:
        """Route, dispatch to adapters, and fuse the responses."""
        decision = self.route(text, rng=rng, seed=seed)
        responses = self.dispatch(decision, timeout=timeout)
        member_conf = decision.member_confidences()
        confidences = [member_conf[r.expert_id] for r in responses]
        answer = aggregate(responses, confidences)
        return decision, answer

    def ingest_feedback(self, task_id: str, reward: float) -> None:
        """Apply the logged team's posterior update for an outcome in [0, 1]."""
        entry = self._traces.get(task_id)
        if entry is None:
            raise FeedbackError(f"unknown task id {task_id!r}")
        if entry.consumed:
            raise DuplicateFeedbackError(f"feedback for task {task_id!r} already ingested")
        update_posterior(self.store, entry.subset, reward, entry.km, entry.step, self.config)
        entry.consumed = True
