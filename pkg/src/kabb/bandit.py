"""Per-team Beta posteriors, decayed updates, and knowledge-aware selection.

Teams are keyed by sorted expert-id tuples. Posteriors are materialized
lazily: a key that was never updated behaves as the prior. Updates apply
exponential decay to the stored pseudo-counts before adding the new
evidence, plus a matching-index correction, so stale evidence fades and
knowledge-aligned teams keep a mild prior advantage.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .distance import DEFAULT_HISTORY_RATE, DistanceCache, DistanceWeights, HistoryView, SynergyModel
from .errors import RoutingError, SnapshotError
from .graph import ExpertProfile, KnowledgeGraph, TaskSpec

SNAPSHOT_VERSION = 1

# Pseudo-counts never decay below this, keeping Beta sampling defined.
COUNT_FLOOR = 1e-6

GREEDY = "greedy"
EXHAUSTIVE = "exhaustive"
SAMPLED = "sampled"
MEAN = "mean"


@dataclass
class BanditConfig:
    """Scalar hyperparameters of the selection policy.

    lam scales the distance penalty, eta the synergy exponent, kappa the
    per-step decay rate (decay factor per step is exp(-kappa)), delta the
    matching-index prior correction. k experts are chosen from the pool of
    experts active on the top-m task concepts.
    """

    lam: float = 1.0
    eta: float = 1.0
    kappa: float = 0.1
    delta: float = 0.2
    alpha0: float = 1.0
    beta0: float = 1.0
    window_depth: int = 50
    k: int = 3
    m: int = 2
    sample_mode: str = SAMPLED
    selection_mode: str = GREEDY
    dist_threshold: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0 or self.kappa < 0 or self.delta < 0:
            raise ValueError("lam, eta, kappa, delta must be >= 0")
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("prior pseudo-counts alpha0, beta0 must be > 0")
        if self.window_depth < 1:
            raise ValueError("window_depth must be a positive integer")
        if self.k < 1 or self.m < 1:
            raise ValueError("k and m must be >= 1")
        if self.sample_mode not in (SAMPLED, MEAN):
            raise ValueError(f"sample_mode must be '{SAMPLED}' or '{MEAN}'")
        if self.selection_mode not in (GREEDY, EXHAUSTIVE):
            raise ValueError(f"selection_mode must be '{GREEDY}' or '{EXHAUSTIVE}'")
        if not (0.0 <= self.dist_threshold < 1.0):
            raise ValueError("dist_threshold must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "eta": self.eta,
            "kappa": self.kappa,
            "delta": self.delta,
            "alpha0": self.alpha0,
            "beta0": self.beta0,
            "window_depth": self.window_depth,
            "k": self.k,
            "m": self.m,
            "sample_mode": self.sample_mode,
            "selection_mode": self.selection_mode,
            "dist_threshold": self.dist_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BanditConfig":
        return cls(**data)


def config_hash(config: BanditConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def subset_key(expert_ids: Iterable[int]) -> tuple[int, ...]:
    """Canonical sorted tuple key; rejects duplicate members."""
    key = tuple(sorted(int(e) for e in expert_ids))
    if len(set(key)) != len(key):
        raise ValueError(f"subset contains duplicate expert ids: {key}")
    return key


@dataclass
class SubsetPosterior:
    key: tuple[int, ...]
    alpha: float
    beta: float
    last_update: int
    window: deque = field(default_factory=deque)

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass
class ExpertCounter:
    """Decayed success/failure mass for one expert's running history."""

    successes: float = 0.0
    failures: float = 0.0
    last_update: int = 0

    @property
    def rate(self) -> float:
        total = self.successes + self.failures
        return self.successes / total if total > 0 else DEFAULT_HISTORY_RATE


def decay_factor(delta_t: int, kappa: float) -> float:
    """Exponential forgetting weight exp(-kappa * delta_t), in (0, 1]."""
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    return math.exp(-kappa * delta_t)


class PosteriorStore:
    """Single-writer container of subset posteriors and expert counters."""

    def __init__(self, config: BanditConfig):
        self.config = config
        self.posteriors: dict[tuple[int, ...], SubsetPosterior] = {}
        self.expert_counters: dict[int, ExpertCounter] = {}

    def params(self, key: tuple[int, ...]) -> tuple[float, float, int | None]:
        """(alpha, beta, last_update) for a key; priors when never updated."""
        post = self.posteriors.get(key)
        if post is None:
            return (self.config.alpha0, self.config.beta0, None)
        return (post.alpha, post.beta, post.last_update)

    def mean(self, key: tuple[int, ...]) -> float:
        alpha, beta, _ = self.params(key)
        return alpha / (alpha + beta)

    def history_view(self) -> HistoryView:
        """Frozen per-expert success-rate snapshot for distance evaluation."""
        return HistoryView({eid: c.rate for eid, c in self.expert_counters.items()})

    def expert_rate(self, expert_id: int) -> float:
        counter = self.expert_counters.get(expert_id)
        return counter.rate if counter is not None else DEFAULT_HISTORY_RATE


def update_posterior(
    store: PosteriorStore,
    subset: Sequence[int] | Sequence[ExpertProfile],
    reward: float,
    km: float,
    now: int,
    config: BanditConfig | None = None,
) -> SubsetPosterior:
    """Apply the decayed dual update to the selected team only.

    alpha' = g*alpha + r + delta*km and beta' = g*beta + (1-r) + delta*(1-km)
    with g = exp(-kappa * steps_since_last_update). Per-expert counters get
    the same decay-then-add treatment. Counts are floored so they stay
    positive under extreme decay.
    """
    config = config or store.config
    if not (0.0 <= reward <= 1.0):
        raise ValueError(f"reward must lie in [0, 1], got {reward}")
    if not (0.0 <= km <= 1.0):
        raise ValueError(f"km must lie in [0, 1], got {km}")
    ids = [e.expert_id if isinstance(e, ExpertProfile) else int(e) for e in subset]
    if not ids:
        raise ValueError("update_posterior: subset must be non-empty")
    key = subset_key(ids)

    post = store.posteriors.get(key)
    if post is None:
        post = SubsetPosterior(
            key=key,
            alpha=config.alpha0,
            beta=config.beta0,
            last_update=now,
            window=deque(maxlen=config.window_depth),
        )
        store.posteriors[key] = post
        gamma = 1.0
    else:
        gamma = decay_factor(max(now - post.last_update, 0), config.kappa)
    post.alpha = max(gamma * post.alpha + reward + config.delta * km, COUNT_FLOOR)
    post.beta = max(gamma * post.beta + (1.0 - reward) + config.delta * (1.0 - km), COUNT_FLOOR)
    post.last_update = now
    post.window.append((reward, km))

    for eid in ids:
        counter = store.expert_counters.get(eid)
        if counter is None:
            counter = ExpertCounter(last_update=now)
            store.expert_counters[eid] = counter
            g = 1.0
        else:
            g = decay_factor(max(now - counter.last_update, 0), config.kappa)
        counter.successes = g * counter.successes + reward
        counter.failures = g * counter.failures + (1.0 - reward)
        counter.last_update = now
    return post


def confidence(
    alpha: float,
    beta: float,
    dist: float,
    synergy: float,
    steps_since_update: int,
    config: BanditConfig,
    rng: np.random.Generator | None = None,
    sample_mode: str | None = None,
) -> float:
    """Adjusted team confidence in [0, 1].

    Posterior mean (or a Beta draw in sampled mode) multiplied by the
    distance penalty exp(-lam * dist), staleness decay exp(-kappa * dt),
    and the synergy gain synergy**eta. Multipliers with a zero coefficient
    are skipped, which leaves the base value bit-exact.
    """
    mode = sample_mode or config.sample_mode
    if mode == SAMPLED:
        if rng is None:
            raise ValueError("sampled mode requires an rng")
        value = float(rng.beta(alpha, beta))
    else:
        value = alpha / (alpha + beta)
    if config.lam != 0.0:
        value *= math.exp(-config.lam * dist)
    if config.kappa != 0.0 and steps_since_update > 0:
        value *= math.exp(-config.kappa * steps_since_update)
    if config.eta != 0.0:
        value *= synergy**config.eta
    return value


def select_concepts(task: TaskSpec, m: int) -> list[int]:
    """Top-m concepts by requirement weight; ties go to the lower id.

    Only concepts with positive requirement are candidates; when fewer than
    m are positive, all of them are returned.
    """
    weights = task.requirement
    active = np.flatnonzero(weights > 0)
    ranked = sorted(active.tolist(), key=lambda c: (-weights[c], c))
    return [int(c) for c in ranked[:m]]


@dataclass
class SelectionResult:
    """Outcome of one selection: the team plus its decision trace."""

    subset: tuple[int, ...]
    confidences: dict[tuple[int, ...], float]
    selected_concepts: list[int]
    rng_tag: str
    km: float
    truncated: bool = False

    @property
    def chosen_confidence(self) -> float:
        return self.confidences[self.subset]


def _rng_tag(rng: np.random.Generator | None) -> str:
    if rng is None:
        return "deterministic"
    state = rng.bit_generator.state
    digest = hashlib.sha256(repr(sorted(state.items())).encode()).hexdigest()
    return f"{state.get('bit_generator', 'rng')}:{digest[:12]}"


def _eligible_pool(graph: KnowledgeGraph, concepts: Sequence[int]) -> list[int]:
    wanted = set(concepts)
    return sorted(e.expert_id for e in graph.experts if e.concept_set & wanted)


def _apply_distance_filter(
    pool: list[int],
    concepts_key: frozenset[int],
    cache: DistanceCache,
    history: HistoryView,
    threshold: float,
) -> list[int]:
    """Keep experts whose normalized mismatch passes the threshold.

    An expert passes when 1 - mismatch >= threshold. Falls back to the full
    pool when nobody passes, so a strict threshold degrades rather than
    breaks routing.
    """
    if threshold <= 0.0:
        return pool
    kept = [
        eid
        for eid in pool
        if 1.0 - cache.normalized_mismatch((eid,), concepts_key, history) >= threshold
    ]
    return kept if kept else pool


def select_subset(
    store: PosteriorStore,
    task: TaskSpec,
    graph: KnowledgeGraph,
    config: BanditConfig,
    rng: np.random.Generator | None = None,
    weights: DistanceWeights | None = None,
    synergy_model: SynergyModel | None = None,
    cache: DistanceCache | None = None,
    now: int = 0,
    selected_concepts: Sequence[int] | None = None,
    pool: Sequence[int] | None = None,
) -> SelectionResult:
    """Choose a team of k experts for the task.

    Greedy mode grows the team one expert at a time, at each round keeping
    the candidate whose extended team has the highest adjusted confidence;
    exhaustive mode scores every k-combination of the pool. Ties break
    toward the lower expert id / lexicographically smaller key. A pool
    smaller than k returns the whole pool with ``truncated`` set.
    """
    if config.k > graph.n_experts:
        raise ValueError(f"config.k={config.k} exceeds the {graph.n_experts} experts in the graph")
    if config.m > graph.n_concepts:
        raise ValueError(f"config.m={config.m} exceeds the {graph.n_concepts} concepts in the graph")
    if cache is None:
        cache = DistanceCache(
            graph,
            weights or DistanceWeights(),
            synergy_model or SynergyModel.from_graph(graph),
        )
    if selected_concepts is None:
        selected_concepts = select_concepts(task, config.m)
    else:
        selected_concepts = list(selected_concepts)
    if pool is None:
        pool = _eligible_pool(graph, selected_concepts)
    else:
        pool = sorted(pool)
    if not pool:
        raise RoutingError(
            f"task {task.task_id}: no expert is active on concepts {selected_concepts}"
        )

    history = store.history_view()
    concepts_key = task.active_concepts
    pool = _apply_distance_filter(pool, concepts_key, cache, history, config.dist_threshold)
    tag = _rng_tag(rng if config.sample_mode == SAMPLED else None)

    size = min(config.k, len(pool))
    confidences: dict[tuple[int, ...], float] = {}

    def score(key: tuple[int, ...]) -> float:
        alpha, beta, last = store.params(key)
        dt = 0 if last is None else max(now - last, 0)
        dist = cache.distance(key, concepts_key, history) if config.lam != 0.0 else 0.0
        syn = cache.synergy(key) if config.eta != 0.0 else 1.0
        value = confidence(alpha, beta, dist, syn, dt, config, rng=rng)
        confidences[key] = value
        return value

    if config.selection_mode == EXHAUSTIVE:
        best_key = None
        best_value = -math.inf
        for combo in itertools.combinations(pool, size):
            value = score(combo)
            if value > best_value:
                best_value = value
                best_key = combo
        chosen = best_key
    else:
        members: list[int] = []
        remaining = list(pool)
        for _ in range(size):
            best_eid = None
            best_value = -math.inf
            for eid in remaining:
                candidate = subset_key(members + [eid])
                value = score(candidate)
                if value > best_value:
                    best_value = value
                    best_eid = eid
            members.append(best_eid)
            remaining.remove(best_eid)
        chosen = subset_key(members)

    return SelectionResult(
        subset=chosen,
        confidences=confidences,
        selected_concepts=list(selected_concepts),
        rng_tag=tag,
        km=cache.km(chosen, concepts_key),
        truncated=size < config.k,
    )


def snapshot(store: PosteriorStore) -> dict:
    """Lossless snapshot document (deterministic ordering)."""
    return {
        "version": SNAPSHOT_VERSION,
        "config_hash": config_hash(store.config),
        "subsets": [
            {
                "key": list(post.key),
                "alpha": post.alpha,
                "beta": post.beta,
                "last_update": post.last_update,
                "window": [[r, km] for r, km in post.window],
            }
            for _, post in sorted(store.posteriors.items())
        ],
        "expert_counters": [
            {
                "expert_id": eid,
                "s": counter.successes,
                "f": counter.failures,
                "last_update": counter.last_update,
            }
            for eid, counter in sorted(store.expert_counters.items())
        ],
    }


def snapshot_json(store: PosteriorStore) -> str:
    """Canonical JSON text; identical stores serialize byte-identically."""
    return json.dumps(snapshot(store), sort_keys=True, separators=(",", ":")) + "\n"


def _snapshot_field(entry: dict, key: str, where: str):
    if key not in entry:
        raise SnapshotError(f"snapshot {where} entry missing '{key}'")
    return entry[key]


def restore(document: dict | str, config: BanditConfig, check_hash: bool = True) -> PosteriorStore:
    """Rebuild a PosteriorStore from a snapshot document.

    The config must be supplied because absent keys fall back to its priors;
    by default its hash must match the one recorded in the snapshot.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"snapshot is not valid JSON: {exc.msg}") from exc
    if not isinstance(document, dict):
        raise SnapshotError("snapshot must be a JSON object")
    version = document.get("version")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version!r}")
    if check_hash and document.get("config_hash") != config_hash(config):
        raise SnapshotError("config_hash mismatch: snapshot was written under a different config")

    store = PosteriorStore(config)
    for entry in document.get("subsets", []):
        key_raw = _snapshot_field(entry, "key", "subset")
        alpha = _snapshot_field(entry, "alpha", "subset")
        beta = _snapshot_field(entry, "beta", "subset")
        last_update = _snapshot_field(entry, "last_update", "subset")
        window_raw = _snapshot_field(entry, "window", "subset")
        try:
            key = subset_key(key_raw)
        except (ValueError, TypeError) as exc:
            raise SnapshotError(f"bad subset key {key_raw!r}: {exc}") from exc
        if not (isinstance(alpha, (int, float)) and alpha > 0):
            raise SnapshotError(f"subset {key}: alpha must be > 0, got {alpha!r}")
        if not (isinstance(beta, (int, float)) and beta > 0):
            raise SnapshotError(f"subset {key}: beta must be > 0, got {beta!r}")
        if not isinstance(last_update, int):
            raise SnapshotError(f"subset {key}: last_update must be an integer")
        window = deque(maxlen=config.window_depth)
        for item in window_raw:
            if not (isinstance(item, (list, tuple)) and len(item) == 2):
                raise SnapshotError(f"subset {key}: bad window item {item!r}")
            window.append((float(item[0]), float(item[1])))
        if key in store.posteriors:
            raise SnapshotError(f"duplicate subset key {key}")
        store.posteriors[key] = SubsetPosterior(
            key=key, alpha=float(alpha), beta=float(beta), last_update=last_update, window=window
        )

    for entry in document.get("expert_counters", []):
        eid = _snapshot_field(entry, "expert_id", "expert_counter")
        s = _snapshot_field(entry, "s", "expert_counter")
        f = _snapshot_field(entry, "f", "expert_counter")
        last_update = _snapshot_field(entry, "last_update", "expert_counter")
        if not isinstance(eid, int) or eid < 0:
            raise SnapshotError(f"bad expert_id {eid!r} in expert_counters")
        if not (isinstance(s, (int, float)) and s >= 0) or not (isinstance(f, (int, float)) and f >= 0):
            raise SnapshotError(f"expert {eid}: counters must be >= 0")
        if eid in store.expert_counters:
            raise SnapshotError(f"duplicate expert counter for expert {eid}")
        store.expert_counters[eid] = ExpertCounter(
            successes=float(s), failures=float(f), last_update=int(last_update)
        )
    return store


def coalesce_shared_parameters(
    store: PosteriorStore,
    graph: KnowledgeGraph,
    epsilon: float,
    weights: DistanceWeights | None = None,
    synergy_model: SynergyModel | None = None,
) -> int:
    """Optional storage optimization: average posteriors of near-identical teams.

    Teams whose pairwise subset distance (both directions) falls below
    epsilon share one (alpha, beta) value, the cluster average. Returns the
    number of coalesced clusters. Off by default; intended as a
    post-restore pass.
    """
    from .distance import subset_distance

    weights = weights or DistanceWeights()
    synergy_model = synergy_model or SynergyModel.from_graph(graph)
    history = store.history_view()
    by_id = graph.expert_by_id
    keys = sorted(store.posteriors)
    parent = {key: key for key in keys}

    def find(key):
        while parent[key] != key:
            parent[key] = parent[parent[key]]
            key = parent[key]
        return key

    for i, key_a in enumerate(keys):
        team_a = [by_id[e] for e in key_a]
        for key_b in keys[i + 1 :]:
            team_b = [by_id[e] for e in key_b]
            d_ab = subset_distance(team_a, team_b, weights, graph, synergy_model, history)
            d_ba = subset_distance(team_b, team_a, weights, graph, synergy_model, history)
            if max(d_ab, d_ba) < epsilon:
                parent[find(key_a)] = find(key_b)

    clusters: dict[tuple[int, ...], list[tuple[int, ...]]] = {}
    for key in keys:
        clusters.setdefault(find(key), []).append(key)
    merged = 0
    for members in clusters.values():
        if len(members) < 2:
            continue
        alpha = sum(store.posteriors[k].alpha for k in members) / len(members)
        beta = sum(store.posteriors[k].beta for k in members) / len(members)
        for k in members:
            store.posteriors[k].alpha = alpha
            store.posteriors[k].beta = beta
        merged += 1
    return merged
