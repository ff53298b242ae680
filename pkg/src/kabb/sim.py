"""Synthetic environments with known team success probabilities, baseline
policies, and regret measurement.

The truth rule ties a team's success probability to its concept coverage of
the task times the team's mean skill, so knowledge structure is genuinely
informative. Every run is deterministic given (spec, seed): tasks, rewards,
skills, and per-(team, task) noise all derive from the run seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bandit import (
    BanditConfig,
    PosteriorStore,
    SelectionResult,
    select_concepts,
    select_subset,
    subset_key,
    update_posterior,
)
from .distance import DistanceCache, DistanceWeights, SynergyModel
from .errors import AggregationError, BudgetError, ConfigError
from .graph import ACTIVATION_THRESHOLD, KnowledgeGraph, TaskSpec, concept_jaccard

# Exhaustive per-step argmax stays tractable below this pool size.
ORACLE_POOL_CAP = 12

KABB = "kabb"
VANILLA_THOMPSON = "vanilla-thompson"
UCB1 = "ucb1"
EPSILON_GREEDY = "epsilon-greedy"
RANDOM = "random"
ORACLE = "oracle"

POLICY_KINDS = (KABB, VANILLA_THOMPSON, UCB1, EPSILON_GREEDY, RANDOM, ORACLE)


@dataclass
class PolicySpec:
    kind: str
    epsilon: float = 0.1
    exploration: float = 1.0
    bandit: BanditConfig | None = None
    weights: DistanceWeights | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; valid: {POLICY_KINDS}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.exploration < 0:
            raise ConfigError("ucb exploration constant must be >= 0")


@dataclass
class EnvironmentSpec:
    """Ground-truth model for a synthetic run.

    base_skills gives each expert a scalar skill; omitted, skills are drawn
    uniformly from skill_range using the run seed. Tasks activate between
    min_concepts and max_concepts concepts (or exactly fixed_concepts).
    Drift entries permute or additively perturb the skill vector at their
    step.
    """

    graph: KnowledgeGraph
    base_skills: Sequence[float] | None = None
    noise_scale: float = 0.0
    skill_range: tuple[float, float] = (0.3, 0.95)
    min_concepts: int = 2
    max_concepts: int = 3
    fixed_concepts: Sequence[int] | None = None
    drift: Sequence[dict] = field(default_factory=tuple)
    routing_concepts: int = 2
    team_size: int = 3

    def __post_init__(self):
        if self.base_skills is not None:
            skills = np.asarray(self.base_skills, dtype=float)
            if skills.shape != (self.graph.n_experts,):
                raise ConfigError(
                    f"base_skills must have one entry per expert ({self.graph.n_experts})"
                )
            if np.any(skills < 0) or np.any(skills > 1):
                raise ConfigError("base_skills must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.fixed_concepts is None:
            if not (1 <= self.min_concepts <= self.max_concepts <= self.graph.n_concepts):
                raise ConfigError("need 1 <= min_concepts <= max_concepts <= n_concepts")
        last = -1
        for entry in self.drift:
            step = entry.get("step")
            if not isinstance(step, int) or step <= last:
                raise ConfigError("drift steps must be integers, strictly increasing")
            last = step
            if ("permutation" in entry) == ("delta" in entry):
                raise ConfigError("each drift entry needs exactly one of 'permutation' or 'delta'")
            if "permutation" in entry:
                perm = list(entry["permutation"])
                if sorted(perm) != list(range(self.graph.n_experts)):
                    raise ConfigError(f"drift at step {step}: not a permutation of expert indices")
            else:
                if len(entry["delta"]) != self.graph.n_experts:
                    raise ConfigError(f"drift at step {step}: delta must have one entry per expert")
        if self.team_size < 1 or self.routing_concepts < 1:
            raise ConfigError("team_size and routing_concepts must be >= 1")


@dataclass
class TaskContext:
    """Everything policies and the regret benchmark need for one step."""

    task: TaskSpec
    concepts: list[int]
    pool: list[int]
    candidates: list[tuple[int, ...]]
    best_key: tuple[int, ...]
    best_theta: float
    truncated: bool


class Environment:
    """Deterministic synthetic environment built by generate_environment."""

    def __init__(self, spec: EnvironmentSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.graph = spec.graph
        root = np.random.SeedSequence(entropy=(int(seed), 0xE17))
        skill_ss, task_ss, reward_ss = root.spawn(3)
        self._task_rng = np.random.default_rng(task_ss)
        self._reward_rng = np.random.default_rng(reward_ss)
        if spec.base_skills is not None:
            self.skills = np.asarray(spec.base_skills, dtype=float).copy()
        else:
            lo, hi = spec.skill_range
            self.skills = np.random.default_rng(skill_ss).uniform(lo, hi, self.graph.n_experts)
        self._drift_iter = list(spec.drift)
        self._epoch = 0
        self._task_counter = 0
        self._ctx_cache: dict[frozenset[int], TaskContext] = {}
        self._theta_cache: dict[tuple[tuple[int, ...], frozenset[int]], float] = {}
        self._expert_sets = {e.expert_id: e.concept_set for e in self.graph.experts}
        self._expert_index = {e.expert_id: i for i, e in enumerate(self.graph.experts)}

    def advance(self, step: int) -> None:
        """Apply any drift scheduled at this step."""
        changed = False
        while self._drift_iter and self._drift_iter[0]["step"] == step:
            entry = self._drift_iter.pop(0)
            if "permutation" in entry:
                self.skills = self.skills[np.asarray(entry["permutation"], dtype=int)]
            else:
                self.skills = np.clip(self.skills + np.asarray(entry["delta"], dtype=float), 0.0, 1.0)
            changed = True
        if changed:
            self._epoch += 1
            self._ctx_cache.clear()
            self._theta_cache.clear()

    def draw_task(self, step: int) -> TaskSpec:
        spec = self.spec
        n = self.graph.n_concepts
        requirement = np.zeros(n)
        if spec.fixed_concepts is not None:
            chosen = np.asarray(spec.fixed_concepts, dtype=int)
            weights = np.linspace(1.0, 0.8, len(chosen))
        else:
            count = int(self._task_rng.integers(spec.min_concepts, spec.max_concepts + 1))
            chosen = self._task_rng.choice(n, size=count, replace=False)
            weights = self._task_rng.uniform(ACTIVATION_THRESHOLD + 0.05, 1.0, size=count)
            weights[0] = 1.0
        requirement[chosen] = weights
        task = TaskSpec(task_id=f"t{step:06d}-{self._task_counter}", requirement=requirement)
        self._task_counter += 1
        return task

    def _noise(self, key: tuple[int, ...], concepts: frozenset[int]) -> float:
        if self.spec.noise_scale == 0.0:
            return 0.0
        payload = f"{self.seed}|{key}|{tuple(sorted(concepts))}".encode()
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        unit = int.from_bytes(digest, "big") / float(1 << 64)
        return self.spec.noise_scale * (2.0 * unit - 1.0)

    def theta_star(self, key: tuple[int, ...], concepts: frozenset[int]) -> float:
        """Ground-truth success probability of a team on a concept set."""
        cache_key = (key, concepts)
        got = self._theta_cache.get(cache_key)
        if got is not None:
            return got
        covered: frozenset[int] = frozenset()
        for eid in key:
            covered |= self._expert_sets[eid]
        coverage = concept_jaccard(covered, concepts)
        skill = float(np.mean([self.skills[self._expert_index[eid]] for eid in key]))
        value = min(max(coverage * skill + self._noise(key, concepts), 0.0), 1.0)
        self._theta_cache[cache_key] = value
        return value

    def context(self, task: TaskSpec) -> TaskContext:
        concepts_key = task.active_concepts
        ctx = self._ctx_cache.get(concepts_key)
        if ctx is not None:
            return ctx
        concepts = select_concepts(task, self.spec.routing_concepts)
        wanted = set(concepts)
        pool = sorted(eid for eid, cs in self._expert_sets.items() if cs & wanted)
        if not pool:
            raise ConfigError(f"task {task.task_id}: no expert covers concepts {concepts}")
        if len(pool) > ORACLE_POOL_CAP:
            raise BudgetError(
                f"eligible pool has {len(pool)} experts (> {ORACLE_POOL_CAP}); the exhaustive "
                "per-step benchmark is intractable - reduce routing_concepts or use a sparser graph"
            )
        size = min(self.spec.team_size, len(pool))
        candidates = [tuple(c) for c in itertools.combinations(pool, size)]
        best_key = None
        best_theta = -1.0
        for cand in candidates:
            theta = self.theta_star(cand, concepts_key)
            if theta > best_theta:
                best_theta = theta
                best_key = cand
        ctx = TaskContext(
            task=task,
            concepts=concepts,
            pool=pool,
            candidates=candidates,
            best_key=best_key,
            best_theta=best_theta,
            truncated=size < self.spec.team_size,
        )
        self._ctx_cache[concepts_key] = ctx
        return ctx

    def reward(self, theta: float) -> float:
        """Bernoulli outcome; one uniform draw per step regardless of policy."""
        return 1.0 if self._reward_rng.random() < theta else 0.0


def generate_environment(spec: EnvironmentSpec, seed: int) -> Environment:
    return Environment(spec, seed)


class Policy:
    """Base interface: select a team for a context, then learn from reward."""

    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        raise NotImplementedError

    def update(self, key: tuple[int, ...], reward: float, ctx: TaskContext, step: int) -> None:
        pass


class KabbPolicy(Policy):
    """Knowledge-aware Thompson sampling over teams."""

    def __init__(self, graph: KnowledgeGraph, config: BanditConfig, weights: DistanceWeights | None = None):
        self.graph = graph
        self.config = config
        self.weights = weights or DistanceWeights()
        self.synergy_model = SynergyModel.from_graph(graph)
        self.cache = DistanceCache(graph, self.weights, self.synergy_model)
        self.store = PosteriorStore(config)
        self._last: SelectionResult | None = None

    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        result = select_subset(
            self.store,
            ctx.task,
            self.graph,
            self.config,
            rng=rng,
            cache=self.cache,
            now=step,
            selected_concepts=ctx.concepts,
            pool=ctx.pool,
        )
        self._last = result
        return result.subset

    def update(self, key: tuple[int, ...], reward: float, ctx: TaskContext, step: int) -> None:
        km = self._last.km if self._last is not None and self._last.subset == key else 0.0
        update_posterior(self.store, key, reward, km, step, self.config)


class VanillaThompsonPolicy(Policy):
    """Classical Thompson sampling over teams, grown greedily.

    Independent implementation used as the knowledge-blind reference: one
    Beta draw per candidate extension in ascending-id order, argmax, and a
    plain (successes, failures) posterior update for the played team.
    """

    def __init__(self, team_size: int, alpha0: float = 1.0, beta0: float = 1.0):
        self.team_size = team_size
        self.alpha0 = alpha0
        self.beta0 = beta0
        self.posteriors: dict[tuple[int, ...], list[float]] = {}

    def _params(self, key: tuple[int, ...]) -> list[float]:
        return self.posteriors.get(key, [self.alpha0, self.beta0])

    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        members: list[int] = []
        remaining = list(ctx.pool)
        size = min(self.team_size, len(ctx.pool))
        for _ in range(size):
            best_eid = None
            best_draw = -math.inf
            for eid in remaining:
                key = tuple(sorted(members + [eid]))
                a, b = self._params(key)
                draw = float(rng.beta(a, b))
                if draw > best_draw:
                    best_draw = draw
                    best_eid = eid
            members.append(best_eid)
            remaining.remove(best_eid)
        return tuple(sorted(members))

    def update(self, key: tuple[int, ...], reward: float, ctx: TaskContext, step: int) -> None:
        params = self.posteriors.setdefault(key, [self.alpha0, self.beta0])
        params[0] += reward
        params[1] += 1.0 - reward


class Ucb1Policy(Policy):
    """UCB1 over candidate teams; unseen candidates are tried first."""

    def __init__(self, exploration: float = 1.0):
        self.exploration = exploration
        self.stats: dict[tuple[int, ...], list[float]] = {}  # key -> [plays, successes]
        self.t = 0

    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        self.t += 1
        for cand in ctx.candidates:
            if cand not in self.stats:
                return cand
        best_key = None
        best_index = -math.inf
        log_t = math.log(self.t)
        for cand in ctx.candidates:
            plays, successes = self.stats[cand]
            index = successes / plays + self.exploration * math.sqrt(2.0 * log_t / plays)
            if index > best_index:
                best_index = index
                best_key = cand
        return best_key

    def update(self, key: tuple[int, ...], reward: float, ctx: TaskContext, step: int) -> None:
        stats = self.stats.setdefault(key, [0.0, 0.0])
        stats[0] += 1.0
        stats[1] += reward


class EpsilonGreedyPolicy(Policy):
    """Uniform exploration with probability epsilon, else empirical argmax."""

    def __init__(self, epsilon: float = 0.1):
        self.epsilon = epsilon
        self.stats: dict[tuple[int, ...], list[float]] = {}

    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        if rng.random() < self.epsilon:
            return ctx.candidates[int(rng.integers(len(ctx.candidates)))]
        best_key = None
        best_mean = -math.inf
        for cand in ctx.candidates:
            plays, successes = self.stats.get(cand, (0.0, 0.0))
            mean = successes / plays if plays > 0 else 0.5
            if mean > best_mean:
                best_mean = mean
                best_key = cand
        return best_key

    def update(self, key: tuple[int, ...], reward: float, ctx: TaskContext, step: int) -> None:
        stats = self.stats.setdefault(key, [0.0, 0.0])
        stats[0] += 1.0
        stats[1] += reward


class RandomPolicy(Policy):
    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        return ctx.candidates[int(rng.integers(len(ctx.candidates)))]


class OraclePolicy(Policy):
    def select(self, ctx: TaskContext, step: int, rng: np.random.Generator) -> tuple[int, ...]:
        return ctx.best_key


def make_policy(spec: PolicySpec, env: Environment) -> Policy:
    if spec.kind == KABB:
        config = spec.bandit or BanditConfig(k=env.spec.team_size, m=env.spec.routing_concepts)
        if config.k != env.spec.team_size:
            raise ConfigError(
                f"kabb team size k={config.k} must match environment team_size={env.spec.team_size}"
            )
        return KabbPolicy(env.graph, config, spec.weights)
    if spec.kind == VANILLA_THOMPSON:
        return VanillaThompsonPolicy(env.spec.team_size)
    if spec.kind == UCB1:
        return Ucb1Policy(spec.exploration)
    if spec.kind == EPSILON_GREEDY:
        return EpsilonGreedyPolicy(spec.epsilon)
    if spec.kind == RANDOM:
        return RandomPolicy()
    if spec.kind == ORACLE:
        return OraclePolicy()
    raise ConfigError(f"unknown policy kind {spec.kind!r}")


@dataclass
class EpisodeLog:
    steps: np.ndarray
    task_ids: list[str]
    subset_keys: list[tuple[int, ...]]
    rewards: np.ndarray
    theta_chosen: np.ndarray
    theta_best: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.rewards))


@dataclass
class RegretCurve:
    instantaneous: np.ndarray
    cumulative: np.ndarray
    subset_keys: list[tuple[int, ...]]

    @property
    def terminal(self) -> float:
        return float(self.cumulative[-1])


def run(
    policy_spec: PolicySpec | Policy,
    env: Environment,
    T: int,
    seed: int,
) -> tuple[EpisodeLog, RegretCurve]:
    """Simulate T steps of one policy in one environment.

    Per step: draw a task, let the policy pick a team, emit a Bernoulli
    reward from the team's true success probability, update the policy.
    Instantaneous regret is the per-step oracle's probability minus the
    chosen team's.
    """
    if T < 1:
        raise ConfigError("T must be >= 1")
    policy = make_policy(policy_spec, env) if isinstance(policy_spec, PolicySpec) else policy_spec
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x901)))

    steps = np.arange(T)
    rewards = np.empty(T)
    theta_chosen = np.empty(T)
    theta_best = np.empty(T)
    inst = np.empty(T)
    task_ids: list[str] = []
    keys: list[tuple[int, ...]] = []

    for t in range(T):
        env.advance(t)
        task = env.draw_task(t)
        ctx = env.context(task)
        key = policy.select(ctx, t, rng)
        theta = env.theta_star(key, task.active_concepts)
        r = env.reward(theta)
        policy.update(key, r, ctx, t)
        task_ids.append(task.task_id)
        keys.append(key)
        rewards[t] = r
        theta_chosen[t] = theta
        theta_best[t] = ctx.best_theta
        inst[t] = ctx.best_theta - theta

    log = EpisodeLog(
        steps=steps,
        task_ids=task_ids,
        subset_keys=keys,
        rewards=rewards,
        theta_chosen=theta_chosen,
        theta_best=theta_best,
    )
    curve = RegretCurve(instantaneous=inst, cumulative=np.cumsum(inst), subset_keys=keys)
    return log, curve


def format_subset_key(key: tuple[int, ...]) -> str:
    return "-".join(str(e) for e in key)


CSV_COLUMNS = [
    "step",
    "task_id",
    "subset_key",
    "reward",
    "theta_star_chosen",
    "theta_star_best",
    "inst_regret",
    "cum_regret",
]


def episode_to_csv(log: EpisodeLog, curve: RegretCurve, float_fmt: str = "%.9g") -> str:
    """Render one run as CSV text with a stable column schema."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for i in range(len(log.steps)):
        writer.writerow(
            [
                int(log.steps[i]),
                log.task_ids[i],
                format_subset_key(log.subset_keys[i]),
                float_fmt % log.rewards[i],
                float_fmt % log.theta_chosen[i],
                float_fmt % log.theta_best[i],
                float_fmt % curve.instantaneous[i],
                float_fmt % curve.cumulative[i],
            ]
        )
    return buf.getvalue()


def loglog_slope(cumulative: np.ndarray) -> float:
    """LS slope of log R(t) vs log t over the second half of the run.

    Steps with zero cumulative regret are excluded; returns nan when fewer
    than two usable points remain (e.g. an oracle run).
    """
    T = len(cumulative)
    start = T // 2
    t = np.arange(1, T + 1)[start:]
    r = cumulative[start:]
    mask = r > 0
    if mask.sum() < 2:
        return float("nan")
    x = np.log(t[mask])
    y = np.log(r[mask])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


@dataclass
class RegretSummary:
    n_curves: int
    mean_curve: np.ndarray
    std_curve: np.ndarray
    terminal_mean: float
    terminal_std: float
    terminal_quantiles: dict[str, float]
    slope: float


def summarize(curves: Sequence[RegretCurve]) -> RegretSummary:
    """Aggregate equal-length regret curves across seeds."""
    if not curves:
        raise AggregationError("summarize requires at least one curve")
    lengths = {len(c.cumulative) for c in curves}
    if len(lengths) != 1:
        raise AggregationError(f"curves have mismatched lengths: {sorted(lengths)}")
    stacked = np.vstack([c.cumulative for c in curves])
    terminals = stacked[:, -1]
    mean_curve = stacked.mean(axis=0)
    quant_levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    quantiles = {f"q{int(q * 100)}": float(np.quantile(terminals, q)) for q in quant_levels}
    return RegretSummary(
        n_curves=len(curves),
        mean_curve=mean_curve,
        std_curve=stacked.std(axis=0),
        terminal_mean=float(terminals.mean()),
        terminal_std=float(terminals.std()),
        terminal_quantiles=quantiles,
        slope=loglog_slope(mean_curve),
    )
