"""Per-slot control loops, baselines and the seeded Monte Carlo harness.

Every controller works on an Environment whose slot has already begun and
returns the executed SlotRecord with its bookkeeping fields filled in. All
policies of one seed see the same channel and content realizations.
"""

import statistics
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import StrEnum
from pathlib import Path
from typing import Protocol

import numpy as np

from edge_offload_tool.actor import LearnedActor, save_checkpoint
from edge_offload_tool.bandwidth import solve_allocation
from edge_offload_tool.bo_critic import BoCritic, select_action
from edge_offload_tool.core import (
    ConfigError,
    DegradationAction,
    DomainError,
    FloatArray,
    StateTracker,
    SystemConfig,
    enumerate_actions,
    spawn_rng,
)
from edge_offload_tool.env import Environment, SlotRecord
from edge_offload_tool.logging_config import get_logger, get_trace_logger

logger = get_logger(__name__)
trace = get_trace_logger()

OPTIMALITY_GAP_WINDOW = 500


class PolicyKind(StrEnum):
    """Controllers available to run and bench."""

    LAB = "lab"
    IDEAL = "ideal"
    FULL_BO = "full_bo"
    DELAY_OBLI = "delay_obli"
    DELAY_MIN = "delay_min"
    RANDOM = "random"


class Controller(Protocol):
    def step(self, env: Environment) -> SlotRecord: ...


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1e3


def _check_enumerable(cfg: SystemConfig) -> None:
    if cfg.action_space_size > cfg.enumeration_cap:
        raise ConfigError(
            "system.enumeration_cap",
            f"A^N = {cfg.action_space_size} exceeds the cap of {cfg.enumeration_cap}",
        )


def fixed_policy(
    kind: PolicyKind, n_devices: int, n_levels: int, rng: np.random.Generator
) -> DegradationAction:
    """Action of a state-independent baseline.

    Example:
        >>> fixed_policy(PolicyKind.DELAY_MIN, 3, 4, np.random.default_rng(0)).levels
        (3, 3, 3)
    """
    if kind is PolicyKind.DELAY_OBLI:
        return DegradationAction((0,) * n_devices)
    if kind is PolicyKind.DELAY_MIN:
        return DegradationAction((n_levels - 1,) * n_devices)
    if kind is PolicyKind.RANDOM:
        return DegradationAction(tuple(int(a) for a in rng.integers(0, n_levels, n_devices)))
    raise DomainError(f"{kind} is not a fixed policy")


class FixedController:
    """DelayObli, DelayMin and Random: pick an action, allocate, execute."""

    def __init__(self, cfg: SystemConfig, kind: PolicyKind, seed: int) -> None:
        self.cfg = cfg
        self.kind = kind
        self._rng = spawn_rng(seed, "policy")

    def step(self, env: Environment) -> SlotRecord:
        start = time.perf_counter()
        action = fixed_policy(self.kind, self.cfg.n_devices, self.cfg.n_levels, self._rng)
        allocation = solve_allocation(env.allocation_problem(action))
        decision_ms = _elapsed_ms(start)
        record = env.execute_slot(action, allocation.fractions)
        return replace(record, decision_ms=decision_ms, evaluations=1)


class IdealController:
    """Exhaustive search of the true utility over all A^N actions."""

    def __init__(self, cfg: SystemConfig) -> None:
        _check_enumerable(cfg)
        self.cfg = cfg
        self.actions = list(enumerate_actions(cfg.n_devices, cfg.n_levels))

    def step(self, env: Environment) -> SlotRecord:
        start = time.perf_counter()
        best = env.execute_action(self.actions[0])
        for action in self.actions[1:]:
            record = env.execute_action(action)
            if record.total_utility > best.total_utility:
                best = record
        return replace(best, decision_ms=_elapsed_ms(start), evaluations=len(self.actions))


class FullBoController:
    """Critic-only baseline: the acquisition is maximized over the full action space."""

    def __init__(self, cfg: SystemConfig) -> None:
        _check_enumerable(cfg)
        self.cfg = cfg
        self.actions = list(enumerate_actions(cfg.n_devices, cfg.n_levels))
        self.critic = BoCritic(cfg.n_devices, cfg.critic)

    def step(self, env: Environment) -> SlotRecord:
        ctx = env.context
        start = time.perf_counter()
        action, k_star, _ = select_action(self.actions, ctx.gains, ctx.t, self.critic)
        allocation = solve_allocation(env.allocation_problem(action))
        decision_ms = _elapsed_ms(start)
        record = env.execute_slot(action, allocation.fractions)

        self.critic.observe(ctx.gains, action, ctx.t, record.total_utility)
        if ctx.t % self.cfg.critic.refit_interval == 0:
            self.critic.refit()
        return replace(
            record,
            k_t=len(self.actions),
            k_star=k_star,
            decision_ms=decision_ms,
            evaluations=len(self.actions),
        )


class LabController:
    """Actor proposes, critic ranks, the allocator sizes the bandwidth."""

    def __init__(self, cfg: SystemConfig, seed: int) -> None:
        self.cfg = cfg
        self.actor = LearnedActor(cfg, seed)
        self.critic = BoCritic(cfg.n_devices, cfg.critic)
        self.tracker = StateTracker(cfg.n_devices, cfg.actor.history_length)

    def step(self, env: Environment) -> SlotRecord:
        ctx = env.context
        t = ctx.t
        start = time.perf_counter()
        state = self.tracker.observe(ctx.gains, t)
        features, candidates = self.actor.propose(state, t)
        action, k_star, _ = select_action(candidates.actions, ctx.gains, t, self.critic)
        allocation = solve_allocation(env.allocation_problem(action))
        decision_ms = _elapsed_ms(start)
        record = env.execute_slot(action, allocation.fractions)

        self.critic.observe(ctx.gains, action, t, record.total_utility)
        self.actor.learn(features, action, k_star, t)
        if t % self.cfg.critic.refit_interval == 0:
            self.critic.refit()
        self.tracker.record_feedback(
            record.confidences, record.latencies, action, record.bandwidth, record.total_utility
        )
        return replace(
            record,
            k_t=len(candidates),
            k_star=k_star,
            decision_ms=decision_ms,
            evaluations=len(candidates),
        )


def make_controller(cfg: SystemConfig, policy: PolicyKind, seed: int) -> Controller:
    policy = PolicyKind(policy)
    if policy is PolicyKind.LAB:
        return LabController(cfg, seed)
    if policy is PolicyKind.IDEAL:
        return IdealController(cfg)
    if policy is PolicyKind.FULL_BO:
        return FullBoController(cfg)
    return FixedController(cfg, policy, seed)


# Results -------------------------------------------------------------------


@dataclass(frozen=True)
class RunAggregates:
    """Long-term averages of one run.

    Latency, confidence and accuracy are summed over devices per slot, then
    averaged over slots like the utility.
    """

    mean_utility: float  # U bar
    mean_latency: float  # tau bar, seconds
    mean_confidence: float  # alpha bar
    mean_accuracy: float  # c bar
    mean_candidates: float  # K bar
    mean_decision_ms: float
    evaluations_per_slot: float

    def to_dict(self) -> dict[str, float]:
        return {
            "mean_utility": self.mean_utility,
            "mean_latency": self.mean_latency,
            "mean_confidence": self.mean_confidence,
            "mean_accuracy": self.mean_accuracy,
            "mean_candidates": self.mean_candidates,
            "mean_decision_ms": self.mean_decision_ms,
            "evaluations_per_slot": self.evaluations_per_slot,
        }


def aggregate(records: Sequence[SlotRecord]) -> RunAggregates:
    """Aggregates of a record stream; averages are plain 1/T sums."""
    if not records:
        raise DomainError("cannot aggregate an empty run")
    horizon = len(records)
    return RunAggregates(
        mean_utility=sum(r.total_utility for r in records) / horizon,
        mean_latency=sum(float(np.sum(r.latencies)) for r in records) / horizon,
        mean_confidence=sum(float(np.sum(r.confidences)) for r in records) / horizon,
        mean_accuracy=sum(float(np.sum(r.accuracies)) for r in records) / horizon,
        mean_candidates=sum(r.k_t for r in records) / horizon,
        mean_decision_ms=sum(r.decision_ms for r in records) / horizon,
        evaluations_per_slot=sum(r.evaluations for r in records) / horizon,
    )


@dataclass(frozen=True, eq=False)
class RunResult:
    """Records and aggregates of one (policy, seed) run."""

    policy: PolicyKind
    seed: int
    records: tuple[SlotRecord, ...]
    aggregates: RunAggregates

    @property
    def utilities(self) -> FloatArray:
        return np.array([r.total_utility for r in self.records])

    def to_dict(self) -> dict[str, object]:
        return {"policy": str(self.policy), "seed": self.seed, **self.aggregates.to_dict()}


def pooled(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of every aggregate across seeds."""
    if not results:
        raise DomainError("no results to pool")
    rows = [r.aggregates.to_dict() for r in results]
    out: dict[str, dict[str, float]] = {}
    for key in rows[0]:
        values = [row[key] for row in rows]
        out[key] = {
            "mean": statistics.fmean(values),
            "stddev": statistics.stdev(values) if len(values) >= 2 else 0.0,
        }
    return out


# Harness -------------------------------------------------------------------


def run_experiment(
    cfg: SystemConfig, policy: PolicyKind | str, seed: int, checkpoint: Path | None = None
) -> RunResult:
    """Run one policy for cfg.horizon slots on a freshly seeded environment.

    For LAB runs a checkpoint path receives the trained actor network.
    """
    policy = PolicyKind(policy)
    logger.info("Running %s, seed %d, %d slots", policy, seed, cfg.horizon)
    env = Environment(cfg, seed)
    controller = make_controller(cfg, policy, seed)
    records: list[SlotRecord] = []
    for _ in range(cfg.horizon):
        env.begin_slot()
        record = controller.step(env)
        trace.debug(
            "%s t=%d action=%s K=%d k*=%d U=%.6f",
            policy,
            record.t,
            record.action.levels,
            record.k_t,
            record.k_star,
            record.total_utility,
        )
        records.append(record)
    if checkpoint is not None and isinstance(controller, LabController):
        save_checkpoint(controller.actor.net, checkpoint)
    result = RunResult(policy, seed, tuple(records), aggregate(records))
    logger.info(
        "Finished %s, seed %d: U=%.4f latency=%.4fs K=%.2f",
        policy,
        seed,
        result.aggregates.mean_utility,
        result.aggregates.mean_latency,
        result.aggregates.mean_candidates,
    )
    return result


def checkpoint_path(directory: Path, seed: int) -> Path:
    return directory / f"actor-s{seed}.npz"


def run_seeds(
    cfg: SystemConfig,
    policy: PolicyKind | str,
    seeds: Sequence[int],
    jobs: int = 1,
    checkpoint_dir: Path | None = None,
) -> list[RunResult]:
    """Run one policy for every seed; results come back in seed order."""
    policy = PolicyKind(policy)
    paths = [
        checkpoint_path(checkpoint_dir, s) if checkpoint_dir is not None else None for s in seeds
    ]
    if jobs <= 1 or len(seeds) <= 1:
        return [run_experiment(cfg, policy, s, p) for s, p in zip(seeds, paths, strict=True)]
    n = len(seeds)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_experiment, [cfg] * n, [policy] * n, list(seeds), paths))


def trailing_mean(series: FloatArray, window: int) -> FloatArray:
    """Mean over the last `window` entries up to and including each index.

    Example:
        >>> trailing_mean(np.array([1.0, 3.0, 5.0]), 2)
        array([1., 2., 4.])
    """
    if window < 1:
        raise DomainError("window must be >= 1")
    csum = np.concatenate([[0.0], np.cumsum(series)])
    idx = np.arange(1, series.size + 1)
    lo = np.maximum(idx - window, 0)
    result: FloatArray = (csum[idx] - csum[lo]) / (idx - lo)
    return result


def optimality_gap(
    lab: RunResult, ideal: RunResult, window: int = OPTIMALITY_GAP_WINDOW
) -> tuple[FloatArray, FloatArray]:
    """Per-slot gap U*_t - U_t and its trailing-window average.

    The first window - 1 slots average over the slots available so far.

    Raises:
        DomainError: If the runs are not paired (seed or horizon differ)
    """
    if lab.seed != ideal.seed or len(lab.records) != len(ideal.records):
        raise DomainError("optimality gap needs runs with the same seed and horizon")
    if window < 1:
        raise DomainError("window must be >= 1")
    gap = ideal.utilities - lab.utilities
    return gap, trailing_mean(gap, window)
