"""Numerical verification suites behind the `selftest` command.

Each suite compares a production routine against an independent reference
(brute-force bisection, dense linear algebra, finite differences) on random
instances and reports one Check per requirement: the measured metric, its
threshold and the verdict.
"""

import math
import statistics
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from edge_offload_tool.actor import (
    AdamOptimizer,
    PreferenceNet,
    ReplayMemory,
    train_step,
)
from edge_offload_tool.bandwidth import (
    BRANCH_POINT,
    AllocationProblem,
    lambert_w0,
    oracle_allocation,
    solve_allocation,
    stationarity_residual,
    tight_rate_residual,
)
from edge_offload_tool.bo_critic import (
    GpInputs,
    KernelParams,
    fit_posterior,
    kernel_matrix,
    log_marginal_likelihood,
    log_marginal_likelihood_gradient,
    posterior,
)
from edge_offload_tool.core import DomainError, FloatArray, SystemConfig
from edge_offload_tool.env import data_size_bits, mean_channel_gain
from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Check:
    """Outcome of one requirement: measured value against an upper bound."""

    suite: str
    name: str
    measured: float
    threshold: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.measured) and self.measured <= self.threshold

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def describe(self) -> str:
        return (
            f"{self.status}  {self.suite}: {self.name} = {self.measured:.3e} "
            f"(<= {self.threshold:.0e})"
        )


@dataclass(frozen=True)
class SelftestScale:
    """Instance counts of every suite."""

    bandwidth_instances: int = 1000
    lambert_points: int = 1_000_000
    gp_caches: int = 50
    gp_max_cache: int = 64
    training_steps: int = 100

    @classmethod
    def quick(cls) -> "SelftestScale":
        return cls(bandwidth_instances=100, lambert_points=10_000, gp_caches=10)


# Bandwidth -----------------------------------------------------------------


def random_problem(rng: np.random.Generator, n_devices: int) -> AllocationProblem:
    """Heterogeneous instance: random distances, fading, levels, powers and weights."""
    cfg = SystemConfig()
    distances = rng.uniform(5.0, 60.0, n_devices)
    gains = mean_channel_gain(distances, cfg) * rng.exponential(1.0, n_devices)
    levels = rng.integers(0, cfg.n_levels, n_devices)
    data = [float(data_size_bits(cfg.native_resolution[0], int(a))) for a in levels]
    return AllocationProblem(
        data_bits=np.array(data),
        gains=gains,
        powers=rng.uniform(0.05, 0.2, n_devices),
        weights=rng.uniform(0.5, 2.0, n_devices),
        bandwidth_hz=cfg.bandwidth_hz,
        noise_psd=cfg.noise_psd_w_per_hz,
    )


def bandwidth_suite(scale: SelftestScale, rng: np.random.Generator) -> list[Check]:
    gaps, deltas, budgets, tight, stationary, times = [], [], [], [], [], []
    for _ in range(scale.bandwidth_instances):
        problem = random_problem(rng, int(rng.integers(1, 9)))
        start = time.perf_counter()
        solved = solve_allocation(problem)
        times.append((time.perf_counter() - start) * 1e3)
        reference = oracle_allocation(problem)

        gaps.append(abs(solved.objective - reference.objective) / reference.objective)
        deltas.append(float(np.max(np.abs(solved.fractions - reference.fractions))))
        budgets.append(abs(float(solved.fractions.sum()) - 1.0))
        tight.append(float(np.max(tight_rate_residual(problem, solved))))
        residuals = [
            stationarity_residual(
                float(solved.fractions[n]),
                solved.eta,
                float(solved.phi[n]),
                float(problem.powers[n]),
                float(problem.gains[n]),
                problem.bandwidth_hz,
                problem.noise_psd,
            )
            / solved.eta
            for n in range(problem.n_devices)
        ]
        stationary.append(max(abs(r) for r in residuals))

    suite = "bandwidth"
    return [
        Check(suite, "objective relative gap to oracle", max(gaps), 1e-6),
        Check(suite, "max |b - b_oracle|", max(deltas), 1e-6),
        Check(suite, "|sum b - 1|", max(budgets), 1e-9),
        Check(suite, "tight-rate relative residual", max(tight), 1e-9),
        Check(suite, "stationarity residual / eta", max(stationary), 1e-9),
        Check(suite, "median solve time [ms]", statistics.median(times), 1.0),
    ]


# Lambert-W -----------------------------------------------------------------


def lambert_suite(scale: SelftestScale) -> list[Check]:
    half = max(scale.lambert_points // 2, 2)
    x = np.concatenate(
        [np.linspace(BRANCH_POINT + 1e-12, 1.0, half), np.geomspace(1.0, 1e6, half)]
    )
    w = lambert_w0(x)
    residual = np.abs(w * np.exp(w) - x) / np.maximum(np.abs(x), np.finfo(float).tiny)
    return [Check("lambert_w", "relative residual |W e^W - x| / |x|", float(residual.max()), 1e-12)]


# Gaussian process -------------------------------------------------------------


def _random_cache(
    rng: np.random.Generator, size: int, n_dims: int, n_levels: int = 4
) -> tuple[GpInputs, FloatArray, KernelParams]:
    inputs = GpInputs(
        rng.normal(size=(size, n_dims)),
        rng.integers(0, n_levels, size=(size, n_dims)),
        np.sort(rng.choice(10 * size, size=size, replace=False)),
    )
    theta = KernelParams(
        signal_var=float(rng.uniform(0.5, 2.0)),
        length_scales=tuple(rng.uniform(0.5, 2.0, n_dims)),
        action_var=float(rng.uniform(0.5, 2.0)),
        decay=float(rng.uniform(0.001, 0.1)),
        noise_std=float(rng.uniform(0.1, 0.5)),
    )
    return inputs, rng.normal(size=size), theta


def _naive_posterior(
    inputs: GpInputs, y: FloatArray, theta: KernelParams, queries: GpInputs
) -> tuple[FloatArray, FloatArray, float]:
    """Posterior and log marginal likelihood through an explicit inverse."""
    gram = kernel_matrix(inputs, inputs, theta) + theta.noise_std**2 * np.eye(len(inputs))
    inverse = np.linalg.inv(gram)
    cross = kernel_matrix(queries, inputs, theta)
    mean = cross @ inverse @ y
    var = np.diag(kernel_matrix(queries, queries, theta) - cross @ inverse @ cross.T)
    _, log_det = np.linalg.slogdet(gram)
    lml = -0.5 * y @ inverse @ y - 0.5 * log_det - 0.5 * len(inputs) * _LOG_2PI
    return mean, var, float(lml)


def _central_difference(f: Callable[[FloatArray], float], x: FloatArray, step: float) -> FloatArray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return grad


def _relative_error(actual: FloatArray, expected: FloatArray) -> float:
    return float(np.linalg.norm(actual - expected) / max(float(np.linalg.norm(expected)), 1e-12))


def gp_suite(scale: SelftestScale, rng: np.random.Generator) -> list[Check]:
    mean_err, var_err, lml_err, min_eig, grad_err = [], [], [], [], []
    for _ in range(scale.gp_caches):
        size = int(rng.integers(5, scale.gp_max_cache + 1))
        n_dims = int(rng.integers(1, 4))
        inputs, y, theta = _random_cache(rng, size, n_dims)
        queries, _, _ = _random_cache(rng, 8, n_dims)

        gp = fit_posterior(inputs, y, theta)
        mean, var = posterior(gp, queries)
        naive_mean, naive_var, naive_lml = _naive_posterior(inputs, y, theta, queries)
        mean_err.append(float(np.max(np.abs(mean - naive_mean))))
        var_err.append(float(np.max(np.abs(var - np.maximum(naive_var, 0.0)))))
        lml_err.append(abs(log_marginal_likelihood(inputs, y, theta) - naive_lml))
        min_eig.append(float(np.linalg.eigvalsh(kernel_matrix(inputs, inputs, theta)).min()))

        _, analytic = log_marginal_likelihood_gradient(inputs, y, theta)

        def lml_at(v: FloatArray) -> float:
            return log_marginal_likelihood(inputs, y, KernelParams.from_vector(v))

        numeric = _central_difference(lml_at, theta.to_vector(), 1e-5)
        grad_err.append(_relative_error(analytic, numeric))

    suite = "gp"
    return [
        Check(suite, "posterior mean vs dense inverse", max(mean_err), 1e-8),
        Check(suite, "posterior variance vs dense inverse", max(var_err), 1e-8),
        Check(suite, "log marginal likelihood vs dense", max(lml_err), 1e-8),
        Check(suite, "negated smallest Gram eigenvalue", -min(min_eig), 1e-8),
        Check(suite, "LML gradient vs finite differences", max(grad_err), 1e-4),
    ]


# Actor -----------------------------------------------------------------------


def actor_suite(scale: SelftestScale, rng: np.random.Generator) -> list[Check]:
    """Two devices, two levels, one hidden layer of width 4."""
    n_inputs, n_outputs = 5, 4
    net = PreferenceNet([n_inputs, 4, n_outputs], rng)
    x = rng.normal(size=(6, n_inputs))
    targets = rng.integers(0, 2, size=(6, n_outputs)).astype(np.float64)
    _, grads = net.loss_and_gradients(x, targets)

    errors = []
    for param, grad in zip(net.parameters, grads, strict=True):
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + 1e-6
            plus, _ = net.loss_and_gradients(x, targets)
            param[idx] = saved - 1e-6
            minus, _ = net.loss_and_gradients(x, targets)
            param[idx] = saved
            numeric[idx] = (plus - minus) / 2e-6
        errors.append(_relative_error(grad, numeric))

    # Frozen replay snapshot: the loss trend must go down
    memory = ReplayMemory(64)
    for _ in range(64):
        features = rng.normal(size=n_inputs)
        memory.add(features, (features[:n_outputs] > 0).astype(np.float64))
    trained = PreferenceNet([n_inputs, 4, n_outputs], rng)
    optimizer = AdamOptimizer(0.01)
    losses = []
    for _ in range(scale.training_steps):
        loss = train_step(memory, trained, optimizer, 16, rng)
        if loss is None:
            raise DomainError("replay memory holds fewer samples than one batch")
        losses.append(loss)
    window = max(scale.training_steps // 10, 1)
    head = statistics.fmean(losses[:window])
    tail = statistics.fmean(losses[-window:])

    suite = "actor"
    return [
        Check(suite, "BCE gradient vs finite differences", max(errors), 1e-4),
        Check(suite, "late/early moving-average loss ratio", tail / head, 1.0 - 1e-3),
    ]


def run_selftest(scale: SelftestScale | None = None, seed: int = 0) -> list[Check]:
    """Run every suite and return the checks in report order."""
    scale = scale or SelftestScale()
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    for name, suite in (
        ("bandwidth", lambda: bandwidth_suite(scale, rng)),
        ("lambert_w", lambda: lambert_suite(scale)),
        ("gp", lambda: gp_suite(scale, rng)),
        ("actor", lambda: actor_suite(scale, rng)),
    ):
        start = time.perf_counter()
        results = suite()
        logger.info("Suite %s finished in %.2fs", name, time.perf_counter() - start)
        checks.extend(results)
    return checks
