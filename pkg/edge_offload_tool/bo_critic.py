"""Gaussian-process critic over (channel, action, slot) inputs.

The surrogate models the slot utility with a zero-mean GP whose kernel
combines an ARD squared-exponential term on the channel, a categorical
overlap term on the degradation levels and their product, all damped by a
temporal decay:

    k(z, z') = (1 - rho)^(|i - i'| / 2) * (R + C + R * C)
    R = v_h exp(-1/2 sum_n ((h_n - h'_n) / l_n)^2)
    C = (v_a / N) sum_n 1[a_n == a'_n]

Hyperparameters are refit by maximizing the log marginal likelihood with
L-BFGS-B on an unconstrained (log / logit) parameterization.
"""

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import norm

from edge_offload_tool.core import (
    AcquisitionKind,
    CriticConfig,
    DegradationAction,
    DomainError,
    FloatArray,
    GradientMode,
    NumericalError,
)
from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
VARIANCE_TOLERANCE = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)
_MIN_NOISE = 1e-8
_LOGIT_EPS = 1e-12

# Box bounds on the reparameterized vector
_LOG_SCALE_BOUNDS = (math.log(1e-3), math.log(1e3))
_LOG_LENGTH_BOUNDS = (math.log(1e-2), math.log(1e2))
_LOGIT_DECAY_BOUNDS = (math.log(1e-5 / (1 - 1e-5)), math.log((1 - 1e-5) / 1e-5))
_LOG_NOISE_BOUNDS = (math.log(1e-4), math.log(10.0))


def _logit(p: float) -> float:
    p = min(max(p, _LOGIT_EPS), 1.0 - _LOGIT_EPS)
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class KernelParams:
    """Composite-kernel hyperparameters."""

    signal_var: float  # v_h
    length_scales: tuple[float, ...]  # l, one per device
    action_var: float  # v_a
    decay: float  # rho
    noise_std: float  # sigma_eps

    def __post_init__(self) -> None:
        object.__setattr__(self, "length_scales", tuple(float(x) for x in self.length_scales))
        if self.signal_var <= 0 or self.action_var <= 0:
            raise DomainError("kernel scales must be > 0")
        if not self.length_scales or any(ell <= 0 for ell in self.length_scales):
            raise DomainError("length scales must be > 0")
        if not 0 <= self.decay < 1:
            raise DomainError(f"decay must be in [0, 1), got {self.decay}")
        if self.noise_std < 0:
            raise DomainError(f"noise std must be >= 0, got {self.noise_std}")

    @property
    def n_dims(self) -> int:
        return len(self.length_scales)

    def to_vector(self) -> FloatArray:
        """[log v_h, log l_1..l_N, log v_a, logit rho, log sigma_eps]."""
        return np.array(
            [
                math.log(self.signal_var),
                *(math.log(ell) for ell in self.length_scales),
                math.log(self.action_var),
                _logit(self.decay),
                math.log(max(self.noise_std, _MIN_NOISE)),
            ]
        )

    @classmethod
    def from_vector(cls, vector: FloatArray) -> "KernelParams":
        v = np.asarray(vector, dtype=np.float64)
        n = v.size - 4
        if n < 1:
            raise DomainError(f"parameter vector too short: {v.size}")
        return cls(
            signal_var=math.exp(v[0]),
            length_scales=tuple(np.exp(v[1 : 1 + n])),
            action_var=math.exp(v[1 + n]),
            decay=float(expit(v[2 + n])),
            noise_std=math.exp(v[3 + n]),
        )

    def bounds(self) -> list[tuple[float, float]]:
        """L-BFGS-B box on the reparameterized vector."""
        return [
            _LOG_SCALE_BOUNDS,
            *([_LOG_LENGTH_BOUNDS] * self.n_dims),
            _LOG_SCALE_BOUNDS,
            _LOGIT_DECAY_BOUNDS,
            _LOG_NOISE_BOUNDS,
        ]

    def to_dict(self) -> dict[str, object]:
        return {
            "signal_var": self.signal_var,
            "length_scales": list(self.length_scales),
            "action_var": self.action_var,
            "decay": self.decay,
            "noise_std": self.noise_std,
        }


@dataclass(frozen=True, eq=False)
class GpInputs:
    """A batch of GP inputs: transformed channel features, levels and slot indices."""

    features: FloatArray  # (J, N)
    levels: FloatArray  # (J, N), integer-valued
    slots: FloatArray  # (J,)

    def __post_init__(self) -> None:
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        levels = np.atleast_2d(np.asarray(self.levels, dtype=np.float64))
        slots = np.atleast_1d(np.asarray(self.slots, dtype=np.float64))
        if features.shape != levels.shape or slots.shape != (features.shape[0],):
            raise DomainError(
                f"inconsistent GP inputs: features {features.shape}, "
                f"levels {levels.shape}, slots {slots.shape}"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "slots", slots)

    def __len__(self) -> int:
        return int(self.slots.size)

    @property
    def n_dims(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def empty(cls, n_dims: int) -> "GpInputs":
        return cls(np.zeros((0, n_dims)), np.zeros((0, n_dims)), np.zeros(0))


# Kernel --------------------------------------------------------------------


def _check_dims(first: GpInputs, second: GpInputs, theta: KernelParams) -> None:
    if first.n_dims != theta.n_dims or second.n_dims != theta.n_dims:
        raise DomainError(
            f"input dimension {first.n_dims}/{second.n_dims} does not match "
            f"{theta.n_dims} length scales"
        )


def _kernel_parts(
    first: GpInputs, second: GpInputs, theta: KernelParams
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """Returns (R, C, T, scaled squared differences per dimension)."""
    _check_dims(first, second, theta)
    ell = np.asarray(theta.length_scales)
    diff = (first.features[:, None, :] - second.features[None, :, :]) / ell
    sq = diff**2
    rbf = theta.signal_var * np.exp(-0.5 * sq.sum(axis=2))
    matches = (first.levels[:, None, :] == second.levels[None, :, :]).mean(axis=2)
    cat = theta.action_var * matches
    lag = np.abs(first.slots[:, None] - second.slots[None, :])
    temporal = (1.0 - theta.decay) ** (lag / 2.0)
    return rbf, cat, temporal, sq


def kernel_matrix(first: GpInputs, second: GpInputs, theta: KernelParams) -> FloatArray:
    """Cross-covariance between two input batches."""
    rbf, cat, temporal, _ = _kernel_parts(first, second, theta)
    return np.asarray(temporal * (rbf + cat + rbf * cat))


def kernel(first: GpInputs, second: GpInputs, theta: KernelParams) -> float:
    """Covariance of two single inputs.

    Example:
        >>> theta = KernelParams(1.0, (1.0,), 2.0, 0.1, 0.1)
        >>> z = GpInputs([[0.0]], [[1]], [3])
        >>> kernel(z, z, theta)
        5.0
    """
    if len(first) != 1 or len(second) != 1:
        raise DomainError("kernel() takes single inputs; use kernel_matrix() for batches")
    return float(kernel_matrix(first, second, theta)[0, 0])


def prior_variance(theta: KernelParams) -> float:
    """k(z, z): identical channel, identical levels, zero lag."""
    return theta.signal_var + theta.action_var + theta.signal_var * theta.action_var


# Posterior -----------------------------------------------------------------


def _factorize(gram: FloatArray) -> tuple[tuple[FloatArray, bool], float]:
    """Cholesky factor of a covariance matrix, escalating diagonal jitter on failure."""
    eye = np.eye(gram.shape[0])
    for jitter in JITTER_LADDER:
        try:
            factor = cho_factor(gram + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if jitter > 0:
            logger.warning("Gram matrix needed jitter %.0e to factorize", jitter)
        return factor, jitter
    raise NumericalError(
        f"Cholesky factorization failed with jitter up to {JITTER_LADDER[-1]:.0e}"
    )


@dataclass(frozen=True, eq=False)
class GpPosterior:
    """Factorized training covariance and weights, ready for queries."""

    theta: KernelParams
    inputs: GpInputs
    factor: tuple[FloatArray, bool] | None
    alpha: FloatArray
    jitter: float
    y_offset: float = 0.0

    def __len__(self) -> int:
        return len(self.inputs)


def fit_posterior(
    inputs: GpInputs, targets: FloatArray, theta: KernelParams, y_offset: float = 0.0
) -> GpPosterior:
    """Condition the GP on (inputs, targets).

    Args:
        inputs: Training inputs
        targets: Observed utilities, same length as inputs
        theta: Kernel hyperparameters
        y_offset: Constant prior mean subtracted from the targets

    Returns:
        GpPosterior; an empty training set yields the prior

    Raises:
        NumericalError: If the Gram matrix cannot be factorized
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != (len(inputs),):
        raise DomainError(f"expected {len(inputs)} targets, got {y.shape}")
    if len(inputs) == 0:
        return GpPosterior(theta, inputs, None, np.zeros(0), 0.0, y_offset)
    gram = kernel_matrix(inputs, inputs, theta) + theta.noise_std**2 * np.eye(len(inputs))
    factor, jitter = _factorize(gram)
    alpha = cho_solve(factor, y - y_offset, check_finite=False)
    return GpPosterior(theta, inputs, factor, alpha, jitter, y_offset)


def posterior(gp: GpPosterior, queries: GpInputs) -> tuple[FloatArray, FloatArray]:
    """Posterior mean and variance of the latent utility at every query.

    Variances within VARIANCE_TOLERANCE below zero are clamped to 0.
    """
    prior = np.full(len(queries), prior_variance(gp.theta))
    if gp.factor is None:
        return np.full(len(queries), gp.y_offset), prior
    cross = kernel_matrix(queries, gp.inputs, gp.theta)
    mean = gp.y_offset + cross @ gp.alpha
    v = solve_triangular(gp.factor[0], cross.T, lower=True, check_finite=False)
    var = prior - np.sum(v**2, axis=0)
    if np.any(var < -VARIANCE_TOLERANCE):
        logger.warning("negative posterior variance %.3g clamped", float(var.min()))
    return mean, np.maximum(var, 0.0)


# Acquisition ---------------------------------------------------------------


def acquisition(
    mean: FloatArray | float,
    std: FloatArray | float,
    kind: AcquisitionKind,
    exploration: float,
    best_y: float,
) -> FloatArray:
    """UCB, expected improvement or probability of improvement (vectorized).

    With zero std, EI reduces to max(mean - best_y, 0) and PI to an indicator.
    """
    mu = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(std, dtype=np.float64)
    if np.any(sigma < 0):
        raise DomainError("std must be >= 0")
    kind = AcquisitionKind(kind)
    if kind is AcquisitionKind.UCB:
        return np.asarray(mu + exploration * sigma)

    improvement = mu - best_y
    positive = sigma > 0
    safe_sigma = np.where(positive, sigma, 1.0)
    z = improvement / safe_sigma
    if kind is AcquisitionKind.EI:
        ei = improvement * norm.cdf(z) + safe_sigma * norm.pdf(z)
        return np.asarray(np.where(positive, ei, np.maximum(improvement, 0.0)))
    return np.asarray(np.where(positive, norm.cdf(z), (improvement > 0).astype(np.float64)))


# Marginal likelihood -------------------------------------------------------


def log_marginal_likelihood(inputs: GpInputs, targets: FloatArray, theta: KernelParams) -> float:
    """log p(y | Z, theta), including the -(J/2) log 2 pi constant."""
    y = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise DomainError("log marginal likelihood needs at least one observation")
    gram = kernel_matrix(inputs, inputs, theta) + theta.noise_std**2 * np.eye(len(inputs))
    factor, _ = _factorize(gram)
    alpha = cho_solve(factor, y, check_finite=False)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return float(-0.5 * y @ alpha - 0.5 * log_det - 0.5 * len(inputs) * _LOG_2PI)


def log_marginal_likelihood_gradient(
    inputs: GpInputs, targets: FloatArray, theta: KernelParams
) -> tuple[float, FloatArray]:
    """Value and gradient with respect to KernelParams.to_vector().

    Uses d log p = 1/2 tr((alpha alpha^T - K^-1) dK).
    """
    y = np.asarray(targets, dtype=np.float64)
    j = len(inputs)
    if j == 0:
        raise DomainError("log marginal likelihood needs at least one observation")
    rbf, cat, temporal, sq = _kernel_parts(inputs, inputs, theta)
    noise_var = theta.noise_std**2
    gram = temporal * (rbf + cat + rbf * cat) + noise_var * np.eye(j)
    factor, _ = _factorize(gram)
    alpha = cho_solve(factor, y, check_finite=False)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    value = float(-0.5 * y @ alpha - 0.5 * log_det - 0.5 * j * _LOG_2PI)

    inner = np.outer(alpha, alpha) - cho_solve(factor, np.eye(j), check_finite=False)

    def half_trace(dk: FloatArray) -> float:
        return 0.5 * float(np.sum(inner * dk))

    lag = np.abs(inputs.slots[:, None] - inputs.slots[None, :])
    grads = [half_trace(temporal * (rbf + rbf * cat))]
    for d in range(theta.n_dims):
        grads.append(half_trace(temporal * rbf * sq[:, :, d] * (1.0 + cat)))
    grads.append(half_trace(temporal * (cat + rbf * cat)))
    grads.append(half_trace(-(lag / 2.0) * theta.decay * temporal * (rbf + cat + rbf * cat)))
    grads.append(half_trace(2.0 * noise_var * np.eye(j)))
    return value, np.asarray(grads)


def initial_params(features: FloatArray) -> KernelParams:
    """Data-scaled starting point: length scales from the per-dimension spread."""
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if h.shape[0] >= 2:
        spread = h.std(axis=0)
        lengths = tuple(float(s) if s > 1e-12 else 1.0 for s in spread)
    else:
        lengths = (1.0,) * h.shape[1]
    return KernelParams(
        signal_var=1.0, length_scales=lengths, action_var=1.0, decay=0.01, noise_std=0.1
    )


def refit(
    inputs: GpInputs,
    targets: FloatArray,
    theta_init: KernelParams,
    gradient: GradientMode = GradientMode.NUMERICAL,
    max_iter: int = 200,
) -> KernelParams:
    """Maximize the log marginal likelihood with L-BFGS-B.

    The search runs on the log / logit vector inside fixed boxes: scales in
    [1e-3, 1e3], length scales in [1e-2, 1e2], rho in [1e-5, 1 - 1e-5] and the
    noise std in [1e-4, 10]. Returns theta_init, with a warning, whenever the
    optimizer does not improve on it.

    Args:
        inputs: Training inputs (at least two)
        targets: Training targets
        theta_init: Starting hyperparameters
        gradient: Analytic gradient or central differences
        max_iter: L-BFGS-B iteration cap

    Raises:
        DomainError: If fewer than two observations are given
    """
    if len(inputs) < 2:
        raise DomainError("refit needs at least two observations")
    y = np.asarray(targets, dtype=np.float64)
    bounds = theta_init.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    v0 = theta_init.to_vector()
    start = np.clip(v0, lo, hi)

    try:
        baseline = log_marginal_likelihood(inputs, y, theta_init)
    except NumericalError:
        baseline = -math.inf

    def objective(v: FloatArray) -> float:
        try:
            return -log_marginal_likelihood(inputs, y, KernelParams.from_vector(v))
        except NumericalError:
            return 1e300

    def objective_and_grad(v: FloatArray) -> tuple[float, FloatArray]:
        try:
            value, grad = log_marginal_likelihood_gradient(inputs, y, KernelParams.from_vector(v))
        except NumericalError:
            return 1e300, np.zeros_like(v)
        return -value, -grad

    options = {"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-8}
    if GradientMode(gradient) is GradientMode.ANALYTIC:
        result = minimize(
            objective_and_grad, start, jac=True, method="L-BFGS-B", bounds=bounds, options=options
        )
    else:
        result = minimize(
            objective, start, jac="3-point", method="L-BFGS-B", bounds=bounds, options=options
        )

    candidate = KernelParams.from_vector(result.x)
    try:
        fitted = log_marginal_likelihood(inputs, y, candidate)
    except NumericalError:
        fitted = -math.inf
    if not fitted > baseline:
        logger.warning(
            "GP refit did not improve the likelihood (%.6g -> %.6g): %s",
            baseline,
            fitted,
            result.message,
        )
        return theta_init
    logger.debug(
        "GP refit: log-likelihood %.6g -> %.6g in %d iterations", baseline, fitted, result.nit
    )
    return candidate


# Stateful critic ------------------------------------------------------------


class BoCache:
    """Ring buffer of (gains, levels, slot, utility) observations."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise DomainError("cache capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[tuple[FloatArray, tuple[int, ...], int, float]] = deque(
            maxlen=capacity
        )

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, gains: FloatArray, action: DegradationAction, t: int, utility: float) -> None:
        """Append one observation; the oldest one is evicted when full."""
        if self._entries and t < self._entries[-1][2]:
            last = self._entries[-1][2]
            raise DomainError(f"cache entries must be time-ordered: {t} after {last}")
        self._entries.append((np.asarray(gains, dtype=np.float64), action.levels, t, utility))

    def arrays(self) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
        """(gains (J, N), levels (J, N), slots (J,), utilities (J,))."""
        if not self._entries:
            raise DomainError("cache is empty")
        gains = np.stack([e[0] for e in self._entries])
        levels = np.array([e[1] for e in self._entries], dtype=np.float64)
        slots = np.array([e[2] for e in self._entries], dtype=np.float64)
        utilities = np.array([e[3] for e in self._entries], dtype=np.float64)
        return gains, levels, slots, utilities

    @property
    def best_y(self) -> float:
        """Largest cached utility, the incumbent for EI and PI."""
        if not self._entries:
            return 0.0
        return max(e[3] for e in self._entries)


@dataclass(frozen=True, eq=False)
class ChannelScaler:
    """Per-dimension z-score of log10 channel gains."""

    mean: FloatArray
    scale: FloatArray

    @classmethod
    def fit(cls, gains: FloatArray) -> "ChannelScaler":
        logs = np.log10(np.atleast_2d(gains))
        mean = logs.mean(axis=0)
        spread = logs.std(axis=0) if logs.shape[0] >= 2 else np.ones(logs.shape[1])
        return cls(mean, np.where(spread > 1e-12, spread, 1.0))

    @classmethod
    def identity(cls, n_dims: int) -> "ChannelScaler":
        return cls(np.zeros(n_dims), np.ones(n_dims))

    def transform(self, gains: FloatArray) -> FloatArray:
        return np.asarray((np.log10(np.atleast_2d(gains)) - self.mean) / self.scale)


class BoCritic:
    """Cache, hyperparameters and posterior of the critic for one run.

    Example:
        >>> critic = BoCritic(3, CriticConfig())
        >>> values = critic.score([DegradationAction((0, 0, 0))], np.ones(3) * 1e-9, t=1)
    """

    def __init__(self, n_devices: int, cfg: CriticConfig) -> None:
        self.n_devices = n_devices
        self.cfg = cfg
        self.cache = BoCache(cfg.cache_size)
        self.params: KernelParams | None = None
        self.refits = 0
        self._scaler = ChannelScaler.identity(n_devices)
        self._posterior: GpPosterior | None = None

    def observe(self, gains: FloatArray, action: DegradationAction, t: int, utility: float) -> None:
        """Record the outcome of the executed action."""
        self.cache.add(gains, action, t, utility)
        self._posterior = None

    def _training_data(self) -> tuple[GpInputs, FloatArray, float]:
        gains, levels, slots, utilities = self.cache.arrays()
        self._scaler = ChannelScaler.fit(gains)
        inputs = GpInputs(self._scaler.transform(gains), levels, slots)
        offset = float(utilities.mean()) if self.cfg.center_targets else 0.0
        return inputs, utilities, offset

    def current_posterior(self) -> GpPosterior:
        """Posterior on the current cache, rebuilt lazily after every change."""
        if self._posterior is not None:
            return self._posterior
        if len(self.cache) == 0:
            theta = self.params or initial_params(np.zeros((1, self.n_devices)))
            self._posterior = fit_posterior(GpInputs.empty(self.n_devices), np.zeros(0), theta)
            return self._posterior
        inputs, utilities, offset = self._training_data()
        if self.params is None:
            self.params = initial_params(inputs.features)
        self._posterior = fit_posterior(inputs, utilities, self.params, offset)
        return self._posterior

    def refit(self) -> KernelParams | None:
        """Re-optimize the hyperparameters on the cache; keeps them on failure."""
        if len(self.cache) < 2:
            return self.params
        inputs, utilities, offset = self._training_data()
        start = self.params or initial_params(inputs.features)
        try:
            self.params = refit(inputs, utilities - offset, start, self.cfg.gradient)
        except (NumericalError, ValueError) as e:
            logger.warning("GP refit failed, keeping previous parameters: %s", e)
            self.params = start
        self.refits += 1
        self._posterior = None
        return self.params

    def predict(
        self, actions: Sequence[DegradationAction], gains: FloatArray, t: int
    ) -> tuple[FloatArray, FloatArray]:
        """Posterior mean and variance of U_t for each action at the current channel.

        Duplicate actions are evaluated once so they receive identical values.
        """
        gp = self.current_posterior()
        levels = np.array([a.levels for a in actions], dtype=np.float64)
        unique, inverse = np.unique(levels, axis=0, return_inverse=True)
        features = np.repeat(self._scaler.transform(gains), unique.shape[0], axis=0)
        queries = GpInputs(features, unique, np.full(unique.shape[0], float(t)))
        mean, var = posterior(gp, queries)
        inverse = np.asarray(inverse).reshape(-1)
        return mean[inverse], var[inverse]

    def score(
        self, actions: Sequence[DegradationAction], gains: FloatArray, t: int
    ) -> FloatArray:
        """Acquisition value of every action."""
        if not actions:
            raise DomainError("no actions to score")
        mean, var = self.predict(actions, gains, t)
        return acquisition(
            mean, np.sqrt(var), self.cfg.acquisition, self.cfg.exploration, self.cache.best_y
        )


def select_action(
    candidates: Sequence[DegradationAction], gains: FloatArray, t: int, critic: BoCritic
) -> tuple[DegradationAction, int, FloatArray]:
    """Pick the candidate with the highest acquisition value.

    Ties go to the lowest index, i.e. the candidate closest to the actor's
    preference.

    Returns:
        (chosen action, 1-based position k*, acquisition values)

    Raises:
        DomainError: If the candidate set is empty
    """
    if len(candidates) == 0:
        raise DomainError("candidate set is empty")
    values = critic.score(candidates, gains, t)
    best = int(np.argmax(values))
    return candidates[best], best + 1, values
