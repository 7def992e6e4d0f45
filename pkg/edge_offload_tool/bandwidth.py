"""Exact per-slot FDMA bandwidth allocation.

Solves

    min  sum_n w_n tau_n
    s.t. d_n / tau_n <= b_n W log2(1 + p_n h_n / (b_n W delta^2)),  sum_n b_n <= 1

through its Lagrangian dual. With eta the multiplier of the bandwidth budget
and phi_n the multiplier of device n's rate constraint, the optimum has the
closed form

    tau_n = sqrt(phi_n d_n / w_n)
    b_n   = -p_n h_n / (W delta^2 [1 + 1 / W0(-exp(-(1 + eta ln2 / (phi_n W))))])

where W0 is the principal branch of the Lambert-W function. The solver
searches eta by safeguarded bisection (Brent) so that the budget is fully
used, and solves each device's tight-rate equation for phi_n in between.
An independent bisection on the reduced problem serves as a verification
oracle.
"""

import math
from dataclasses import dataclass
from typing import overload

import numpy as np
from scipy.optimize import brentq

from edge_offload_tool.core import DomainError, FloatArray, NumericalError
from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

LN2 = math.log(2.0)
BRANCH_POINT = -1.0 / math.e
_HALLEY_MAX_ITER = 64
_INNER_MAX_ITER = 200
_SERIES_CUTOFF = 1e-4


# Lambert-W ---------------------------------------------------------------


def _w0_scalar(x: float) -> float:
    if math.isnan(x):
        raise DomainError("lambert_w0 is undefined for NaN")
    if x < BRANCH_POINT:
        # Arguments computed as -exp(-1 - tiny) can land one ulp below -1/e.
        if x >= BRANCH_POINT * (1.0 + 4.0 * np.finfo(float).eps):
            return -1.0
        raise DomainError(f"lambert_w0 requires x >= -1/e, got {x!r}")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf
    if abs(x) < 1e-8:
        return x - x * x + 1.5 * x**3

    if x < -0.25:
        # Series about the branch point
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    elif x < 3.0:
        lx = math.log1p(x)
        w = lx * (1.0 - math.log1p(lx) / (2.0 + lx))
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1

    for _ in range(_HALLEY_MAX_ITER):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= dw
        if abs(dw) <= 1e-15 * (1.0 + abs(w)):
            break
    return w


def _w0_array(x: FloatArray) -> FloatArray:
    if np.any(np.isnan(x)):
        raise DomainError("lambert_w0 is undefined for NaN")
    tol = BRANCH_POINT * (1.0 + 4.0 * np.finfo(float).eps)
    if np.any(x < tol):
        raise DomainError(f"lambert_w0 requires x >= -1/e, got min {float(np.min(x))!r}")
    x = np.maximum(x, BRANCH_POINT)
    w = np.empty_like(x)

    near = x < -0.25
    mid = (~near) & (x < 3.0)
    far = x >= 3.0
    p = np.sqrt(np.maximum(2.0 * (math.e * x[near] + 1.0), 0.0))
    w[near] = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    lx = np.log1p(x[mid])
    w[mid] = lx * (1.0 - np.log1p(lx) / (2.0 + lx))
    l1 = np.log(x[far])
    l2 = np.log(l1)
    w[far] = l1 - l2 + l2 / l1

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(_HALLEY_MAX_ITER):
            ew = np.exp(w)
            f = w * ew - x
            wp1 = w + 1.0
            dw = np.where(wp1 != 0.0, f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1)), 0.0)
            dw = np.where(np.isfinite(dw), dw, 0.0)
            w -= dw
            if np.all(np.abs(dw) <= 1e-15 * (1.0 + np.abs(w))):
                break
    return w


@overload
def lambert_w0(x: float) -> float: ...


@overload
def lambert_w0(x: FloatArray) -> FloatArray: ...


def lambert_w0(x: float | FloatArray) -> float | FloatArray:
    """Principal branch W0 of the Lambert-W function.

    Returns w >= -1 with w * exp(w) = x. Uses a branch-point series, a
    log1p-based guess or the asymptotic expansion as starting point and
    converges with Halley's method.

    Args:
        x: Scalar or array with x >= -1/e

    Returns:
        W0(x), same shape as the input

    Raises:
        DomainError: If any x < -1/e

    Example:
        >>> round(lambert_w0(1.0), 10)
        0.5671432904
    """
    if isinstance(x, np.ndarray):
        return _w0_array(x.astype(np.float64))
    return _w0_scalar(float(x))


# Problem types -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    """One slot's bandwidth allocation instance."""

    data_bits: FloatArray  # d_n
    gains: FloatArray  # h_n
    powers: FloatArray  # p_n, watt
    weights: FloatArray  # w_n
    bandwidth_hz: float  # W
    noise_psd: float  # delta^2, W/Hz

    def __post_init__(self) -> None:
        for name in ("data_bits", "gains", "powers", "weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.data_bits.shape
        if not (self.gains.shape == self.powers.shape == self.weights.shape == n):
            raise DomainError("allocation arrays must share one length")
        if self.data_bits.ndim != 1 or self.data_bits.size == 0:
            raise DomainError("allocation needs at least one device")
        if np.any(self.data_bits < 0) or not np.all(np.isfinite(self.data_bits)):
            raise DomainError("data sizes must be finite and >= 0")
        if np.any(self.gains <= 0) or np.any(self.powers <= 0):
            raise DomainError("gains and powers must be > 0")
        if np.any(self.weights[self.data_bits > 0] <= 0):
            raise DomainError("weights of devices with data must be > 0")
        if self.bandwidth_hz <= 0 or self.noise_psd <= 0:
            raise DomainError("bandwidth and noise PSD must be > 0")

    @property
    def n_devices(self) -> int:
        return int(self.data_bits.size)

    @property
    def full_band_snr(self) -> FloatArray:
        """p_n h_n / (W delta^2): the SNR device n would see with the whole band."""
        return self.powers * self.gains / (self.bandwidth_hz * self.noise_psd)


@dataclass(frozen=True, eq=False)
class Allocation:
    """Optimal bandwidth shares, offloading times and dual certificates."""

    fractions: FloatArray  # b_n
    offload_times: FloatArray  # tau^o_n, seconds
    eta: float
    phi: FloatArray
    objective: float  # sum_n w_n tau^o_n


# Closed forms --------------------------------------------------------------


def shannon_rate(
    b: FloatArray | float, snr_full: FloatArray | float, bandwidth_hz: float
) -> FloatArray:
    """b W log2(1 + S / b) with S the full-band SNR; zero where b == 0."""
    b_arr = np.asarray(b, dtype=np.float64)
    s_arr = np.asarray(snr_full, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = b_arr * bandwidth_hz * np.log1p(s_arr / b_arr) / LN2
    return np.where(b_arr > 0, rate, 0.0)


def _rate_curvature(s: FloatArray | float) -> FloatArray:
    """ln(1 + s) - s / (1 + s), series-evaluated for small s."""
    s_arr = np.asarray(s, dtype=np.float64)
    series = s_arr**2 / 2.0 - 2.0 * s_arr**3 / 3.0 + 3.0 * s_arr**4 / 4.0 - 4.0 * s_arr**5 / 5.0
    direct = np.log1p(s_arr) - s_arr / (1.0 + s_arr)
    return np.where(s_arr < _SERIES_CUTOFF, series, direct)


def _curv(s: float) -> float:
    if s < _SERIES_CUTOFF:
        return s * s / 2.0 - 2.0 * s**3 / 3.0 + 3.0 * s**4 / 4.0 - 4.0 * s**5 / 5.0
    return math.log1p(s) - s / (1.0 + s)


def b_from_duals(
    eta: float, phi: float, power: float, gain: float, bandwidth_hz: float, noise_psd: float
) -> float:
    """Bandwidth share that minimizes the Lagrangian for given duals.

    Args:
        eta: Multiplier of the bandwidth budget (> 0)
        phi: Multiplier of the device's rate constraint (> 0)
        power: Transmit power p, watt
        gain: Channel gain h
        bandwidth_hz: W
        noise_psd: delta^2, W/Hz

    Raises:
        DomainError: eta <= 0 (b grows without bound) or phi <= 0
    """
    if eta <= 0:
        raise DomainError("eta must be > 0: eta = 0 drives the bandwidth share to infinity")
    if phi <= 0:
        raise DomainError("phi must be > 0")
    c = eta * LN2 / (phi * bandwidth_hz)
    w = lambert_w0(-math.exp(-(1.0 + c)))
    if w == 0.0:
        return 0.0
    if w == -1.0:
        return math.inf
    return -power * gain / (bandwidth_hz * noise_psd * (1.0 + 1.0 / w))


def stationarity_residual(
    b: float,
    eta: float,
    phi: float,
    power: float,
    gain: float,
    bandwidth_hz: float,
    noise_psd: float,
) -> float:
    """Partial derivative of the Lagrangian with respect to b at (b, eta, phi)."""
    s = power * gain / (b * bandwidth_hz * noise_psd)
    return -(phi * bandwidth_hz / LN2) * _curv(s) + eta


# Dual solver -------------------------------------------------------------


def _log_q(u: float) -> float:
    """ln of s^2 c(s) / ln^2(1 + s) at s = exp(u); increasing in u."""
    s = math.exp(u)
    return 2.0 * u + math.log(_curv(s)) - 2.0 * math.log(math.log1p(s))


def _dlog_q(u: float) -> float:
    s = math.exp(u)
    c = _curv(s)
    lg = math.log1p(s)
    return 2.0 + s * s / (c * (1.0 + s) ** 2) - 2.0 * s / ((1.0 + s) * lg)


def _solve_log_snr(target: float, u0: float) -> float:
    """Solve _log_q(u) = target by Newton's method kept inside a shrinking bracket."""
    lo, hi = -50.0, 100.0
    u = min(max(u0, lo + 1.0), hi - 1.0)
    for _ in range(_INNER_MAX_ITER):
        g = _log_q(u) - target
        if g == 0.0:
            return u
        if g > 0:
            hi = u
        else:
            lo = u
        u_new = u - g / _dlog_q(u)
        if not lo < u_new < hi:
            u_new = 0.5 * (lo + hi)
        if abs(u_new - u) <= 1e-15 * (1.0 + abs(u)):
            return u_new
        u = u_new
    return u


class _DualSearch:
    """Per-eta evaluation of the inner device problems with warm starts."""

    def __init__(self, problem: AllocationProblem, active: np.ndarray) -> None:
        self.snr = problem.full_band_snr[active]
        d = problem.data_bits[active]
        w = problem.weights[active]
        # eta = K_n q(s_n) links the budget multiplier to device n's SNR
        self.log_k = np.log(w * d * LN2 / (self.snr**2 * problem.bandwidth_hz))
        self.u = [math.log(len(self.snr) * s) for s in self.snr]

    def log_eta_equal_split(self) -> FloatArray:
        """ln eta at which each device alone would take 1/N of the band."""
        n = len(self.snr)
        return np.array([lk + _log_q(math.log(n * s)) for lk, s in zip(self.log_k, self.snr)])

    def snr_at(self, log_eta: float) -> FloatArray:
        for i, lk in enumerate(self.log_k):
            self.u[i] = _solve_log_snr(log_eta - float(lk), self.u[i])
        return np.exp(np.asarray(self.u))

    def budget_excess(self, log_eta: float) -> float:
        return float(np.sum(self.snr / self.snr_at(log_eta)) - 1.0)


def _empty_allocation(problem: AllocationProblem) -> Allocation:
    zeros = np.zeros(problem.n_devices)
    return Allocation(zeros, zeros.copy(), 0.0, zeros.copy(), 0.0)


def solve_allocation(problem: AllocationProblem) -> Allocation:
    """KKT-optimal bandwidth allocation from the dual closed forms.

    The outer search finds eta with sum_n b_n(eta) = 1; for each eta the
    tight-rate equation of every device is solved in its SNR variable, from
    which phi_n follows. The returned shares are produced by the Lambert-W
    closed form at the optimal duals.

    Args:
        problem: Allocation instance

    Returns:
        Allocation with fractions summing to 1 over devices with data

    Raises:
        NumericalError: If the dual bracket cannot be established
    """
    active = problem.data_bits > 0
    if not np.any(active):
        return _empty_allocation(problem)

    search = _DualSearch(problem, active)
    log_eta0 = search.log_eta_equal_split()
    lo, hi = float(np.min(log_eta0)) - LN2, float(np.max(log_eta0)) + LN2
    f_lo, f_hi = search.budget_excess(lo), search.budget_excess(hi)
    widen = 0
    while f_lo < 0 or f_hi > 0:
        # Geometric widening, bounded at twelve decades either side
        widen += 1
        if widen > 12:
            raise NumericalError(f"could not bracket the budget multiplier: [{lo}, {hi}]")
        if f_lo < 0:
            lo -= math.log(10.0)
            f_lo = search.budget_excess(lo)
        if f_hi > 0:
            hi += math.log(10.0)
            f_hi = search.budget_excess(hi)

    log_eta = float(brentq(search.budget_excess, lo, hi, xtol=1e-14, rtol=4.5e-16, maxiter=200))
    eta = math.exp(log_eta)
    snr_n = search.snr_at(log_eta)

    n = problem.n_devices
    fractions = np.zeros(n)
    phi = np.zeros(n)
    offload = np.zeros(n)
    bw, psd = problem.bandwidth_hz, problem.noise_psd
    for j, idx in enumerate(np.flatnonzero(active)):
        phi_n = eta * LN2 / (bw * _curv(float(snr_n[j])))
        phi[idx] = phi_n
        fractions[idx] = b_from_duals(
            eta, phi_n, float(problem.powers[idx]), float(problem.gains[idx]), bw, psd
        )
        offload[idx] = math.sqrt(phi_n * problem.data_bits[idx] / problem.weights[idx])

    objective = float(np.sum(problem.weights * offload))
    logger.debug(
        "solved allocation: eta=%.6g sum_b=%.15f objective=%.6g", eta, fractions.sum(), objective
    )
    return Allocation(fractions, offload, eta, phi, objective)


# Verification oracle -------------------------------------------------------


def _marginal_cost(
    b: FloatArray, snr: FloatArray, wd: FloatArray, bandwidth_hz: float
) -> FloatArray:
    """w d R'(b) / R(b)^2, decreasing in b."""
    s = snr / b
    rate = b * bandwidth_hz * np.log1p(s) / LN2
    return wd * bandwidth_hz * _rate_curvature(s) / (LN2 * rate**2)


def oracle_allocation(problem: AllocationProblem, iterations: int = 64) -> Allocation:
    """Reference solution of min sum_n w_n d_n / R_n(b_n) s.t. sum_n b_n = 1.

    Bisects the shared marginal-cost multiplier; every device's share for a
    given multiplier is found by a vectorized inner bisection on log b.
    Independent of the Lambert-W closed form, slower, used to verify
    solve_allocation.
    """
    active = problem.data_bits > 0
    if not np.any(active):
        return _empty_allocation(problem)

    snr = problem.full_band_snr[active]
    wd = problem.weights[active] * problem.data_bits[active]
    bw = problem.bandwidth_hz
    n_active = int(active.sum())

    def shares(log_mu: float) -> FloatArray:
        lo = np.full(n_active, -60.0)
        hi = np.full(n_active, 30.0)
        mu = math.exp(log_mu)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            too_small = _marginal_cost(np.exp(mid), snr, wd, bw) > mu
            lo = np.where(too_small, mid, lo)
            hi = np.where(too_small, hi, mid)
        return np.exp(0.5 * (lo + hi))

    log_mu0 = np.log(_marginal_cost(np.full(n_active, 1.0 / n_active), snr, wd, bw))
    lo_mu, hi_mu = float(np.min(log_mu0)) - LN2, float(np.max(log_mu0)) + LN2
    for _ in range(iterations):
        mid = 0.5 * (lo_mu + hi_mu)
        if shares(mid).sum() > 1.0:
            lo_mu = mid
        else:
            hi_mu = mid
    log_mu = 0.5 * (lo_mu + hi_mu)
    b_active = shares(log_mu)

    fractions = np.zeros(problem.n_devices)
    fractions[active] = b_active
    offload = np.zeros(problem.n_devices)
    offload[active] = problem.data_bits[active] / shannon_rate(b_active, snr, bw)
    phi = np.zeros(problem.n_devices)
    phi[active] = problem.weights[active] * offload[active] ** 2 / problem.data_bits[active]
    objective = float(np.sum(problem.weights * offload))
    return Allocation(fractions, offload, math.exp(log_mu), phi, objective)


def tight_rate_residual(problem: AllocationProblem, allocation: Allocation) -> FloatArray:
    """Relative gap between required and achieved rate per active device."""
    active = problem.data_bits > 0
    required = problem.data_bits[active] / allocation.offload_times[active]
    achieved = shannon_rate(
        allocation.fractions[active], problem.full_band_snr[active], problem.bandwidth_hz
    )
    return np.abs(required - achieved) / achieved
