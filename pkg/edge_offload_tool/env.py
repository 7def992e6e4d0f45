"""Discrete-time simulation of the multi-device edge inference system.

Each slot the devices move one step along a rectangular trajectory around
the edge server, a new block-fading channel is drawn, and the synthetic
content oracle fixes what every degradation level would yield. Executing a
slot composes the degradation, transmission and edge-compute latencies with
the oracle's confidence and accuracy into per-device utilities.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from edge_offload_tool.bandwidth import AllocationProblem, shannon_rate, solve_allocation
from edge_offload_tool.core import (
    DegradationAction,
    DomainError,
    FloatArray,
    OracleConfig,
    SystemConfig,
    spawn_rng,
    substream_seed,
)
from edge_offload_tool.logging_config import get_logger, get_trace_logger

logger = get_logger(__name__)
trace = get_trace_logger()

SPEED_OF_LIGHT = 3e8
BITS_PER_PIXEL = 24
WEIGHT_FLOOR = 1e-6

# spawn_key prefixes inside the "content" substream
_COMPLEXITY_KEY = 0
_LEVEL_NOISE_KEY = 1


# Mobility ------------------------------------------------------------------


class MobilityModel:
    """Devices moving counter-clockwise on a rectangle centred on the server.

    Positions are arc lengths along the perimeter, measured from the
    bottom-left corner. The bottom edge runs left to right, so increasing arc
    length is counter-clockwise. Initial positions are uniform on the bottom
    edge.

    Example:
        >>> m = MobilityModel(1, np.random.default_rng(0), positions=[50.0])
        >>> float(m.distances()[0])
        25.0
    """

    def __init__(
        self,
        n_devices: int,
        rng: np.random.Generator,
        width_m: float = 100.0,
        height_m: float = 50.0,
        step_m: float = 2.5,
        positions: Sequence[float] | None = None,
    ) -> None:
        self.width_m = width_m
        self.height_m = height_m
        self.step_m = step_m
        if positions is None:
            start = rng.uniform(0.0, width_m, size=n_devices)
        else:
            start = np.asarray(positions, dtype=np.float64)
            if start.shape != (n_devices,):
                raise DomainError(f"expected {n_devices} positions, got {start.shape}")
        self._start = start
        self._steps = 0

    @property
    def perimeter_m(self) -> float:
        return 2.0 * (self.width_m + self.height_m)

    @property
    def positions(self) -> FloatArray:
        """Arc length of every device, in [0, perimeter)."""
        # Recomputed from the step count so 120 steps of 2.5 m land exactly on the start
        return np.mod(self._start + self._steps * self.step_m, self.perimeter_m)

    def position_xy(self) -> FloatArray:
        """(N, 2) coordinates with the server at the origin."""
        s = self.positions
        w, h = self.width_m, self.height_m
        x = np.empty_like(s)
        y = np.empty_like(s)

        bottom = s < w
        right = (s >= w) & (s < w + h)
        top = (s >= w + h) & (s < 2 * w + h)
        left = s >= 2 * w + h

        x[bottom], y[bottom] = -w / 2 + s[bottom], -h / 2
        x[right], y[right] = w / 2, -h / 2 + (s[right] - w)
        x[top], y[top] = w / 2 - (s[top] - w - h), h / 2
        x[left], y[left] = -w / 2, h / 2 - (s[left] - 2 * w - h)
        return np.column_stack([x, y])

    def distances(self) -> FloatArray:
        """Euclidean distance of every device to the server."""
        xy = self.position_xy()
        return np.hypot(xy[:, 0], xy[:, 1])

    def advance(self) -> FloatArray:
        """Move every device one step and return the new distances."""
        self._steps += 1
        return self.distances()


# Channel -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Block-fading gains of one slot: h = fading * mean_gains."""

    gains: FloatArray
    mean_gains: FloatArray
    fading: FloatArray


def mean_channel_gain(distances: FloatArray | float, cfg: SystemConfig) -> FloatArray:
    """Large-scale gain G_A (c / (4 pi f_c d))^lambda.

    Raises:
        DomainError: If any distance is not strictly positive
    """
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError(f"distances must be > 0, got {d}")
    wavelength_term = SPEED_OF_LIGHT / (4.0 * math.pi * cfg.carrier_hz * d)
    return np.asarray(cfg.antenna_gain * wavelength_term**cfg.pathloss_exponent)


def sample_channel(
    distances: FloatArray, cfg: SystemConfig, rng: np.random.Generator
) -> ChannelRealization:
    """Draw one slot of Rayleigh block fading (unit-mean exponential power)."""
    mean = mean_channel_gain(distances, cfg)
    fading = rng.exponential(1.0, size=mean.shape)
    return ChannelRealization(gains=fading * mean, mean_gains=mean, fading=fading)


# Cost models ---------------------------------------------------------------


def _check_level(resolution: tuple[int, int], level: int) -> None:
    if level < 0:
        raise DomainError(f"level must be >= 0, got {level}")
    width, height = resolution
    divisor = 2**level
    if width % divisor or height % divisor:
        raise DomainError(f"resolution {width}x{height} not divisible by 2^{level}")


def data_size_bits(resolution: tuple[int, int], level: int) -> int:
    """Bits of one RGB frame after halving each side `level` times.

    Example:
        >>> data_size_bits((1920, 1200), 1)
        13824000
    """
    _check_level(resolution, level)
    width, height = resolution
    return (width >> level) * (height >> level) * BITS_PER_PIXEL


def degradation_latency(resolution: tuple[int, int], level: int, device_efficiency: float) -> float:
    """Pyramid cost: every downsampling pass touches the current image once."""
    if device_efficiency <= 0:
        raise DomainError(f"device efficiency must be > 0, got {device_efficiency}")
    _check_level(resolution, level)
    pixels = resolution[0] * resolution[1]
    passes = sum(4.0 ** -(k - 1) for k in range(1, level + 1))
    return pixels * passes / device_efficiency


def edge_compute_latency(
    resolution: tuple[int, int], level: int, server_efficiency: float, overhead_s: float = 0.0
) -> float:
    """Fixed overhead plus a cost proportional to the offloaded pixel count."""
    if server_efficiency <= 0:
        raise DomainError(f"server efficiency must be > 0, got {server_efficiency}")
    _check_level(resolution, level)
    pixels = resolution[0] * resolution[1] * 4.0**-level
    return overhead_s + pixels / server_efficiency


def transmission_rate(
    fraction: FloatArray | float,
    gain: FloatArray | float,
    power: FloatArray | float,
    bandwidth_hz: float,
    noise_psd: float,
) -> FloatArray:
    """Uplink rate in bit/s of a device holding `fraction` of the band."""
    snr_full = np.asarray(power, dtype=np.float64) * np.asarray(gain, dtype=np.float64)
    return shannon_rate(fraction, snr_full / (bandwidth_hz * noise_psd), bandwidth_hz)


def transmission_time(
    data_bits: FloatArray | float,
    fraction: FloatArray | float,
    gain: FloatArray | float,
    power: FloatArray | float,
    bandwidth_hz: float,
    noise_psd: float,
) -> FloatArray:
    """Seconds to upload `data_bits`; +inf where the device holds no bandwidth.

    Example:
        >>> float(transmission_time(5e6, 1.0, 1.0, 1.0, 5e6, 1 / 5e6))
        1.0
    """
    d = np.asarray(data_bits, dtype=np.float64)
    b = np.asarray(fraction, dtype=np.float64)
    if np.any(b < 0):
        raise DomainError("bandwidth fractions must be >= 0")
    rate = transmission_rate(b, gain, power, bandwidth_hz, noise_psd)
    with np.errstate(divide="ignore", invalid="ignore"):
        seconds = np.where(b > 0, d / np.where(rate > 0, rate, 1.0), math.inf)
    return np.asarray(np.where(d == 0, 0.0, seconds))


# Content oracle ------------------------------------------------------------


def attenuation_profile(level: int | FloatArray, attenuation: float) -> FloatArray:
    """g(a) = 1 / (1 + gamma (4^a - 1)); g(0) = 1, non-increasing in a."""
    a = np.asarray(level, dtype=np.float64)
    return np.asarray(1.0 / (1.0 + attenuation * (4.0**a - 1.0)))


def _reflect(x: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    # Fold onto [lo, hi] by mirroring across both bounds
    y = math.fmod(x - lo, 2.0 * span)
    if y < 0:
        y += 2.0 * span
    if y > span:
        y = 2.0 * span - y
    return lo + y


class ContentOracle:
    """Synthetic detector: confidence and accuracy per (device, slot, level).

    Scene complexity of every device follows a reflected AR(1) process in
    [floor, 1]. The degradation level attenuates the expected confidence;
    Gaussian noise with a component shared across levels and an independent
    per-level component is added. Everything a slot produces is keyed on
    (seed, device, slot), so evaluating extra actions never changes what
    another policy sees.
    """

    def __init__(self, cfg: OracleConfig, n_devices: int, n_levels: int, seed: int) -> None:
        self.cfg = cfg
        self.n_devices = n_devices
        self.n_levels = n_levels
        self._base = substream_seed(seed, "content")
        self._complexity_rngs = [
            np.random.default_rng(
                np.random.SeedSequence(self._base.entropy, spawn_key=(_COMPLEXITY_KEY, n))
            )
            for n in range(n_devices)
        ]
        self._complexity: list[list[float]] = [[] for _ in range(n_devices)]
        self._profile = attenuation_profile(np.arange(n_levels), cfg.attenuation)
        self._slot_cache: dict[tuple[int, int], tuple[FloatArray, FloatArray]] = {}
        self._cached_slot = -1

    def complexity(self, device: int, t: int) -> float:
        """C_n(t), generated lazily and in slot order for every device."""
        self._check_device(device)
        if t < 1:
            raise DomainError(f"slot index must be >= 1, got {t}")
        series = self._complexity[device]
        rng = self._complexity_rngs[device]
        cfg = self.cfg
        while len(series) < t:
            prev = series[-1] if series else cfg.complexity_mean
            value = (
                cfg.complexity_mean
                + cfg.ar_coefficient * (prev - cfg.complexity_mean)
                + cfg.complexity_std * float(rng.standard_normal())
            )
            series.append(_reflect(value, cfg.complexity_floor, 1.0))
        return series[t - 1]

    def query_levels(self, device: int, t: int) -> tuple[FloatArray, FloatArray]:
        """Confidence and accuracy of every level for one device and slot."""
        if t != self._cached_slot:
            self._slot_cache.clear()
            self._cached_slot = t
        key = (device, t)
        if key not in self._slot_cache:
            self._slot_cache[key] = self._evaluate(device, t)
        return self._slot_cache[key]

    def query(self, device: int, t: int, level: int) -> tuple[float, float]:
        """(alpha, c) of one device at one level; identical on repeated calls."""
        if not 0 <= level < self.n_levels:
            raise DomainError(f"level {level} outside 0..{self.n_levels - 1}")
        alphas, accuracies = self.query_levels(device, t)
        return float(alphas[level]), float(accuracies[level])

    def _evaluate(self, device: int, t: int) -> tuple[FloatArray, FloatArray]:
        cfg = self.cfg
        c_t = self.complexity(device, t)
        rng = np.random.default_rng(
            np.random.SeedSequence(self._base.entropy, spawn_key=(_LEVEL_NOISE_KEY, device, t))
        )
        common = rng.standard_normal()
        own = rng.standard_normal(self.n_levels)
        extra = rng.standard_normal(self.n_levels)
        rho = cfg.level_noise_correlation
        z = math.sqrt(rho) * common + math.sqrt(1.0 - rho) * own

        sigma = cfg.noise_fraction * cfg.alpha_max
        mean = cfg.alpha_max * c_t * self._profile
        alphas = np.clip(mean + sigma * z, 0.0, cfg.alpha_max)
        accuracies = np.clip(
            alphas / cfg.alpha_max + cfg.accuracy_noise * (0.8 * z + 0.6 * extra), 0.0, 1.0
        )
        return alphas, accuracies

    def _check_device(self, device: int) -> None:
        if not 0 <= device < self.n_devices:
            raise DomainError(f"device {device} outside 0..{self.n_devices - 1}")


# Box matching --------------------------------------------------------------


def _as_boxes(boxes: FloatArray | Sequence[Sequence[float]], name: str) -> FloatArray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 4:
        raise DomainError(f"{name}: expected rows of [x1, y1, x2, y2(, score)]")
    arr = arr[:, :4]
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise DomainError(f"{name}: degenerate box (x2 <= x1 or y2 <= y1)")
    return arr


def box_iou(
    first: FloatArray | Sequence[Sequence[float]], second: FloatArray | Sequence[Sequence[float]]
) -> FloatArray:
    """Pairwise IoU of two sets of axis-aligned [x1, y1, x2, y2] boxes.

    Example:
        >>> float(box_iou([[0, 0, 10, 10]], [[0, 5, 10, 15]])[0, 0])
        0.3333333333333333
    """
    a = _as_boxes(first, "first")
    b = _as_boxes(second, "second")
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return np.asarray(inter / (area_a[:, None] + area_b[None, :] - inter))


def detection_accuracy(
    pred_boxes: FloatArray | Sequence[Sequence[float]],
    gt_boxes: FloatArray | Sequence[Sequence[float]],
    iou_threshold: float,
) -> float:
    """Share of ground-truth boxes whose best prediction reaches the threshold.

    Prediction rows may carry a fifth column with the confidence; it is
    ignored for matching.

    Raises:
        DomainError: If the ground-truth set is empty
    """
    gt = _as_boxes(gt_boxes, "gt_boxes")
    if gt.shape[0] == 0:
        raise DomainError("accuracy is undefined for an empty ground-truth set")
    pred = _as_boxes(pred_boxes, "pred_boxes")
    if pred.shape[0] == 0:
        return 0.0
    best = box_iou(gt, pred).max(axis=1)
    return float(np.mean(best >= iou_threshold))


# Slot composition ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlotRecord:
    """Full outcome of one slot.

    k_t, k_star, decision_ms and evaluations are filled in by the controller
    that produced the record.
    """

    t: int
    action: DegradationAction
    bandwidth: FloatArray
    confidences: FloatArray  # alpha
    accuracies: FloatArray  # c
    tau_d: FloatArray
    tau_o: FloatArray
    tau_c: FloatArray
    utilities: FloatArray  # u~_n
    total_utility: float  # U_t
    k_t: int = 0
    k_star: int = 0
    decision_ms: float = 0.0
    evaluations: int = 0

    @property
    def latencies(self) -> FloatArray:
        """End-to-end latency per device."""
        return self.tau_d + self.tau_o + self.tau_c


@dataclass(frozen=True, eq=False)
class SlotContext:
    """What the environment fixed at the start of a slot."""

    t: int
    distances: FloatArray
    gains: FloatArray
    mean_gains: FloatArray


class Environment:
    """One seeded simulation run of N devices.

    Example:
        >>> env = Environment(SystemConfig(), seed=1)
        >>> ctx = env.begin_slot()
        >>> record = env.execute_action(DegradationAction((0, 0, 0)))
    """

    def __init__(self, cfg: SystemConfig, seed: int) -> None:
        self.cfg = cfg
        self.seed = seed
        self.mobility = MobilityModel(
            cfg.n_devices,
            spawn_rng(seed, "env"),
            width_m=cfg.rect_width_m,
            height_m=cfg.rect_height_m,
            step_m=cfg.step_m,
        )
        self.oracle = ContentOracle(cfg.oracle, cfg.n_devices, cfg.n_levels, seed)
        self._channel_rng = spawn_rng(seed, "channel")
        self._powers = np.asarray(cfg.tx_power_w)
        self._weights = np.asarray(cfg.latency_weight)
        self._context: SlotContext | None = None

    @property
    def context(self) -> SlotContext:
        if self._context is None:
            raise DomainError("no slot in progress; call begin_slot() first")
        return self._context

    @property
    def t(self) -> int:
        return 0 if self._context is None else self._context.t

    def begin_slot(self) -> SlotContext:
        """Advance mobility and fading; the gains stay fixed until the next call."""
        t = self.t + 1
        distances = self.mobility.advance()
        channel = sample_channel(distances, self.cfg, self._channel_rng)
        self._context = SlotContext(t, distances, channel.gains, channel.mean_gains)
        trace.debug("slot %d: distances=%s gains=%s", t, distances, channel.gains)
        return self._context

    def data_sizes(self, action: DegradationAction) -> FloatArray:
        return np.array(
            [
                data_size_bits(res, level)
                for res, level in zip(self.cfg.native_resolution, action.levels, strict=True)
            ],
            dtype=np.float64,
        )

    def effective_weights(self) -> FloatArray:
        """Latency weights used by the allocator; zero weights are floored.

        With every weight zero the allocation is irrelevant to the utility and
        all devices are weighted equally.
        """
        w = self._weights
        top = float(w.max())
        if top <= 0:
            return np.ones_like(w)
        return np.maximum(w, WEIGHT_FLOOR * top)

    def allocation_problem(self, action: DegradationAction) -> AllocationProblem:
        """Bandwidth subproblem of the current slot for a fixed action."""
        action.validate(self.cfg.n_devices, self.cfg.n_levels)
        return AllocationProblem(
            data_bits=self.data_sizes(action),
            gains=self.context.gains,
            powers=self._powers,
            weights=self.effective_weights(),
            bandwidth_hz=self.cfg.bandwidth_hz,
            noise_psd=self.cfg.noise_psd_w_per_hz,
        )

    def execute_slot(
        self, action: DegradationAction, bandwidth: FloatArray | Sequence[float]
    ) -> SlotRecord:
        """Evaluate an action and allocation on the current slot.

        May be called any number of times per slot; the content and channel
        of the slot do not change.

        Raises:
            DomainError: If the action or the bandwidth shares are invalid
        """
        cfg = self.cfg
        ctx = self.context
        action.validate(cfg.n_devices, cfg.n_levels)
        b = np.asarray(bandwidth, dtype=np.float64)
        if b.shape != (cfg.n_devices,):
            raise DomainError(f"expected {cfg.n_devices} bandwidth shares, got {b.shape}")
        if np.any(b < 0) or b.sum() > 1.0 + 1e-6:
            raise DomainError(f"bandwidth shares must be >= 0 and sum to <= 1, got {b}")

        bits = self.data_sizes(action)
        tau_d = np.array(
            [
                degradation_latency(res, a, eff)
                for res, a, eff in zip(
                    cfg.native_resolution, action.levels, cfg.device_efficiency, strict=True
                )
            ]
        )
        tau_c = np.array(
            [
                edge_compute_latency(res, a, cfg.server_efficiency, cfg.server_overhead_s)
                for res, a in zip(cfg.native_resolution, action.levels, strict=True)
            ]
        )
        tau_o = transmission_time(
            bits, b, ctx.gains, self._powers, cfg.bandwidth_hz, cfg.noise_psd_w_per_hz
        )

        confidences = np.empty(cfg.n_devices)
        accuracies = np.empty(cfg.n_devices)
        for n, level in enumerate(action.levels):
            confidences[n], accuracies[n] = self.oracle.query(n, ctx.t, level)

        latency = tau_d + tau_o + tau_c
        with np.errstate(invalid="ignore"):
            penalty = np.where(self._weights > 0, self._weights * latency, 0.0)
        utilities = confidences - penalty
        return SlotRecord(
            t=ctx.t,
            action=action,
            bandwidth=b,
            confidences=confidences,
            accuracies=accuracies,
            tau_d=tau_d,
            tau_o=tau_o,
            tau_c=tau_c,
            utilities=utilities,
            total_utility=float(np.sum(utilities)),
        )

    def execute_action(self, action: DegradationAction) -> SlotRecord:
        """Allocate bandwidth optimally for `action`, then execute it."""
        allocation = solve_allocation(self.allocation_problem(action))
        return self.execute_slot(action, allocation.fractions)
