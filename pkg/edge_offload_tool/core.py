"""Domain types, action encoding and the deterministic RNG contract.

Everything here is an immutable value object shared by the environment,
the controller components and the CLI. Configuration validation lives on
the dataclasses themselves so that an invalid SystemConfig cannot exist.
"""

import itertools
import zlib
from collections import deque
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, fields, replace
from enum import StrEnum

import numpy as np
import numpy.typing as npt

from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

FloatArray = npt.NDArray[np.float64]

DEFAULT_TX_POWER_W = 0.1
DEFAULT_LATENCY_WEIGHT = 1.0
DEFAULT_RESOLUTION = (1920, 1200)
DEFAULT_DEVICE_EFFICIENCY = 1e8
DEFAULT_NOISE_DBM_PER_HZ = -174.0

RNG_LABELS = (
    "env",
    "channel",
    "content",
    "actor-init",
    "actor-noise",
    "actor-sample",
    "actor-train",
    "policy",
)


class DomainError(ValueError):
    """A domain operation was called outside its precondition."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the dotted key path."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


class NumericalError(ArithmeticError):
    """A numerical routine failed (factorization, bracketing)."""


class AcquisitionKind(StrEnum):
    """Acquisition functions available to the critic."""

    UCB = "ucb"
    EI = "ei"
    PI = "pi"


class GradientMode(StrEnum):
    """How the critic differentiates the log marginal likelihood."""

    ANALYTIC = "analytic"
    NUMERICAL = "numerical"


def dbm_per_hz_to_w(dbm: float) -> float:
    """Convert a noise PSD in dBm/Hz to W/Hz."""
    return float(10.0 ** (dbm / 10.0) * 1e-3)


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class ActorConfig:
    """Hyperparameters of the learned candidate generator."""

    history_length: int = 1  # l
    memory_size: int = 512  # J_D
    batch_size: int = 128  # J_D^s
    initial_candidates: int = 0  # K_1; 0 selects min{8N, A^N}
    k_interval: int = 32  # Delta_K
    train_interval: int = 20  # Delta_D
    learning_rate: float = 0.01  # xi
    hidden_widths: tuple[int, ...] = (128, 128)
    grad_clip: float = 5.0
    zero_output_init: bool = False

    def __post_init__(self) -> None:
        _require(self.history_length >= 1, "actor.history_length", "must be >= 1")
        _require(self.memory_size >= 2, "actor.memory_size", "must be >= 2")
        _require(self.batch_size >= 1, "actor.batch_size", "must be >= 1")
        _require(self.initial_candidates >= 0, "actor.initial_candidates", "must be >= 0")
        _require(self.k_interval >= 1, "actor.k_interval", "must be >= 1")
        _require(self.train_interval >= 1, "actor.train_interval", "must be >= 1")
        _require(self.learning_rate > 0, "actor.learning_rate", "must be > 0")
        _require(
            all(w >= 1 for w in self.hidden_widths),
            "actor.hidden_widths",
            "every width must be >= 1",
        )
        _require(self.grad_clip > 0, "actor.grad_clip", "must be > 0")


@dataclass(frozen=True)
class CriticConfig:
    """Hyperparameters of the GP critic."""

    cache_size: int = 256  # J_B
    refit_interval: int = 20  # Delta_B
    exploration: float = 2.0  # zeta
    acquisition: AcquisitionKind = AcquisitionKind.UCB
    gradient: GradientMode = GradientMode.NUMERICAL
    center_targets: bool = True

    def __post_init__(self) -> None:
        _require(self.cache_size >= 1, "critic.cache_size", "must be >= 1")
        _require(self.refit_interval >= 1, "critic.refit_interval", "must be >= 1")
        _require(self.exploration >= 0, "critic.exploration", "must be >= 0")
        try:
            object.__setattr__(self, "acquisition", AcquisitionKind(self.acquisition))
        except ValueError as e:
            raise ConfigError("critic.acquisition", "must be one of ucb, ei, pi") from e
        try:
            object.__setattr__(self, "gradient", GradientMode(self.gradient))
        except ValueError as e:
            raise ConfigError("critic.gradient", "must be analytic or numerical") from e


@dataclass(frozen=True)
class OracleConfig:
    """Parameters of the synthetic content-dependent detection oracle."""

    alpha_max: float = 2.0
    attenuation: float = 0.05  # gamma_g in g(a) = 1 / (1 + gamma_g (4^a - 1))
    noise_fraction: float = 0.05  # sigma = noise_fraction * alpha_max
    ar_coefficient: float = 0.95
    complexity_mean: float = 0.6
    complexity_std: float = 0.05  # innovation std of the AR(1) process
    complexity_floor: float = 0.05
    level_noise_correlation: float = 0.8
    accuracy_noise: float = 0.02

    def __post_init__(self) -> None:
        _require(self.alpha_max > 0, "oracle.alpha_max", "must be > 0")
        _require(self.attenuation >= 0, "oracle.attenuation", "must be >= 0")
        _require(self.noise_fraction >= 0, "oracle.noise_fraction", "must be >= 0")
        _require(0 <= self.ar_coefficient < 1, "oracle.ar_coefficient", "must be in [0, 1)")
        _require(
            0 < self.complexity_floor <= self.complexity_mean <= 1,
            "oracle.complexity_mean",
            "must satisfy 0 < complexity_floor <= complexity_mean <= 1",
        )
        _require(self.complexity_std >= 0, "oracle.complexity_std", "must be >= 0")
        _require(
            0 <= self.level_noise_correlation <= 1,
            "oracle.level_noise_correlation",
            "must be in [0, 1]",
        )
        _require(self.accuracy_noise >= 0, "oracle.accuracy_noise", "must be >= 0")


PER_DEVICE_FIELDS = ("tx_power_w", "latency_weight", "native_resolution", "device_efficiency")


@dataclass(frozen=True)
class SystemConfig:
    """Complete description of one simulated edge-inference system.

    Per-device fields accept an empty tuple (default value for every
    device), a single entry (broadcast) or exactly N entries.
    """

    n_devices: int = 3  # N
    n_levels: int = 4  # A
    bandwidth_hz: float = 5e6  # W
    tx_power_w: tuple[float, ...] = ()  # p_n
    noise_psd_w_per_hz: float = field(
        default_factory=lambda: dbm_per_hz_to_w(DEFAULT_NOISE_DBM_PER_HZ)
    )
    latency_weight: tuple[float, ...] = ()  # w_n
    native_resolution: tuple[tuple[int, int], ...] = ()  # (iota_w, iota_h)
    iou_threshold: float = 0.5
    horizon: int = 3000  # T
    antenna_gain: float = 4.11  # G_A
    carrier_hz: float = 2.4e9  # f_c
    pathloss_exponent: float = 2.4  # lambda
    device_efficiency: tuple[float, ...] = ()  # psi^d_n, pixels/s
    server_efficiency: float = 2e8  # psi, pixels/s
    server_overhead_s: float = 0.01  # kappa_0
    rect_width_m: float = 100.0
    rect_height_m: float = 50.0
    step_m: float = 2.5
    enumeration_cap: int = 100_000
    actor: ActorConfig = field(default_factory=ActorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self) -> None:
        _require(self.n_devices >= 1, "system.n_devices", "must be >= 1 (N >= 1)")
        _require(self.n_levels >= 1, "system.n_levels", "must be >= 1 (A >= 1)")
        n = self.n_devices
        defaults: dict[str, object] = {
            "tx_power_w": DEFAULT_TX_POWER_W,
            "latency_weight": DEFAULT_LATENCY_WEIGHT,
            "native_resolution": DEFAULT_RESOLUTION,
            "device_efficiency": DEFAULT_DEVICE_EFFICIENCY,
        }
        for name in PER_DEVICE_FIELDS:
            value = tuple(getattr(self, name))
            if not value:
                value = (defaults[name],) * n
            elif len(value) == 1:
                value = value * n
            _require(len(value) == n, f"system.{name}", f"expected 1 or {n} entries")
            if name == "native_resolution":
                value = tuple((int(w), int(h)) for w, h in value)
            else:
                value = tuple(float(v) for v in value)
            object.__setattr__(self, name, value)

        _require(self.bandwidth_hz > 0, "system.bandwidth_hz", "must be > 0 (W > 0)")
        _require(self.noise_psd_w_per_hz > 0, "system.noise_psd_w_per_hz", "must be > 0")
        _require(all(p > 0 for p in self.tx_power_w), "system.tx_power_w", "must be > 0")
        _require(
            all(w >= 0 for w in self.latency_weight),
            "system.latency_weight",
            "must be >= 0 (w_n >= 0)",
        )
        _require(
            0 < self.iou_threshold <= 1, "system.iou_threshold", "must be in (0, 1]"
        )
        _require(self.horizon >= 1, "system.horizon", "must be >= 1")
        _require(self.antenna_gain > 0, "system.antenna_gain", "must be > 0")
        _require(self.carrier_hz > 0, "system.carrier_hz", "must be > 0")
        _require(self.pathloss_exponent > 0, "system.pathloss_exponent", "must be > 0")
        _require(
            all(e > 0 for e in self.device_efficiency), "system.device_efficiency", "must be > 0"
        )
        _require(self.server_efficiency > 0, "system.server_efficiency", "must be > 0")
        _require(self.server_overhead_s >= 0, "system.server_overhead_s", "must be >= 0")
        _require(
            self.rect_width_m > 0 and self.rect_height_m > 0,
            "system.rect_width_m",
            "rectangle sides must be > 0",
        )
        _require(self.step_m >= 0, "system.step_m", "must be >= 0")
        _require(self.enumeration_cap >= 1, "system.enumeration_cap", "must be >= 1")

        divisor = 2 ** (self.n_levels - 1)
        for idx, (width, height) in enumerate(self.native_resolution):
            _require(
                width > 0 and height > 0 and width % divisor == 0 and height % divisor == 0,
                "system.native_resolution",
                f"device {idx}: {width}x{height} not divisible by 2^(A-1)={divisor}",
            )

    @property
    def k_initial(self) -> int:
        """K_1: explicit value, or min{8N, A^N} when unset."""
        if self.actor.initial_candidates > 0:
            return self.actor.initial_candidates
        return min(8 * self.n_devices, self.action_space_size)

    @property
    def action_space_size(self) -> int:
        """|A|^N."""
        return int(self.n_levels**self.n_devices)

    def with_devices(self, n_devices: int) -> "SystemConfig":
        """Return a copy with N devices, resizing homogeneous per-device fields."""
        updates: dict[str, object] = {"n_devices": n_devices}
        for name in PER_DEVICE_FIELDS:
            value = getattr(self, name)
            if len(set(value)) != 1:
                raise ConfigError(
                    f"system.{name}",
                    "heterogeneous per-device values cannot be resized",
                )
            updates[name] = (value[0],)
        return replace(self, **updates)  # type: ignore[arg-type]


@dataclass(frozen=True)
class DegradationAction:
    """Degradation level per device; level a halves each image side a times."""

    levels: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(int(a) for a in self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def validate(self, n_devices: int, n_levels: int) -> None:
        """Raise DomainError unless the action has N levels in {0..A-1}."""
        if len(self.levels) != n_devices:
            raise DomainError(f"action has {len(self.levels)} levels, expected {n_devices}")
        for n, level in enumerate(self.levels):
            if not 0 <= level < n_levels:
                raise DomainError(f"device {n}: level {level} outside 0..{n_levels - 1}")


@dataclass(frozen=True)
class OneHotAction:
    """Concatenation of N one-hot blocks of length A."""

    bits: tuple[int, ...]

    def as_array(self) -> FloatArray:
        return np.asarray(self.bits, dtype=np.float64)


def encode_one_hot(action: DegradationAction, n_levels: int) -> OneHotAction:
    """Map levels to their binary image.

    Example:
        >>> encode_one_hot(DegradationAction((1,)), 4).bits
        (0, 1, 0, 0)
    """
    bits = [0] * (len(action) * n_levels)
    for n, level in enumerate(action.levels):
        if not 0 <= level < n_levels:
            raise DomainError(f"device {n}: level {level} outside 0..{n_levels - 1}")
        bits[n * n_levels + level] = 1
    return OneHotAction(tuple(bits))


def decode_one_hot(bits: OneHotAction, n_levels: int) -> DegradationAction:
    """Inverse of encode_one_hot; every block must hold exactly one 1."""
    if n_levels < 1 or len(bits.bits) % n_levels != 0:
        raise DomainError(f"length {len(bits.bits)} is not a multiple of A={n_levels}")
    levels = []
    for n in range(len(bits.bits) // n_levels):
        block = bits.bits[n * n_levels : (n + 1) * n_levels]
        if any(b not in (0, 1) for b in block) or sum(block) != 1:
            raise DomainError(f"block {n} is not one-hot: {block}")
        levels.append(block.index(1))
    return DegradationAction(tuple(levels))


def enumerate_actions(n_devices: int, n_levels: int) -> Iterator[DegradationAction]:
    """All A^N actions in lexicographic order."""
    for levels in itertools.product(range(n_levels), repeat=n_devices):
        yield DegradationAction(levels)


@dataclass(frozen=True)
class SlotObservation:
    """What the controller knows at the start of a slot (o_t)."""

    channel_gains: tuple[float, ...]
    prev_confidences: tuple[float, ...]
    prev_latencies: tuple[float, ...]
    prev_action: tuple[int, ...]
    prev_bandwidth: tuple[float, ...]
    prev_utility: float
    slot_index: int

    @classmethod
    def zero(cls, n_devices: int) -> "SlotObservation":
        """Padding observation used before the history is full."""
        zeros = (0.0,) * n_devices
        return cls(zeros, zeros, zeros, (0,) * n_devices, zeros, 0.0, 0)

    @property
    def is_padding(self) -> bool:
        return self.slot_index == 0


@dataclass(frozen=True)
class SlotState:
    """The l most recent observations, oldest first (s_t)."""

    history: tuple[SlotObservation, ...]

    @property
    def current(self) -> SlotObservation:
        return self.history[-1]


class StateTracker:
    """Builds fixed-length SlotState values from per-slot feedback."""

    def __init__(self, n_devices: int, history_length: int) -> None:
        self.n_devices = n_devices
        self.history_length = history_length
        self._history: deque[SlotObservation] = deque(
            [SlotObservation.zero(n_devices)] * history_length, maxlen=history_length
        )
        self._feedback = SlotObservation.zero(n_devices)

    def observe(self, gains: Sequence[float], t: int) -> SlotState:
        """Append the observation for slot t (t >= 1) and return s_t."""
        fb = self._feedback
        obs = SlotObservation(
            channel_gains=tuple(float(h) for h in gains),
            prev_confidences=fb.prev_confidences,
            prev_latencies=fb.prev_latencies,
            prev_action=fb.prev_action,
            prev_bandwidth=fb.prev_bandwidth,
            prev_utility=fb.prev_utility,
            slot_index=t,
        )
        self._history.append(obs)
        return SlotState(tuple(self._history))

    def record_feedback(
        self,
        confidences: Sequence[float],
        latencies: Sequence[float],
        action: DegradationAction,
        bandwidth: Sequence[float],
        utility: float,
    ) -> None:
        """Store the outcome of the slot just executed for the next observation."""
        self._feedback = SlotObservation(
            channel_gains=(0.0,) * self.n_devices,
            prev_confidences=tuple(float(x) for x in confidences),
            prev_latencies=tuple(float(x) for x in latencies),
            prev_action=action.levels,
            prev_bandwidth=tuple(float(x) for x in bandwidth),
            prev_utility=float(utility),
            slot_index=0,
        )


def substream_seed(master_seed: int, label: str) -> np.random.SeedSequence:
    """SeedSequence for one labelled substream of a master seed."""
    if label not in RNG_LABELS:
        raise DomainError(f"unknown RNG label {label!r}; expected one of {RNG_LABELS}")
    return np.random.SeedSequence([int(master_seed), zlib.crc32(label.encode("utf-8"))])


def spawn_rng(master_seed: int, label: str) -> np.random.Generator:
    """Generator for one labelled substream of a master seed."""
    return np.random.default_rng(substream_seed(master_seed, label))


def config_field_names(cls: type) -> list[str]:
    """Dataclass field names, used by the config loader for key validation."""
    return [f.name for f in fields(cls)]
