"""Learned candidate generator.

A small feed-forward network maps the slot state to per-device preference
scores over degradation levels. The scores are quantized into a candidate
set from two streams: a direct stream (the per-device argmax followed by
softmax samples) and a noise stream (softmax samples of Gaussian-perturbed
scores). The set is ordered by L2 distance to the scores, and its size
adapts to how deep into the list the critic has recently picked.
"""

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from edge_offload_tool.core import (
    DegradationAction,
    DomainError,
    FloatArray,
    SlotObservation,
    SlotState,
    SystemConfig,
    encode_one_hot,
    spawn_rng,
)
from edge_offload_tool.env import mean_channel_gain
from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
REFERENCE_DISTANCE_M = 50.0
LATENCY_CAP_S = 10.0
PROB_CLAMP = 1e-6


# State encoding ------------------------------------------------------------


def observation_size(n_devices: int, n_levels: int) -> int:
    """Features per observation: gains, confidences, latencies, action, bandwidth, utility."""
    return 4 * n_devices + n_devices * n_levels + 1


def feature_size(cfg: SystemConfig) -> int:
    return cfg.actor.history_length * observation_size(cfg.n_devices, cfg.n_levels)


def _encode_observation(obs: SlotObservation, cfg: SystemConfig, log_ref: float) -> FloatArray:
    n, a = cfg.n_devices, cfg.n_levels
    if obs.is_padding:
        return np.zeros(observation_size(n, a))
    gains = np.log10(np.asarray(obs.channel_gains)) - log_ref
    latencies = np.minimum(np.asarray(obs.prev_latencies, dtype=np.float64), LATENCY_CAP_S)
    if obs.slot_index <= 1:
        # No previous slot: the previous action is all-zero, not level 0
        action = np.zeros(n * a)
    else:
        action = encode_one_hot(DegradationAction(obs.prev_action), a).as_array()
    return np.concatenate(
        [
            gains,
            np.asarray(obs.prev_confidences, dtype=np.float64),
            latencies,
            action,
            np.asarray(obs.prev_bandwidth, dtype=np.float64),
            [obs.prev_utility],
        ]
    )


def state_features(state: SlotState, cfg: SystemConfig) -> FloatArray:
    """Flatten a SlotState into the network input.

    Gains enter as log10(h) relative to the mean gain at 50 m; latencies in
    seconds (capped at 10 s); confidences, bandwidth and utility raw; the
    previous action one-hot. Padding observations become zeros.

    Raises:
        DomainError: If the history length does not match the configuration
    """
    if len(state.history) != cfg.actor.history_length:
        raise DomainError(
            f"state has {len(state.history)} observations, expected {cfg.actor.history_length}"
        )
    log_ref = float(np.log10(mean_channel_gain(REFERENCE_DISTANCE_M, cfg)))
    return np.concatenate([_encode_observation(obs, cfg, log_ref) for obs in state.history])


# Network -------------------------------------------------------------------


def _sigmoid(z: FloatArray) -> FloatArray:
    return np.asarray(expit(z))


class PreferenceNet:
    """tanh hidden layers, logistic output; parameters are plain numpy arrays.

    Example:
        >>> net = PreferenceNet([4, 8, 6], np.random.default_rng(0), zero_output=True)
        >>> net.forward(np.zeros(4)).tolist()
        [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        zero_output: bool = False,
    ) -> None:
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise DomainError(f"invalid layer sizes {sizes}")
        rng = rng or np.random.default_rng(0)
        self.layer_sizes = sizes
        self.weights: list[FloatArray] = []
        self.biases: list[FloatArray] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
            last = i == len(sizes) - 2
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))  # Xavier uniform
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameters(self) -> list[FloatArray]:
        """Interleaved [W1, b1, W2, b2, ...]; arrays are updated in place."""
        params: list[FloatArray] = []
        for w, b in zip(self.weights, self.biases, strict=True):
            params.extend([w, b])
        return params

    def _check_input(self, x: FloatArray) -> FloatArray:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape[-1] != self.n_inputs or arr.ndim not in (1, 2):
            raise DomainError(f"expected input of width {self.n_inputs}, got shape {arr.shape}")
        return arr

    def _forward_pass(self, x: FloatArray) -> tuple[list[FloatArray], FloatArray]:
        activations = [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1], strict=True):
            a = np.tanh(a @ w + b)
            activations.append(a)
        logits = a @ self.weights[-1] + self.biases[-1]
        return activations, logits

    def forward(self, x: FloatArray) -> FloatArray:
        """Preference scores in (0, 1) for one state (1-D) or a batch (2-D)."""
        arr = self._check_input(x)
        _, logits = self._forward_pass(np.atleast_2d(arr))
        out = _sigmoid(logits)
        return out[0] if arr.ndim == 1 else out

    def loss_and_gradients(
        self, x: FloatArray, targets: FloatArray
    ) -> tuple[float, list[FloatArray]]:
        """BCE loss of a batch and its gradient, ordered like `parameters`."""
        xb = np.atleast_2d(self._check_input(x))
        yb = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if yb.shape != (xb.shape[0], self.n_outputs):
            raise DomainError(f"targets shape {yb.shape} does not match outputs")
        activations, logits = self._forward_pass(xb)
        probs = _sigmoid(logits)
        loss = bce_loss(probs, yb)

        batch = xb.shape[0]
        inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
        delta = np.where(inside, (probs - yb) / batch, 0.0)
        grads: list[FloatArray] = []
        for layer in range(len(self.weights) - 1, -1, -1):
            a_prev = activations[layer]
            grads.append(delta.sum(axis=0))
            grads.append(a_prev.T @ delta)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (1.0 - a_prev**2)
        grads.reverse()
        return loss, grads


def bce_loss(predictions: FloatArray, targets: FloatArray) -> float:
    """Binary cross-entropy summed over outputs and averaged over the batch.

    Predictions are clamped to [1e-6, 1 - 1e-6].

    Example:
        >>> round(bce_loss(np.full((1, 2), 0.5), np.array([[1.0, 0.0]])), 6)
        1.386294
    """
    p = np.clip(np.atleast_2d(predictions), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.atleast_2d(targets)
    per_sample = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1)
    return float(per_sample.mean())


class AdamOptimizer:
    """Adaptive-moment gradient descent over a list of arrays."""

    def __init__(
        self,
        learning_rate: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m: list[FloatArray] = []
        self._v: list[FloatArray] = []

    def step(self, params: list[FloatArray], grads: list[FloatArray]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.steps += 1
        correction = math.sqrt(1 - self.beta2**self.steps) / (1 - self.beta1**self.steps)
        lr = self.learning_rate * correction
        for p, g, m, v in zip(params, grads, self._m, self._v, strict=True):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g**2
            p -= lr * m / (np.sqrt(v) + self.eps)


def clip_global_norm(grads: list[FloatArray], max_norm: float) -> tuple[list[FloatArray], float]:
    """Scale all gradients together so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g**2)) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return grads, total


# Replay --------------------------------------------------------------------


class ReplayMemory:
    """Ring buffer of (state features, one-hot target) pairs."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise DomainError("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[tuple[FloatArray, FloatArray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, features: FloatArray, target: FloatArray) -> None:
        self._items.append((np.asarray(features, dtype=np.float64), np.asarray(target)))

    @property
    def ready(self) -> bool:
        """Training starts once half the capacity is filled."""
        return len(self._items) >= self.capacity / 2

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[FloatArray, FloatArray]:
        """Uniform minibatch without replacement (the whole memory if smaller)."""
        if not self._items:
            raise DomainError("replay memory is empty")
        size = min(batch_size, len(self._items))
        idx = rng.choice(len(self._items), size=size, replace=False)
        xs = np.stack([self._items[i][0] for i in idx])
        ys = np.stack([self._items[i][1] for i in idx]).astype(np.float64)
        return xs, ys


def train_step(
    memory: ReplayMemory,
    net: PreferenceNet,
    optimizer: AdamOptimizer,
    batch_size: int,
    rng: np.random.Generator,
    grad_clip: float = 5.0,
) -> float | None:
    """One clipped Adam step on a uniform minibatch.

    Returns:
        Minibatch loss before the update, or None while the memory holds
        fewer than half its capacity
    """
    if not memory.ready:
        return None
    xs, ys = memory.sample(batch_size, rng)
    loss, grads = net.loss_and_gradients(xs, ys)
    grads, norm = clip_global_norm(grads, grad_clip)
    optimizer.step(net.parameters, grads)
    logger.debug("actor train step %d: loss=%.6f grad_norm=%.3g", optimizer.steps, loss, norm)
    return loss


# Candidates ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Candidate actions ordered by distance to the preference scores."""

    actions: tuple[DegradationAction, ...]
    one_hot: FloatArray  # (K, N*A)
    distances: FloatArray  # (K,)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, index: int) -> DegradationAction:
        return self.actions[index]


def _softmax_rows(scores: FloatArray) -> FloatArray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return np.asarray(e / e.sum(axis=1, keepdims=True))


def _sample_levels(scores: FloatArray, rng: np.random.Generator) -> FloatArray:
    """One level per row drawn from softmax(row)."""
    probs = _softmax_rows(scores)
    u = rng.random(scores.shape[0])
    idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.asarray(np.minimum(idx, scores.shape[1] - 1))


def generate_candidates(
    preferences: FloatArray,
    k: int,
    n_devices: int,
    n_levels: int,
    sample_rng: np.random.Generator,
    noise_rng: np.random.Generator,
) -> CandidateSet:
    """Quantize preference scores into K candidate actions.

    The direct stream holds max(K // 2, 1) candidates: the per-device argmax
    (ties to the lowest level) followed by softmax samples. The noise stream
    fills the rest with softmax samples of scores perturbed by standard
    Gaussian noise, redrawn per candidate. Duplicates are kept; the set is
    sorted stably by L2 distance to the scores.

    Raises:
        DomainError: If K < 1 or the scores have the wrong length
    """
    if k < 1:
        raise DomainError(f"candidate count must be >= 1, got {k}")
    scores = np.asarray(preferences, dtype=np.float64)
    if scores.shape != (n_devices * n_levels,):
        raise DomainError(f"expected {n_devices * n_levels} scores, got {scores.shape}")
    blocks = scores.reshape(n_devices, n_levels)

    n_direct = max(k // 2, 1)
    rows = [np.argmax(blocks, axis=1)]
    for _ in range(n_direct - 1):
        rows.append(_sample_levels(blocks, sample_rng))
    for _ in range(k - n_direct):
        perturbed = blocks + noise_rng.standard_normal(blocks.shape)
        rows.append(_sample_levels(perturbed, sample_rng))

    levels = np.stack(rows).astype(np.int64)
    one_hot = np.zeros((k, n_devices * n_levels))
    offsets = np.arange(n_devices) * n_levels
    one_hot[np.arange(k)[:, None], offsets[None, :] + levels] = 1.0
    distances = np.linalg.norm(one_hot - scores[None, :], axis=1)
    order = np.argsort(distances, kind="stable")
    return CandidateSet(
        actions=tuple(DegradationAction(tuple(int(v) for v in levels[i])) for i in order),
        one_hot=one_hot[order],
        distances=distances[order],
    )


def update_k(window: Sequence[int], k_prev: int, k_initial: int, t: int, k_interval: int) -> int:
    """Candidate count for slot t.

    Example:
        >>> update_k([1, 3, 2], k_prev=24, k_initial=24, t=32, k_interval=32)
        4
    """
    if t < 1:
        raise DomainError(f"slot index must be >= 1, got {t}")
    if t == 1:
        return k_initial
    if t % k_interval == 0 and len(window) > 0:
        return min(max(window) + 1, k_initial)
    return k_prev


# Checkpoints ---------------------------------------------------------------


def save_checkpoint(net: PreferenceNet, path: Path) -> None:
    """Write the network as a versioned .npz (layer sizes plus row-major weights)."""
    arrays: dict[str, FloatArray] = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "layer_sizes": np.array(net.layer_sizes, dtype=np.int64),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases, strict=True)):
        arrays[f"W{i}"] = np.ascontiguousarray(w)
        arrays[f"b{i}"] = b
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)
    logger.info("Saved actor checkpoint to %s", path)


def load_checkpoint(path: Path) -> PreferenceNet:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        DomainError: On an unknown format version or inconsistent shapes
    """
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DomainError(f"unsupported checkpoint version {version}")
        sizes = [int(s) for s in data["layer_sizes"]]
        net = PreferenceNet(sizes)
        for i in range(len(sizes) - 1):
            w, b = data[f"W{i}"], data[f"b{i}"]
            if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                raise DomainError(f"layer {i}: shape {w.shape} does not match {sizes}")
            net.weights[i] = w.astype(np.float64)
            net.biases[i] = b.astype(np.float64)
    return net


# Stateful actor ------------------------------------------------------------


class LearnedActor:
    """Network, optimizer, replay memory and candidate-count state of one run."""

    def __init__(self, cfg: SystemConfig, seed: int) -> None:
        self.cfg = cfg
        acfg = cfg.actor
        sizes = [feature_size(cfg), *acfg.hidden_widths, cfg.n_devices * cfg.n_levels]
        self.net = PreferenceNet(sizes, spawn_rng(seed, "actor-init"), acfg.zero_output_init)
        self.optimizer = AdamOptimizer(acfg.learning_rate)
        self.memory = ReplayMemory(acfg.memory_size)
        self.k = cfg.k_initial
        self.window: deque[int] = deque(maxlen=acfg.k_interval)
        self.last_loss: float | None = None
        self._sample_rng = spawn_rng(seed, "actor-sample")
        self._noise_rng = spawn_rng(seed, "actor-noise")
        self._train_rng = spawn_rng(seed, "actor-train")

    def propose(self, state: SlotState, t: int) -> tuple[FloatArray, CandidateSet]:
        """Update K for slot t, then generate its candidate set."""
        k = update_k(self.window, self.k, self.cfg.k_initial, t, self.cfg.actor.k_interval)
        if k != self.k:
            logger.debug("slot %d: K %d -> %d", t, self.k, k)
        self.k = k
        features = state_features(state, self.cfg)
        preferences = self.net.forward(features)
        candidates = generate_candidates(
            preferences,
            k,
            self.cfg.n_devices,
            self.cfg.n_levels,
            self._sample_rng,
            self._noise_rng,
        )
        return features, candidates

    def learn(self, features: FloatArray, action: DegradationAction, k_star: int, t: int) -> None:
        """Store the chosen action and train every train_interval slots."""
        target = encode_one_hot(action, self.cfg.n_levels).as_array()
        self.memory.add(features, target)
        self.window.append(k_star)
        if t % self.cfg.actor.train_interval == 0:
            loss = train_step(
                self.memory,
                self.net,
                self.optimizer,
                self.cfg.actor.batch_size,
                self._train_rng,
                self.cfg.actor.grad_clip,
            )
            if loss is not None:
                self.last_loss = loss
