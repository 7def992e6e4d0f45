"""Tests for edge_offload_tool.actor module."""

import math
from pathlib import Path

import numpy as np
import pytest

from edge_offload_tool.actor import (
    AdamOptimizer,
    LearnedActor,
    PreferenceNet,
    ReplayMemory,
    bce_loss,
    clip_global_norm,
    feature_size,
    generate_candidates,
    load_checkpoint,
    observation_size,
    save_checkpoint,
    state_features,
    train_step,
    update_k,
)
from edge_offload_tool.core import (
    ActorConfig,
    DegradationAction,
    DomainError,
    OneHotAction,
    StateTracker,
    SystemConfig,
    decode_one_hot,
    encode_one_hot,
)


def _tiny_config(**actor: object) -> SystemConfig:
    settings: dict[str, object] = {
        "hidden_widths": (8,),
        "memory_size": 8,
        "batch_size": 4,
        "train_interval": 2,
        "k_interval": 4,
    }
    settings.update(actor)
    return SystemConfig(actor=ActorConfig(**settings))  # type: ignore[arg-type]


def _filled_memory(rng: np.random.Generator, size: int, n_in: int, n_out: int) -> ReplayMemory:
    memory = ReplayMemory(size)
    for _ in range(size):
        target = np.zeros(n_out)
        target[rng.integers(0, n_out)] = 1.0
        memory.add(rng.normal(size=n_in), target)
    return memory


class TestStateFeatures:
    """Tests for state encoding."""

    def test_sizes(self) -> None:
        """Test the per-observation width 4N + NA + 1."""
        assert observation_size(3, 4) == 25
        assert feature_size(SystemConfig(actor=ActorConfig(history_length=2))) == 50

    def test_first_slot_encoding(self) -> None:
        """Test that the first slot has no previous action and a gain near zero at 50 m."""
        cfg = SystemConfig()
        state = StateTracker(3, 1).observe([5.4e-9] * 3, 1)

        features = state_features(state, cfg)

        assert features.shape == (25,)
        assert np.all(np.abs(features[:3]) < 0.05)
        np.testing.assert_array_equal(features[9:21], np.zeros(12))

    def test_history_mismatch(self) -> None:
        """Test that the history length must match the configuration."""
        state = StateTracker(3, 2).observe([1e-9] * 3, 1)

        with pytest.raises(DomainError, match="observations"):
            state_features(state, SystemConfig())


class TestPreferenceNet:
    """Tests for the preference network."""

    def test_zero_output_layer(self) -> None:
        """Test that a zero final layer outputs 0.5 everywhere."""
        net = PreferenceNet([25, 8, 12], np.random.default_rng(0), zero_output=True)

        np.testing.assert_array_equal(net.forward(np.ones(25)), np.full(12, 0.5))

    def test_output_shape_and_range(self) -> None:
        """Test N*A outputs strictly inside (0, 1)."""
        net = PreferenceNet([25, 16, 12], np.random.default_rng(1))
        out = net.forward(np.random.default_rng(2).normal(size=25))

        assert out.shape == (12,)
        assert np.all((out > 0) & (out < 1))

    def test_deterministic(self) -> None:
        """Test that the same state gives the same output."""
        net = PreferenceNet([5, 4, 4], np.random.default_rng(3))
        x = np.arange(5.0)

        np.testing.assert_array_equal(net.forward(x), net.forward(x))

    def test_batch_matches_single(self) -> None:
        """Test that a batch row equals the single-state forward pass."""
        net = PreferenceNet([5, 4, 4], np.random.default_rng(4))
        batch = np.random.default_rng(5).normal(size=(3, 5))

        np.testing.assert_allclose(net.forward(batch)[1], net.forward(batch[1]))

    def test_shape_mismatch(self) -> None:
        """Test that a wrong input width is rejected."""
        net = PreferenceNet([5, 4, 4])

        with pytest.raises(DomainError, match="width"):
            net.forward(np.zeros(6))

    def test_gradients_match_finite_differences(self) -> None:
        """Test backpropagation against central differences on a tiny network."""
        rng = np.random.default_rng(6)
        net = PreferenceNet([5, 4, 4], rng)
        x = rng.normal(size=(6, 5))
        y = (rng.random((6, 4)) > 0.5).astype(np.float64)
        step = 1e-6

        _, grads = net.loss_and_gradients(x, y)

        for param, grad in zip(net.parameters, grads, strict=True):
            numeric = np.zeros_like(param)
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + step
                up, _ = net.loss_and_gradients(x, y)
                param[idx] = original - step
                down, _ = net.loss_and_gradients(x, y)
                param[idx] = original
                numeric[idx] = (up - down) / (2 * step)
            assert np.linalg.norm(grad - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-8)


class TestLoss:
    """Tests for binary cross-entropy."""

    def test_uniform_predictions(self) -> None:
        """Test log 2 per output bit at p = 0.5."""
        targets = np.zeros((3, 12))
        targets[:, 0] = 1.0

        assert bce_loss(np.full((3, 12), 0.5), targets) == pytest.approx(12 * math.log(2))

    def test_perfect_predictions(self) -> None:
        """Test that matching predictions stay within the clamp floor."""
        targets = np.zeros((2, 12))
        targets[:, [1, 5, 9]] = 1.0

        assert bce_loss(targets, targets) <= 1e-5 * 12


class TestOptimizer:
    """Tests for Adam and gradient clipping."""

    def test_adam_moves_against_gradient(self) -> None:
        """Test that the first Adam step has magnitude lr in the descent direction."""
        params = [np.array([1.0, -1.0])]
        optimizer = AdamOptimizer(0.1)

        optimizer.step(params, [np.array([2.0, -3.0])])

        np.testing.assert_allclose(params[0], [0.9, -0.9], atol=1e-6)
        assert optimizer.steps == 1

    def test_clip_scales_jointly(self) -> None:
        """Test that clipping keeps directions and caps the joint norm."""
        grads = [np.array([3.0]), np.array([4.0])]

        clipped, norm = clip_global_norm(grads, 1.0)

        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(np.concatenate(clipped), [0.6, 0.8])

    def test_clip_leaves_small_gradients(self) -> None:
        """Test that gradients under the cap are untouched."""
        grads = [np.array([0.3, 0.4])]

        clipped, _ = clip_global_norm(grads, 5.0)

        assert clipped is grads


class TestReplayMemory:
    """Tests for the replay memory and training step."""

    def test_ready_at_half_capacity(self) -> None:
        """Test that training waits for half the capacity."""
        memory = ReplayMemory(4)
        memory.add(np.zeros(2), np.zeros(2))
        assert not memory.ready
        memory.add(np.zeros(2), np.zeros(2))
        assert memory.ready

    def test_eviction(self) -> None:
        """Test that older samples are replaced by newer ones."""
        memory = ReplayMemory(2)
        for value in (1.0, 2.0, 3.0):
            memory.add(np.array([value]), np.array([1.0]))

        xs, _ = memory.sample(10, np.random.default_rng(0))

        assert len(memory) == 2
        assert sorted(xs[:, 0].tolist()) == [2.0, 3.0]

    def test_train_step_waits(self) -> None:
        """Test the no-op signal before the memory is ready."""
        memory = ReplayMemory(8)
        memory.add(np.zeros(5), np.zeros(4))
        net = PreferenceNet([5, 4, 4])
        before = [p.copy() for p in net.parameters]

        loss = train_step(memory, net, AdamOptimizer(), 4, np.random.default_rng(0))

        assert loss is None
        for old, new in zip(before, net.parameters, strict=True):
            np.testing.assert_array_equal(old, new)

    def test_loss_decreases_on_frozen_memory(self) -> None:
        """Test that 100 full-batch steps lower the loss."""
        rng = np.random.default_rng(7)
        memory = _filled_memory(rng, 32, 5, 4)
        net = PreferenceNet([5, 8, 4], rng)
        optimizer = AdamOptimizer(0.01)

        losses = [train_step(memory, net, optimizer, 32, rng) for _ in range(100)]

        values = [v for v in losses if v is not None]
        assert len(values) == 100
        assert np.mean(values[-10:]) < np.mean(values[:10])


class TestCandidates:
    """Tests for candidate generation."""

    def test_first_candidate_is_argmax(self) -> None:
        """Test that the head of the set is the per-device argmax."""
        scores = np.array([0.1, 0.6, 0.2, 0.3, 0.75, 0.92, 0.4, 0.13])

        candidates = generate_candidates(
            scores, 6, 2, 4, np.random.default_rng(0), np.random.default_rng(1)
        )

        assert candidates[0] == DegradationAction((1, 1))
        assert len(candidates) == 6

    def test_argmax_ties_go_to_lowest_level(self) -> None:
        """Test that equal scores pick level 0."""
        candidates = generate_candidates(
            np.full(4, 0.5), 1, 2, 2, np.random.default_rng(0), np.random.default_rng(1)
        )

        assert candidates.actions == (DegradationAction((0, 0)),)

    def test_single_candidate_is_deterministic(self) -> None:
        """Test that K = 1 only holds the direct argmax."""
        scores = np.random.default_rng(2).random(12)
        expected = tuple(int(i) for i in scores.reshape(3, 4).argmax(axis=1))

        candidates = generate_candidates(
            scores, 1, 3, 4, np.random.default_rng(3), np.random.default_rng(4)
        )

        assert len(candidates) == 1
        assert candidates[0].levels == expected

    def test_sorted_and_valid(self) -> None:
        """Test ascending distances and decodable one-hot rows."""
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores = rng.random(12)
            k = int(rng.integers(1, 25))
            candidates = generate_candidates(scores, k, 3, 4, rng, rng)

            assert len(candidates) == k
            assert np.all(np.diff(candidates.distances) >= 0)
            for action, row in zip(candidates.actions, candidates.one_hot, strict=True):
                bits = OneHotAction(tuple(int(b) for b in row))
                assert decode_one_hot(bits, 4) == action
            np.testing.assert_allclose(
                candidates.distances, np.linalg.norm(candidates.one_hot - scores, axis=1)
            )

    def test_head_is_closest(self) -> None:
        """Test that the argmax candidate has the smallest distance."""
        scores = np.random.default_rng(6).random(12)
        argmax = DegradationAction(tuple(int(i) for i in scores.reshape(3, 4).argmax(axis=1)))

        candidates = generate_candidates(
            scores, 12, 3, 4, np.random.default_rng(7), np.random.default_rng(8)
        )
        head = np.linalg.norm(encode_one_hot(argmax, 4).as_array() - scores)

        assert candidates.distances[0] == pytest.approx(head)

    def test_invalid_count(self) -> None:
        """Test that K must be at least 1."""
        with pytest.raises(DomainError):
            generate_candidates(
                np.zeros(4), 0, 2, 2, np.random.default_rng(0), np.random.default_rng(0)
            )


class TestUpdateK:
    """Tests for the candidate-count rule."""

    def test_first_slot(self) -> None:
        """Test that t = 1 uses K_1."""
        assert update_k([], 5, 24, 1, 32) == 24

    def test_update_boundary(self) -> None:
        """Test max k* + 1 at an update boundary."""
        assert update_k([1, 3, 2], 24, 24, 32, 32) == 4

    def test_cap(self) -> None:
        """Test that K never exceeds K_1."""
        assert update_k([24, 1], 10, 24, 64, 32) == 24

    def test_between_updates(self) -> None:
        """Test that K is kept between boundaries."""
        assert update_k([1], 7, 24, 33, 32) == 7

    def test_empty_window(self) -> None:
        """Test that an empty window keeps the previous K."""
        assert update_k([], 7, 24, 32, 32) == 7

    def test_invalid_slot(self) -> None:
        """Test that t must be >= 1."""
        with pytest.raises(DomainError):
            update_k([], 7, 24, 0, 32)


class TestCheckpoint:
    """Tests for actor checkpoints."""

    def test_save_and_load(self, tmp_path: Path) -> None:
        """Test that a loaded network reproduces the saved one."""
        net = PreferenceNet([5, 4, 4], np.random.default_rng(9))
        path = tmp_path / "actor.npz"
        x = np.random.default_rng(10).normal(size=5)

        save_checkpoint(net, path)
        loaded = load_checkpoint(path)

        assert loaded.layer_sizes == [5, 4, 4]
        np.testing.assert_array_equal(loaded.forward(x), net.forward(x))

    def test_unknown_version(self, tmp_path: Path) -> None:
        """Test that a future format version is refused."""
        path = tmp_path / "actor.npz"
        np.savez(path, format_version=np.array(99), layer_sizes=np.array([2, 2]))

        with pytest.raises(DomainError, match="version"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path: Path) -> None:
        """Test that weights must match the declared layer sizes."""
        path = tmp_path / "actor.npz"
        np.savez(
            path,
            format_version=np.array(1),
            layer_sizes=np.array([2, 2]),
            W0=np.zeros((3, 2)),
            b0=np.zeros(2),
        )

        with pytest.raises(DomainError, match="layer 0"):
            load_checkpoint(path)


class TestLearnedActor:
    """Tests for the stateful actor."""

    def _run(self, actor: LearnedActor, slots: int) -> list[int]:
        tracker = StateTracker(3, 1)
        sizes = []
        for t in range(1, slots + 1):
            features, candidates = actor.propose(tracker.observe([1e-9, 2e-9, 3e-9], t), t)
            sizes.append(len(candidates))
            actor.learn(features, candidates[0], 1, t)
        return sizes

    def test_candidate_count_shrinks(self) -> None:
        """Test that always picking the head shrinks K to 2 at the first boundary."""
        cfg = _tiny_config()
        sizes = self._run(LearnedActor(cfg, seed=0), 6)

        assert sizes[:3] == [cfg.k_initial] * 3
        assert sizes[3:] == [2, 2, 2]

    def test_training_starts_at_half_memory(self) -> None:
        """Test that the first loss appears once the memory is half full."""
        actor = LearnedActor(_tiny_config(), seed=0)

        self._run(actor, 2)
        assert actor.last_loss is None
        self._run(actor, 4)
        assert actor.last_loss is not None
        assert actor.optimizer.steps >= 1

    def test_same_seed_same_candidates(self) -> None:
        """Test that two actors with one seed propose identical sets."""
        state = StateTracker(3, 1).observe([1e-9, 2e-9, 3e-9], 1)
        first = LearnedActor(_tiny_config(), seed=4).propose(state, 1)[1]
        second = LearnedActor(_tiny_config(), seed=4).propose(state, 1)[1]

        assert first.actions == second.actions
