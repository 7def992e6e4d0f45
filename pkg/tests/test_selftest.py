"""Tests for edge_offload_tool.selftest module."""

from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from edge_offload_tool.core import DomainError
from edge_offload_tool.selftest import (
    Check,
    SelftestScale,
    actor_suite,
    random_problem,
    run_selftest,
)

SMALL = SelftestScale(
    bandwidth_instances=20, lambert_points=2000, gp_caches=3, gp_max_cache=16, training_steps=60
)


class TestCheck:
    """Tests for check outcomes."""

    def test_pass_and_fail(self) -> None:
        """Test the threshold comparison."""
        assert Check("s", "x", 1e-9, 1e-8).passed
        assert not Check("s", "x", 1e-7, 1e-8).passed

    def test_nan_fails(self) -> None:
        """Test that a non-finite measurement never passes."""
        check = Check("s", "x", float("nan"), 1.0)

        assert not check.passed
        assert check.describe().startswith("FAIL  s: x")


class TestRandomProblem:
    """Tests for random bandwidth instances."""

    def test_valid_instance(self) -> None:
        """Test positive gains, powers and weights for N devices."""
        problem = random_problem(np.random.default_rng(0), 5)

        assert problem.n_devices == 5
        assert np.all(problem.gains > 0)
        assert np.all(problem.weights > 0)


class TestRunSelftest:
    """Tests for the full verification run at a reduced scale."""

    def test_numerical_checks_pass(self) -> None:
        """Test that every accuracy check passes; timing depends on the machine."""
        checks = run_selftest(SMALL, seed=0)

        suites = {c.suite for c in checks}
        assert suites == {"bandwidth", "lambert_w", "gp", "actor"}
        failed = [c.describe() for c in checks if not c.passed and "time" not in c.name]
        assert failed == []

    def test_reproducible(self) -> None:
        """Test that a seed fixes every measured value except timings."""
        first = run_selftest(SMALL, seed=2)
        second = run_selftest(SMALL, seed=2)

        for a, b in zip(first, second, strict=True):
            if "time" not in a.name:
                assert a.measured == b.measured


class TestActorSuite:
    """Tests for the actor verification suite."""

    @patch("edge_offload_tool.selftest.train_step", return_value=None)
    def test_untrained_memory_is_an_error(self, mock_train_step: MagicMock) -> None:
        """Test that a training step without enough samples is reported, not skipped."""
        with pytest.raises(DomainError, match="fewer samples than one batch"):
            actor_suite(SMALL, np.random.default_rng(0))

        mock_train_step.assert_called_once()
