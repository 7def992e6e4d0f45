"""Tests for edge-offload-tool."""
