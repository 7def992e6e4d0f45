"""edge-offload-tool: learned-actor + Bayesian-optimization offloading control.

Simulates multi-device edge inference with content-dependent accuracy,
FDMA bandwidth sharing and per-slot degradation decisions, and benchmarks
the LAB controller against exhaustive and fixed baselines.
"""

__version__ = "0.1.0"
