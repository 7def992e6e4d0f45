"""Run manifests, per-slot CSV export, JSON summaries and figure data.

Every results directory holds a `manifest.json`, a `summary.json` and one
per-slot CSV per sweep point. The manifest hash covers everything that
determines the results (configuration, seeds, policies, sweep, version) and
is embedded in every CSV row and in the summary, so data from different
experiments cannot be mixed silently.
"""

import csv
import hashlib
import json
import math
import os
import statistics
from collections import defaultdict
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from edge_offload_tool import __version__
from edge_offload_tool.logging_config import get_logger
from edge_offload_tool.orchestrator import (
    OPTIMALITY_GAP_WINDOW,
    RunResult,
    pooled,
    trailing_mean,
)

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
RUN_SLOTS_FILE = "slots.csv"
HASH_LENGTH = 12

FIGURES = ("tradeoff", "optgap", "pathloss", "scale", "candidates")
FIGURE_COLUMNS = ("figure", "x", "series", "y", "stderr")

# figure -> (required sweep key, required policies, metrics)
_SWEEP_FIGURES: dict[str, tuple[str, tuple[str, ...], tuple[str, ...]]] = {
    "tradeoff": (
        "system.latency_weight",
        (),
        ("mean_utility", "mean_latency", "mean_confidence", "mean_accuracy"),
    ),
    "pathloss": (
        "system.pathloss_exponent",
        (),
        ("mean_utility", "mean_latency", "mean_confidence", "mean_accuracy"),
    ),
    "scale": (
        "system.n_devices",
        (),
        ("mean_utility", "mean_latency", "mean_accuracy", "mean_decision_ms"),
    ),
    "candidates": (
        "system.n_devices",
        ("lab", "full_bo"),
        ("mean_candidates", "evaluations_per_slot", "mean_decision_ms"),
    ),
}


class ResultsError(ValueError):
    """A results directory is missing data or mixes experiments."""


def slots_file(point: int | None) -> str:
    """CSV name of a sweep point, or of a single run when point is None."""
    return RUN_SLOTS_FILE if point is None else f"slots-p{point:02d}.csv"


@dataclass(frozen=True)
class RunManifest:
    """What was run; written before execution starts."""

    config: dict[str, Any]
    seeds: tuple[int, ...]
    policies: tuple[str, ...]
    sweep_key: str | None = None
    sweep_values: tuple[Any, ...] = ()
    version: str = __version__
    outputs: tuple[str, ...] = field(default=(), compare=False)

    @property
    def hash(self) -> str:
        """Short SHA-256 over the result-determining fields (not the output paths)."""
        payload = {
            "config": self.config,
            "seeds": list(self.seeds),
            "policies": list(self.policies),
            "sweep": {"key": self.sweep_key, "values": list(self.sweep_values)},
            "version": self.version,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:HASH_LENGTH]

    @property
    def n_points(self) -> int:
        return len(self.sweep_values) if self.sweep_key else 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "hash": self.hash,
            "version": self.version,
            "seeds": list(self.seeds),
            "policies": list(self.policies),
            "sweep": {"key": self.sweep_key, "values": list(self.sweep_values)}
            if self.sweep_key
            else None,
            "outputs": list(self.outputs),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        try:
            sweep = data.get("sweep") or {}
            manifest = cls(
                config=data["config"],
                seeds=tuple(int(s) for s in data["seeds"]),
                policies=tuple(str(p) for p in data["policies"]),
                sweep_key=sweep.get("key"),
                sweep_values=tuple(sweep.get("values", ())),
                version=str(data["version"]),
                outputs=tuple(data.get("outputs", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ResultsError(f"malformed manifest: {e}") from e
        if data.get("hash") != manifest.hash:
            raise ResultsError(
                f"manifest hash {data.get('hash')} does not match its content ({manifest.hash})"
            )
        return manifest


def write_json(path: Path, payload: Any) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _fmt(value: float) -> str:
    # repr is locale independent and round-trips
    return repr(float(value))


def slot_columns(n_devices: int) -> list[str]:
    """Header of the per-slot CSV for N devices."""
    per_device = ("a", "b", "alpha", "c", "tau_d", "tau_o", "tau_c", "u")
    columns = ["seed", "t", "policy"]
    for name in per_device:
        columns.extend(f"{name}_{n}" for n in range(1, n_devices + 1))
    columns.extend(["U", "K_t", "k_star", "decision_ms", "manifest"])
    return columns


def slot_rows(result: RunResult, manifest_hash: str, timing: bool) -> Iterator[list[str]]:
    """One CSV row per slot; decision_ms stays empty unless timing is requested."""
    for r in result.records:
        row = [str(result.seed), str(r.t), str(result.policy)]
        row.extend(str(a) for a in r.action.levels)
        per_device = (r.bandwidth, r.confidences, r.accuracies, r.tau_d, r.tau_o, r.tau_c)
        for values in (*per_device, r.utilities):
            row.extend(_fmt(v) for v in values)
        row.extend(
            [
                _fmt(r.total_utility),
                str(r.k_t),
                str(r.k_star),
                _fmt(r.decision_ms) if timing else "",
                manifest_hash,
            ]
        )
        yield row


def write_slots_csv(
    path: Path, results: Sequence[RunResult], manifest_hash: str, timing: bool = False
) -> int:
    """Write the per-slot records of several runs; returns the data row count."""
    if not results:
        raise ResultsError("no results to write")
    n_devices = len(results[0].records[0].action)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(slot_columns(n_devices))
        for result in results:
            for row in slot_rows(result, manifest_hash, timing):
                writer.writerow(row)
                count += 1
    logger.info("Wrote %d slot rows to %s", count, path)
    return count


def summarize_point(results: Sequence[RunResult], timing: bool = False) -> dict[str, Any]:
    """Per-seed aggregates and pooled mean/stddev, grouped by policy."""
    by_policy: dict[str, list[RunResult]] = defaultdict(list)
    for result in results:
        by_policy[str(result.policy)].append(result)
    out: dict[str, Any] = {}
    for policy, runs in by_policy.items():
        per_seed = [r.to_dict() for r in runs]
        pool = pooled(runs)
        if not timing:
            # Wall-clock values would make the summary differ between re-runs
            for row in per_seed:
                row.pop("mean_decision_ms", None)
            pool.pop("mean_decision_ms", None)
        out[policy] = {"seeds": per_seed, "pooled": pool}
    return out


def build_summary(manifest: RunManifest, points: Sequence[dict[str, Any]]) -> dict[str, Any]:
    sweep_values = manifest.sweep_values if manifest.sweep_key else (None,)
    return {
        "manifest": manifest.hash,
        "sweep_key": manifest.sweep_key,
        "points": [
            {
                "index": i,
                "value": value,
                "slots_file": slots_file(i if manifest.sweep_key else None),
                "policies": point,
            }
            for i, (value, point) in enumerate(zip(sweep_values, points, strict=True))
        ],
    }


# Figures -------------------------------------------------------------------


@dataclass(frozen=True)
class ResultsBundle:
    """A loaded results directory."""

    root: Path
    manifest: RunManifest
    summary: dict[str, Any]


def _read_json(path: Path) -> Any:
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ResultsError(f"missing {path.name} in {path.parent}") from e
    except json.JSONDecodeError as e:
        raise ResultsError(f"{path}: invalid JSON: {e}") from e


def load_results(root: Path) -> ResultsBundle:
    """Read and cross-check the manifest and summary of a results directory.

    Raises:
        ResultsError: Missing files or a summary from another manifest
    """
    if not root.is_dir():
        raise ResultsError(f"results directory {root} does not exist")
    manifest = RunManifest.from_dict(_read_json(root / MANIFEST_FILE))
    summary = _read_json(root / SUMMARY_FILE)
    if summary.get("manifest") != manifest.hash:
        raise ResultsError(
            f"summary belongs to manifest {summary.get('manifest')}, not {manifest.hash}"
        )
    return ResultsBundle(root, manifest, summary)


def _stderr(pool: dict[str, float], n_seeds: int) -> float:
    return pool["stddev"] / math.sqrt(n_seeds) if n_seeds > 0 else 0.0


def _sweep_figure(bundle: ResultsBundle, figure: str) -> list[tuple[Any, ...]]:
    key, required, metrics = _SWEEP_FIGURES[figure]
    manifest = bundle.manifest
    missing: list[str] = []
    if manifest.sweep_key != key:
        missing.append(f"sweep over {key} (found {manifest.sweep_key or 'no sweep'})")
    missing.extend(f"policy {p}" for p in required if p not in manifest.policies)
    if missing:
        raise ResultsError(f"figure {figure} needs: " + "; ".join(missing))

    points = bundle.summary.get("points", [])
    present = {p["index"] for p in points}
    absent = [
        f"sweep point {i} ({key}={v})"
        for i, v in enumerate(manifest.sweep_values)
        if i not in present
    ]
    if absent:
        raise ResultsError(f"figure {figure} is missing runs: " + "; ".join(absent))

    rows: list[tuple[Any, ...]] = []
    n_seeds = len(manifest.seeds)
    for point in sorted(points, key=lambda p: p["index"]):
        for policy in manifest.policies:
            stats = point["policies"].get(policy)
            if stats is None:
                raise ResultsError(
                    f"figure {figure} is missing runs: policy {policy} at {key}={point['value']}"
                )
            for metric in metrics:
                if metric not in stats["pooled"]:
                    raise ResultsError(
                        f"figure {figure}: metric {metric} was not recorded "
                        "(decision times need --timing)"
                    )
                pool = stats["pooled"][metric]
                series = f"{policy}/{metric}"
                err = _stderr(pool, n_seeds)
                rows.append((figure, point["value"], series, pool["mean"], err))
    return rows


def _read_utilities(path: Path, manifest_hash: str) -> dict[tuple[str, int], list[float]]:
    """U per slot keyed by (policy, seed), in slot order."""
    series: dict[tuple[str, int], list[float]] = defaultdict(list)
    try:
        with path.open(encoding="utf-8", newline="") as fh:
            for line, row in enumerate(csv.DictReader(fh), start=2):
                if row["manifest"] != manifest_hash:
                    raise ResultsError(
                        f"{path.name}:{line}: row from manifest {row['manifest']}, "
                        f"expected {manifest_hash}"
                    )
                series[(row["policy"], int(row["seed"]))].append(float(row["U"]))
    except FileNotFoundError as e:
        raise ResultsError(f"missing {path.name} in {path.parent}") from e
    return series


def _optgap_figure(bundle: ResultsBundle) -> list[tuple[Any, ...]]:
    manifest = bundle.manifest
    missing = [f"policy {p}" for p in ("lab", "ideal") if p not in manifest.policies]
    if missing:
        raise ResultsError("figure optgap needs: " + "; ".join(missing))

    rows: list[tuple[Any, ...]] = []
    for point in range(manifest.n_points):
        name = slots_file(point if manifest.sweep_key else None)
        series = _read_utilities(bundle.root / name, manifest.hash)
        absent = [
            f"{policy} seed {seed} in {name}"
            for policy in ("lab", "ideal")
            for seed in manifest.seeds
            if (policy, seed) not in series
        ]
        if absent:
            raise ResultsError("figure optgap is missing runs: " + "; ".join(absent))

        smoothed = []
        for seed in manifest.seeds:
            gap = np.asarray(series[("ideal", seed)]) - np.asarray(series[("lab", seed)])
            smoothed.append(trailing_mean(gap, OPTIMALITY_GAP_WINDOW))
        stacked = np.vstack(smoothed)
        label = "lab" if not manifest.sweep_key else f"lab@{manifest.sweep_values[point]}"
        for t in range(stacked.shape[1]):
            column = stacked[:, t].tolist()
            err = statistics.stdev(column) / math.sqrt(len(column)) if len(column) > 1 else 0.0
            rows.append(("optgap", t + 1, label, statistics.fmean(column), err))
    return rows


def figure_rows(bundle: ResultsBundle, figure: str) -> list[tuple[Any, ...]]:
    """Tidy rows (figure, x, series, y, stderr) for one figure.

    Raises:
        ResultsError: Unknown figure, or results the figure needs are absent
    """
    if figure == "optgap":
        return _optgap_figure(bundle)
    if figure in _SWEEP_FIGURES:
        return _sweep_figure(bundle, figure)
    raise ResultsError(f"unknown figure {figure!r}; expected one of {', '.join(FIGURES)}")


def write_figure(path: Path, rows: Sequence[tuple[Any, ...]]) -> None:
    """Write tidy figure data atomically (temporary file, then rename)."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIGURE_COLUMNS)
        for figure, x, series, y, err in rows:
            writer.writerow([figure, x, series, _fmt(y), _fmt(err)])
    os.replace(tmp, path)
