"""Episode metrics and their aggregation.

Definitions, with V the merged visit-count map:

* RER: revisits per unit of explored area.  Default denominator is the
  visited cell count; the ``literal`` variant divides by the full map size
  instead, which dilutes the number by unexplored area.
* PE: explored cells per meter traveled, summed over agents.
* Overlap: share of the explored area seen by more than one agent
  (``literal`` variant: by every agent).
* Coverage: seen fraction of the explorable free area.

Records can be recomputed from a JSONL episode trace; that path must
reproduce the direct computation bit for bit, which every formula here is
written to preserve (same integer inputs, same expression).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = [
    "policy",
    "mode",
    "agents",
    "arena",
    "seed",
    "rer",
    "pe",
    "steps",
    "overlap",
    "bandwidth_mib",
    "coverage",
    "found",
]


def rer(vfm_merged: np.ndarray, literal: bool = False) -> float:
    """Average revisit count per unit explored area.

    Default: sum(V - 1 over visited cells) / (visited cell count).  The
    literal variant divides by the total cell count instead.  No visited
    cells gives 0.
    """
    v = vfm_merged.astype(np.int64)
    visited = int((v > 0).sum())
    if visited == 0:
        return 0.0
    extra = int(v.sum()) - visited
    denom = int(v.size) if literal else visited
    return extra / denom


def path_efficiency(explored_cells: int, distance_m: float) -> float:
    """Explored cells per meter traveled; NaN flags a zero-distance episode."""
    if distance_m < 0:
        raise ValueError("distance must be >= 0")
    if distance_m == 0:
        return float("nan")
    return explored_cells / distance_m


def overlap_ratio(vfm_per_agent: np.ndarray, literal: bool = False) -> float:
    """Share of explored cells seen by more than one agent.

    The literal variant counts only cells seen by every agent.  Nothing
    explored gives 0.
    """
    if vfm_per_agent.ndim != 3 or vfm_per_agent.shape[0] < 2:
        raise ValueError("overlap needs per-agent maps for >= 2 agents")
    seen = vfm_per_agent > 0
    explored = int(np.logical_or.reduce(seen, axis=0).sum())
    if explored == 0:
        return 0.0
    if literal:
        shared = int(np.logical_and.reduce(seen, axis=0).sum())
    else:
        shared = int((seen.sum(axis=0) >= 2).sum())
    return shared / explored


def coverage(seen_mask: np.ndarray, explorable_cells: int) -> float:
    """Seen fraction of the explorable free area."""
    if explorable_cells <= 0:
        raise ValueError("explorable_cells must be > 0")
    return int(seen_mask.sum()) / explorable_cells


@dataclass
class MetricRecord:
    """One episode's metrics plus the identity needed to group them."""

    policy: str
    mode: str
    agents: int
    arena: str
    seed: int
    rer: float
    pe: float
    steps: int
    overlap: float | None
    bandwidth_mib: float
    coverage: float
    found: bool

    def to_csv_row(self) -> list[str]:
        return [
            self.policy,
            self.mode,
            str(self.agents),
            self.arena,
            str(self.seed),
            repr(self.rer),
            repr(self.pe),
            str(self.steps),
            "" if self.overlap is None else repr(self.overlap),
            repr(self.bandwidth_mib),
            repr(self.coverage),
            "true" if self.found else "false",
        ]

    @classmethod
    def from_csv_row(cls, row: list[str]) -> "MetricRecord":
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"expected {len(CSV_HEADER)} columns, got {len(row)}")
        return cls(
            policy=row[0],
            mode=row[1],
            agents=int(row[2]),
            arena=row[3],
            seed=int(row[4]),
            rer=float(row[5]),
            pe=float(row[6]),
            steps=int(row[7]),
            overlap=None if row[8] == "" else float(row[8]),
            bandwidth_mib=float(row[9]),
            coverage=float(row[10]),
            found={"true": True, "false": False}[row[11]],
        )


def _record(
    policy: str,
    mode: str,
    agents: int,
    arena_kind: str,
    seed: int,
    vfm_merged: np.ndarray,
    vfm_per_agent: np.ndarray,
    seen_free_cells: int,
    explorable_cells: int,
    distances_m: list[float],
    steps_total: int,
    total_bytes: int,
    found: bool,
    rer_literal: bool,
    overlap_literal: bool,
) -> MetricRecord:
    v = vfm_merged.astype(np.int64)
    explored = int((v > 0).sum())
    return MetricRecord(
        policy=policy,
        mode=mode,
        agents=agents,
        arena=arena_kind,
        seed=seed,
        rer=rer(vfm_merged, literal=rer_literal),
        pe=path_efficiency(explored, sum(distances_m)),
        steps=steps_total,
        overlap=overlap_ratio(vfm_per_agent, literal=overlap_literal) if agents >= 2 else None,
        bandwidth_mib=total_bytes / 2**20,
        coverage=seen_free_cells / explorable_cells,
        found=found,
    )


def record_from_episode(result, rer_literal: bool = False, overlap_literal: bool = False) -> MetricRecord:
    """Metrics straight from an EpisodeResult."""
    from .grid_world import CellClass
    from .mapping import Overhead

    free = result.arena.occupancy == CellClass.FREE
    seen = result.maps.overhead == Overhead.FREE_SEEN
    return _record(
        policy=result.config.policy.name,
        mode=result.config.mode.value,
        agents=result.config.n_agents,
        arena_kind=result.config.arena_spec.kind.value,
        seed=result.config.seed,
        vfm_merged=result.maps.vfm_merged,
        vfm_per_agent=result.maps.vfm_per_agent,
        seen_free_cells=int(seen.sum()),
        explorable_cells=int(free.sum()),
        distances_m=[a.distance_m for a in result.agents],
        steps_total=result.steps_total,
        total_bytes=result.ledger.total_bytes,
        found=result.found,
        rer_literal=rer_literal,
        overlap_literal=overlap_literal,
    )


def record_from_trace(trace_path: Path | str, rer_literal: bool = False, overlap_literal: bool = False) -> MetricRecord:
    """Recompute the metrics of an episode from its JSONL trace.

    Replays the observation stream through fresh visit maps and sums the
    logged byte counts; must equal record_from_episode bit for bit.
    """
    config = None
    end = None
    vfm_per_agent = None
    seen_free = None
    total_bytes = 0
    with open(trace_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "config":
                config = rec
                shape = (rec["rows"], rec["cols"])
                vfm_per_agent = np.zeros((rec["agents"],) + shape, dtype=np.int64)
                seen_free = np.zeros(shape, dtype=bool)
            elif rec["type"] == "scan":
                for r, c, k in rec["observed"]:
                    vfm_per_agent[rec["agent"], r, c] += 1
                    if k == 0:
                        seen_free[r, c] = True
                total_bytes += rec["delta_bytes"] + rec["pose_bytes"]
            elif rec["type"] == "state":
                total_bytes += rec["bytes"]
            elif rec["type"] == "end":
                end = rec
    if config is None or end is None:
        raise ValueError(f"trace {trace_path} is missing its config or end record")
    merged = np.minimum(vfm_per_agent.sum(axis=0), 65535)
    return _record(
        policy=config["policy"],
        mode=config["mode"],
        agents=config["agents"],
        arena_kind=config["arena"],
        seed=config["seed"],
        vfm_merged=merged,
        vfm_per_agent=np.minimum(vfm_per_agent, 65535),
        seen_free_cells=int(seen_free.sum()),
        explorable_cells=config["free_cells"],
        distances_m=end["distance_m"],
        steps_total=end["steps_total"],
        total_bytes=total_bytes,
        found=end["found"],
        rer_literal=rer_literal,
        overlap_literal=overlap_literal,
    )


def write_csv(records: list[MetricRecord], path: Path | str) -> None:
    """Write records sorted by (policy, mode, agents, arena, seed)."""
    rows = sorted(records, key=lambda r: (r.policy, r.mode, r.agents, r.arena, r.seed))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in rows:
            writer.writerow(rec.to_csv_row())


def read_csv(path: Path | str) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [MetricRecord.from_csv_row(row) for row in reader]


@dataclass
class EvaluationReport:
    """Mean and sample std per metric over the used episodes."""

    mean: dict[str, float]
    std: dict[str, float]
    not_found: str
    n_total: int
    n_used: int

    def as_dict(self) -> dict:
        def clean(d: dict[str, float]) -> dict:
            return {k: (v if math.isfinite(v) else None) for k, v in d.items()}

        return {
            "mean": clean(self.mean),
            "std": clean(self.std),
            "not_found": self.not_found,
            "n_total": self.n_total,
            "n_used": self.n_used,
        }


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate(records: list[MetricRecord], drop_not_found: bool = True) -> EvaluationReport:
    """Summarize records; not-found episodes are excluded by default."""
    if not records:
        raise ValueError("no records to aggregate")
    used = [r for r in records if r.found] if drop_not_found else list(records)
    n_nf = sum(1 for r in records if not r.found)
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for name in ("rer", "pe", "steps", "overlap", "bandwidth_mib", "coverage"):
        values = []
        for rec in used:
            value = getattr(rec, name)
            if value is None or (isinstance(value, float) and math.isnan(value)):
                continue
            values.append(float(value))
        mean[name], std[name] = _mean_std(values)
    return EvaluationReport(
        mean=mean,
        std=std,
        not_found=f"{n_nf}/{len(records)}",
        n_total=len(records),
        n_used=len(used),
    )
