"""Batch evaluation: seeded episode sweeps, reports, and comparisons.

A run writes four things into its output directory: ``episodes.csv``
(one metric row per episode), ``bandwidth.csv`` (byte counters per
episode), ``report.json`` (aggregate means and stds), and optionally
per-episode traces and map snapshots.  Episode i always runs with seed
``seed_base + i``, so a partial run can be resumed: rows already present
in both CSV files are kept and only the missing seeds are computed.
Rows are rewritten sorted, which makes a completed run's outputs
byte-stable across reruns.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import (
    CSV_HEADER,
    EvaluationReport,
    MetricRecord,
    aggregate,
    read_csv,
    record_from_episode,
    write_csv,
)
from .swarm import EpisodeConfig, run_episode

BANDWIDTH_HEADER = ["policy", "mode", "agents", "arena", "seed", "state_bytes", "delta_bytes", "pose_bytes"]


@dataclass
class BandwidthRow:
    policy: str
    mode: str
    agents: int
    arena: str
    seed: int
    state_bytes: int
    delta_bytes: int
    pose_bytes: int

    def key(self) -> tuple:
        return (self.policy, self.mode, self.agents, self.arena, self.seed)


def _identity(cfg: EpisodeConfig) -> tuple:
    return (cfg.policy.name, cfg.mode.value, cfg.n_agents, cfg.arena_spec.kind.value, cfg.seed)


def _run_one(cfg: EpisodeConfig, trace_path: Path | None, snapshot_dir: Path | None,
             snapshot_every: int, index: int) -> tuple[MetricRecord, BandwidthRow]:
    result = run_episode(cfg, trace_path=trace_path, snapshot_dir=snapshot_dir,
                         snapshot_every=snapshot_every, episode_index=index)
    record = record_from_episode(result)
    row = BandwidthRow(
        policy=cfg.policy.name,
        mode=cfg.mode.value,
        agents=cfg.n_agents,
        arena=cfg.arena_spec.kind.value,
        seed=cfg.seed,
        state_bytes=int(sum(result.ledger.state_bytes)),
        delta_bytes=int(sum(result.ledger.delta_bytes)),
        pose_bytes=int(sum(result.ledger.pose_bytes)),
    )
    return record, row


def _read_bandwidth(path: Path) -> list[BandwidthRow]:
    import csv

    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != BANDWIDTH_HEADER:
            raise ValueError(f"unexpected bandwidth header {header}")
        return [
            BandwidthRow(row[0], row[1], int(row[2]), row[3], int(row[4]),
                         int(row[5]), int(row[6]), int(row[7]))
            for row in reader
        ]


def _write_bandwidth(rows: list[BandwidthRow], path: Path) -> None:
    import csv

    ordered = sorted(rows, key=lambda r: r.key())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BANDWIDTH_HEADER)
        for r in ordered:
            writer.writerow([r.policy, r.mode, str(r.agents), r.arena, str(r.seed),
                             str(r.state_bytes), str(r.delta_bytes), str(r.pose_bytes)])


def run_evaluation(cfg: RunConfig) -> EvaluationReport:
    """Run the configured sweep, write artifacts, return the aggregate."""
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "episodes.csv"
    bw_path = out / "bandwidth.csv"

    existing_records = {(r.policy, r.mode, r.agents, r.arena, r.seed): r
                        for r in (read_csv(csv_path) if csv_path.exists() else [])}
    existing_bw = {r.key(): r for r in _read_bandwidth(bw_path)}

    jobs = []
    for i in range(cfg.run.n_episodes):
        ep = cfg.episode_config(i)
        if _identity(ep) in existing_records and _identity(ep) in existing_bw:
            continue
        trace_path = out / "traces" / f"ep{ep.seed}.jsonl" if cfg.run.traces else None
        snap_dir = out / "snapshots" if cfg.run.snapshot_every else None
        jobs.append((ep, trace_path, snap_dir, cfg.run.snapshot_every, i))

    fresh: list[tuple[MetricRecord, BandwidthRow]] = []
    if jobs:
        if cfg.run.snapshot_every:
            (out / "snapshots").mkdir(exist_ok=True)
        if cfg.run.parallelism > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.run.parallelism) as pool:
                fresh = list(pool.map(_run_one_star, jobs))
        else:
            fresh = [_run_one(*job) for job in jobs]

    records = list(existing_records.values()) + [rec for rec, _ in fresh]
    bw_rows = list(existing_bw.values()) + [row for _, row in fresh]
    write_csv(records, csv_path)
    _write_bandwidth(bw_rows, bw_path)

    report = aggregate(records)
    payload = {
        "config": {
            "policy": cfg.episode.policy.name,
            "mode": cfg.episode.mode.value,
            "agents": cfg.episode.n_agents,
            "arena": cfg.episode.arena_spec.kind.value,
            "n_episodes": cfg.run.n_episodes,
            "seed_base": cfg.run.seed_base,
        },
        "aggregate": report.as_dict(),
        "bandwidth_bytes": {
            "state": sum(r.state_bytes for r in bw_rows),
            "delta": sum(r.delta_bytes for r in bw_rows),
            "pose": sum(r.pose_bytes for r in bw_rows),
        },
    }
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def _run_one_star(args):
    return _run_one(*args)


# -- comparison -----------------------------------------------------------

_COMPARE_METRICS = ("rer", "pe", "steps", "overlap", "bandwidth_mib", "coverage")


def load_report(path: Path | str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    for key in ("config", "aggregate", "bandwidth_bytes"):
        if key not in payload:
            raise ValueError(f"{path} is not a run report (missing {key!r})")
    return payload


def compare(payloads: list[dict]) -> dict:
    """Side-by-side means with ratios of every later report to the first.

    All reports must share the arena and the agent count, otherwise the
    comparison mixes incomparable sweeps.
    """
    if len(payloads) < 2:
        raise ValueError("compare needs at least two reports")
    base = payloads[0]["config"]
    for p in payloads[1:]:
        c = p["config"]
        if c["arena"] != base["arena"] or c["agents"] != base["agents"]:
            raise ValueError(
                f"reports configured for different setups: "
                f"{base['arena']}/{base['agents']} agents vs {c['arena']}/{c['agents']}"
            )

    labels = [f"{p['config']['policy']}-{p['config']['mode']}" for p in payloads]
    table: dict[str, dict] = {}
    for metric in _COMPARE_METRICS:
        means = []
        for p in payloads:
            value = p["aggregate"]["mean"].get(metric)
            means.append(float("nan") if value is None else float(value))
        row = {"mean": {lab: (None if np.isnan(v) else v) for lab, v in zip(labels, means)}}
        base_mean = means[0]
        ratios = {}
        for label, value in zip(labels[1:], means[1:]):
            usable = base_mean != 0.0 and not np.isnan(base_mean) and not np.isnan(value)
            ratios[label] = value / base_mean if usable else None
        row["ratio_to_first"] = ratios
        table[metric] = row

    state0 = payloads[0]["bandwidth_bytes"]["state"]
    state_ratios = {}
    for label, p in zip(labels[1:], payloads[1:]):
        state_ratios[label] = p["bandwidth_bytes"]["state"] / state0 if state0 else float("nan")
    return {
        "labels": labels,
        "metrics": table,
        "state_bandwidth_ratio_to_first": state_ratios,
    }


def comparison_text(result: dict) -> str:
    """Fixed-width rendering of a compare() result."""
    labels = result["labels"]
    width = max(12, max(len(x) for x in labels) + 2)
    lines = ["metric".ljust(16) + "".join(x.rjust(width) for x in labels)]
    for metric, row in result["metrics"].items():
        cells = []
        for label in labels:
            value = row["mean"][label]
            cells.append(("n/a" if value is None else f"{value:.3f}").rjust(width))
        lines.append(metric.ljust(16) + "".join(cells))
    ratio_bits = [f"{label}={value:.3f}" for label, value in result["state_bandwidth_ratio_to_first"].items()]
    lines.append("state bytes vs first: " + (", ".join(ratio_bits) if ratio_bits else "n/a"))
    return "\n".join(lines)


# -- trace rendering ------------------------------------------------------


def render_trace(trace_path: Path | str, out_dir: Path | str) -> list[Path]:
    """Replay a JSONL trace into final-map heatmap PNGs.

    Writes `<stem>_vfm.png` (merged visit counts) and `<stem>_overhead.png`
    (seen classes) into out_dir and returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    trace_path = Path(trace_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    shape = None
    vfm = None
    overhead = None
    trajectories: dict[int, list[list[float]]] = {}
    resolution = 0.05
    with open(trace_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "config":
                shape = (rec["rows"], rec["cols"])
                resolution = rec["resolution"]
                vfm = np.zeros(shape, dtype=np.int64)
                overhead = np.zeros(shape, dtype=np.uint8)
            elif rec["type"] == "scan":
                for r, c, k in rec["observed"]:
                    vfm[r, c] += 1
                    overhead[r, c] = 2 if k else 1
                trajectories.setdefault(rec["agent"], []).append(rec["pose"][:2])
    if shape is None:
        raise ValueError(f"trace {trace_path} has no config record")

    written = []
    stem = trace_path.stem

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(vfm, cmap="viridis", interpolation="nearest")
    for agent, points in sorted(trajectories.items()):
        arr = np.asarray(points)
        ax.plot(arr[:, 0] / resolution, arr[:, 1] / resolution, lw=0.8, label=f"agent {agent}")
    ax.set_title("visit counts")
    ax.legend(loc="upper right", fontsize=6)
    path = out_dir / f"{stem}_vfm.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(overhead, cmap="gray_r", interpolation="nearest", vmin=0, vmax=2)
    ax.set_title("overhead (white unknown, black obstacle)")
    path = out_dir / f"{stem}_overhead.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
