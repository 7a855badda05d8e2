"""The multi-agent episode loop.

Each step has two phases.  Phase one: every agent scans from its current
pose and folds the observation into the shared maps, with the target check
running before the map update so a finding scan is never applied.  Phase
two: every agent gets a local state cut from the post-scan maps and a goal
from the policy, then the agents walk their full legs one after another.
One step is one decision per agent, and scanning happens once per step,
so what a leg buys is the view from where it ends.  Driving still leaves
a record: the agent observes the ground under its footprint as it rolls,
plus any obstacle it bumps into, though only the scanner can spot the
target.  The episode ends on the first target sighting, on coverage
(exploration-only mode), or when the step budget runs out.

Every applied scan also produces delta packets against a receiver-side
:class:`~vfm_explore.comms.SyncServer`, which is asserted to match the
authoritative maps after every step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .comms import BandwidthLedger, DeltaKind, SyncServer, account_state, encode_delta
from .grid_world import (
    Arena,
    ArenaSpec,
    CellClass,
    Observation,
    Pose,
    SensorSpec,
    disk_offsets,
    generate_arena,
    sense,
    target_visible,
    wrap_angle,
)
from .mapping import (
    COLLISION_RADIUS_M,
    GlobalMaps,
    IvfmParams,
    Overhead,
    StateMode,
    build_state,
    export_snapshot,
    shortest_path_field,
    update_global,
)
from .policies import (
    Action,
    PolicyError,
    PolicySpec,
    frontier_policy,
    greedy_vfm_policy,
    least_visited_goal,
    random_policy,
)

# seed-stream tags so arena, headings and policy draws stay independent
_HEADING_STREAM = 101
_POLICY_STREAM = 202


@dataclass
class EpisodeConfig:
    """Everything that determines one episode."""

    arena_spec: ArenaSpec = field(default_factory=ArenaSpec.one_x)
    seed: int = 0
    n_agents: int = 1
    policy: PolicySpec = field(default_factory=PolicySpec)
    mode: StateMode = StateMode.VFM4
    sensor: SensorSpec = field(default_factory=SensorSpec)
    ivfm: IvfmParams = field(default_factory=IvfmParams)
    crop_side: int = 96
    step_budget: int = 250
    exploration_only: bool = False
    coverage_threshold: float = 0.95

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.step_budget < 1:
            raise ValueError("step_budget must be >= 1")
        if self.crop_side < 2 or self.crop_side % 2:
            raise ValueError("crop_side must be even and >= 2")
        if not 0.0 < self.coverage_threshold <= 1.0:
            raise ValueError("coverage_threshold must be in (0, 1]")


@dataclass
class AgentState:
    """One robot's pose and odometry history.

    ``stale`` counts consecutive information-free scans; the runner uses
    it to escalate from a look-around sweep to a relocation leg when an
    agent's viewpoint has nothing new left to show.  ``last_sweep_cell``
    remembers where the agent last turned a full circle: a second sweep
    from the same cell cannot show anything new, so the runner skips it
    and relocates directly.  ``last_goal`` and ``gained`` catch a policy
    stuck on a goal: re-emitting the same goal without a single new cell
    observed since the last pick means the map that produced it is
    frozen, and the runner relocates the agent instead.
    """

    agent_id: int
    pose: Pose
    distance_m: float = 0.0
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    stale: int = 0
    last_sweep_cell: tuple[int, int] | None = None
    last_goal: tuple[int, int] | None = None
    gained: bool = True

    def cell(self, resolution: float) -> tuple[int, int]:
        return self.pose.cell(resolution)


@dataclass
class EpisodeResult:
    found: bool
    wall_steps: int
    steps_total: int
    agents: list[AgentState]
    maps: GlobalMaps
    ledger: BandwidthLedger
    arena: Arena
    config: EpisodeConfig

    def coverage(self) -> float:
        from .metrics import coverage as _cov  # local import to avoid a cycle

        seen = self.maps.overhead == Overhead.FREE_SEEN
        free_cells = int(np.sum(self.arena.occupancy == CellClass.FREE))
        return _cov(seen, free_cells)


def plan_path(
    overhead: np.ndarray,
    start: tuple[int, int],
    goal: tuple[int, int],
    resolution: float,
) -> list[tuple[int, int]] | None:
    """Cell path from start to goal over the known map, or None.

    Plans optimistically (Unknown is traversable) on the inflated overhead,
    then extracts the path by steepest descent on the distance field from
    the goal back to the start.  The returned list excludes the start cell.
    """
    dist_field = shortest_path_field(overhead, start, resolution)
    if not math.isfinite(dist_field.dist[goal]):
        return None
    dist = dist_field.dist
    h, w = dist.shape
    path = [goal]
    cur = goal
    for _ in range(h * w):
        if cur == start:
            break
        best = None
        for dr, dc, wgt in (
            (-1, 0, 1.0),
            (0, -1, 1.0),
            (0, 1, 1.0),
            (1, 0, 1.0),
            (-1, -1, math.sqrt(2)),
            (-1, 1, math.sqrt(2)),
            (1, -1, math.sqrt(2)),
            (1, 1, math.sqrt(2)),
        ):
            r, c = cur[0] + dr, cur[1] + dc
            if 0 <= r < h and 0 <= c < w and math.isfinite(dist[r, c]):
                key = (dist[r, c] + wgt, r, c)
                if best is None or key < best:
                    best = key
        if best is None:
            return None
        cur = (best[1], best[2])
        path.append(cur)
    else:
        raise RuntimeError("path extraction failed to reach the start cell")
    path.reverse()
    return path[1:]


class EpisodeRunner:
    """Owns all mutable episode state; one instance per episode."""

    def __init__(
        self,
        config: EpisodeConfig,
        trace: TextIO | None = None,
        snapshot_dir: Path | None = None,
        snapshot_every: int = 0,
        episode_index: int = 0,
    ):
        self.config = config
        self.arena = generate_arena(config.arena_spec, config.seed, n_spawns=config.n_agents)
        self.maps = GlobalMaps.create(self.arena.shape, config.n_agents, self.arena.resolution)
        self.server = SyncServer(self.arena.shape, config.n_agents, self.arena.resolution)
        # the pen footprint is shared knowledge at deployment: every party
        # starts with the boundary wall on its map, so it costs no bandwidth
        boundary = self.arena.occupancy == CellClass.WALL
        self.maps.overhead[boundary] = Overhead.OBSTACLE
        self.server.overhead[boundary] = Overhead.OBSTACLE
        self.ledger = BandwidthLedger.create(config.n_agents)
        self.trace = trace
        self.snapshot_dir = snapshot_dir
        self.snapshot_every = snapshot_every
        self.episode_index = episode_index

        heading_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _HEADING_STREAM]))
        self.policy_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _POLICY_STREAM]))
        self.agents = []
        for i, cell in enumerate(self.arena.spawn_cells):
            theta = float(heading_rng.uniform(-math.pi, math.pi))
            pose = Pose.at_cell(cell, theta, self.arena.resolution)
            agent = AgentState(agent_id=i, pose=pose)
            agent.trajectory.append((pose.x, pose.y))
            self.agents.append(agent)

        self.found = False
        self.wall_steps = 0
        self.step = 0
        self._block_offsets = disk_offsets(COLLISION_RADIUS_M / self.arena.resolution)

    # -- tracing ---------------------------------------------------------

    def _emit(self, record: dict) -> None:
        if self.trace is not None:
            self.trace.write(json.dumps(record, sort_keys=True) + "\n")

    def _emit_header(self) -> None:
        cfg = self.config
        self._emit(
            {
                "type": "config",
                "policy": cfg.policy.name,
                "weights": {
                    "w_gain": cfg.policy.weights.w_gain,
                    "w_visit": cfg.policy.weights.w_visit,
                    "w_dist": cfg.policy.weights.w_dist,
                    "gain_radius_cells": cfg.policy.weights.gain_radius_cells,
                },
                "mode": cfg.mode.value,
                "agents": cfg.n_agents,
                "arena": cfg.arena_spec.kind.value,
                "seed": cfg.seed,
                "rows": self.arena.shape[0],
                "cols": self.arena.shape[1],
                "free_cells": int(np.sum(self.arena.occupancy == CellClass.FREE)),
                "resolution": self.arena.resolution,
                "crop_side": cfg.crop_side,
                "step_budget": cfg.step_budget,
                "exploration_only": cfg.exploration_only,
                "coverage_threshold": cfg.coverage_threshold,
                "ivfm": {"lam": cfg.ivfm.lam, "eps": cfg.ivfm.eps, "variant": cfg.ivfm.variant},
            }
        )

    # -- sensing and sync ------------------------------------------------

    def _apply_observation(self, agent: AgentState, obs: Observation, phase: str) -> int:
        """Fold an observation into the maps and ship the deltas.

        Returns the number of cells the observation saw for the first time.
        """
        aid = agent.agent_id
        novel = int(np.sum(self.maps.overhead[obs.rows, obs.cols] == Overhead.UNKNOWN))
        if novel:
            agent.gained = True
        before_overhead = self.server.overhead
        before_vfm = self.server.vfm_per_agent[aid]
        update_global(self.maps, aid, obs)

        delta_bytes = 0
        pose_bytes = 0
        for before, after, kind in (
            (before_overhead, self.maps.overhead, DeltaKind.OCCUPANCY),
            (before_vfm, self.maps.vfm_per_agent[aid], DeltaKind.VFM),
        ):
            packet = encode_delta(before, after, agent.pose, kind)
            if packet is not None:
                self.ledger.add_packet(aid, packet)
                self.server.apply(aid, packet)
                delta_bytes += packet.accounted_map_bytes
                pose_bytes += 6
        self._emit(
            {
                "type": "scan",
                "step": self.step,
                "agent": aid,
                "phase": phase,
                "pose": [agent.pose.x, agent.pose.y, agent.pose.theta],
                "observed": [[int(r), int(c), int(k)] for r, c, k in zip(obs.rows, obs.cols, obs.classes)],
                "delta_bytes": delta_bytes,
                "pose_bytes": pose_bytes,
            }
        )
        return novel

    def _scan(self, agent: AgentState, phase: str) -> tuple[bool, int]:
        """Sense, check for the target, then update.

        Returns (episode over, cells seen for the first time).
        """
        obs = sense(self.arena, agent.pose, self.config.sensor)
        if not self.config.exploration_only and target_visible(self.arena, obs):
            self.found = True
            return True, 0
        return False, self._apply_observation(agent, obs, phase)

    # -- movement --------------------------------------------------------

    def _ground_truth_blockers(self, cell: tuple[int, int]) -> list[tuple[int, int]]:
        """Occupied cells whose center lies within the collision radius."""
        out = []
        h, w = self.arena.shape
        for dr, dc in self._block_offsets:
            r, c = cell[0] + dr, cell[1] + dc
            if 0 <= r < h and 0 <= c < w and self.arena.occupancy[r, c] != CellClass.FREE:
                out.append((int(r), int(c)))
        return out

    def _record_blockers(self, agent: AgentState, blockers: list[tuple[int, int]]) -> None:
        cells = sorted(set(blockers))
        rows = np.array([r for r, _ in cells], dtype=np.int64)
        cols = np.array([c for _, c in cells], dtype=np.int64)
        obs = Observation(rows=rows, cols=cols, classes=self.arena.occupancy[rows, cols].copy())
        self._apply_observation(agent, obs, "bump")

    def _sweep(self, agent: AgentState) -> tuple[bool, int]:
        """Turn in place through a full revolution, scanning each facing.

        Returns (target seen, cells seen for the first time).
        """
        agent.last_sweep_cell = agent.cell(self.arena.resolution)
        turns = max(1, int(round(2 * math.pi / self.config.sensor.fov_rad)))
        total = 0
        for _ in range(turns):
            pose = agent.pose
            agent.pose = Pose(pose.x, pose.y, float(wrap_angle(pose.theta + self.config.sensor.fov_rad)))
            found, novel = self._scan(agent, "sweep")
            if found:
                return True, total
            total += novel
        return False, total

    def navigate(self, agent: AgentState, goal_cell: tuple[int, int]) -> bool:
        """Walk one agent all the way to its goal over the known map.

        The whole leg happens within the step: the agent plans on the
        current overhead map (unknown is traversable) and walks the path
        cell by cell, stopping when ground truth blocks the way and
        recording the blocking cells.  The agent does not scan while
        driving, but it does record the ground it rolls over and leaves
        behind: the footprint patches along the way are folded into the
        maps as one contact observation.  The patch under the spot where
        it parks is occluded by its own chassis and enters the record
        only once a later leg rolls off it.  Only the scanner detects the
        target, so the wider view from the new pose arrives with the next
        step's scan.  With no path at all, or a goal the agent is already
        standing on, it sweeps a full turn in place instead, scanning one
        field of view at a time; without that a stuck agent would
        re-decide on a frozen map forever.

        Returns:
            True when a sweep scan saw the target.
        """
        res = self.arena.resolution
        start = agent.cell(res)
        path = plan_path(self.maps.overhead, start, goal_cell, res)
        if path is None or not path:
            if start == agent.last_sweep_cell:
                return False
            found, _ = self._sweep(agent)
            return found

        h, w = self.arena.shape
        cur = start
        rolled: set[tuple[int, int]] = set()
        for cell in [start] + path:
            if cell is not start:
                blockers = self._ground_truth_blockers(cell)
                if blockers:
                    self._record_blockers(agent, blockers)
                    break
                dr, dc = cell[0] - cur[0], cell[1] - cur[1]
                heading = math.atan2(dc, -dr)
                agent.pose = Pose.at_cell(cell, heading, res)
                agent.trajectory.append((agent.pose.x, agent.pose.y))
                agent.distance_m += res * math.hypot(dr, dc)
                cur = cell
            for fr, fc in self._block_offsets:
                r, c = cell[0] + fr, cell[1] + fc
                if 0 <= r < h and 0 <= c < w and (r, c) != self.arena.target_cell:
                    rolled.add((r, c))
        for fr, fc in self._block_offsets:
            rolled.discard((cur[0] + fr, cur[1] + fc))
        if rolled:
            cells = sorted(rolled)
            rows = np.array([r for r, _ in cells], dtype=np.int64)
            cols = np.array([c for _, c in cells], dtype=np.int64)
            obs = Observation(rows=rows, cols=cols, classes=self.arena.occupancy[rows, cols].copy())
            self._apply_observation(agent, obs, "drive")
        return False

    # -- the step loop ---------------------------------------------------

    def _recover(self, agent: AgentState) -> Action | None:
        """Relocation goal for an agent whose viewpoint is exhausted.

        Sends it to the nearest cell where the map can still change: a
        seen-free cell bordering unknown space.  With no such cell left
        it falls back to the nearest least-visited cell.  No state crop
        is transmitted for this: the agent is not consulting the policy,
        just getting out of a dead corner.
        """
        res = self.arena.resolution
        field_global = shortest_path_field(self.maps.overhead, agent.cell(res), res)
        overhead = self.maps.overhead
        seen = overhead == Overhead.FREE_SEEN
        unknown = overhead == Overhead.UNKNOWN
        border = np.zeros_like(seen)
        border[:-1, :] |= unknown[1:, :]
        border[1:, :] |= unknown[:-1, :]
        border[:, :-1] |= unknown[:, 1:]
        border[:, 1:] |= unknown[:, :-1]
        candidates = seen & border & np.isfinite(field_global.dist)
        if candidates.any():
            dist = np.where(candidates, field_global.dist, np.inf)
            flat = int(np.argmin(dist))
            action = Action(goal_global=(flat // overhead.shape[1], flat % overhead.shape[1]))
        else:
            try:
                action = least_visited_goal(overhead, field_global, self.maps.vfm_merged)
            except PolicyError:
                return None
        self._emit(
            {
                "type": "action",
                "step": self.step,
                "agent": agent.agent_id,
                "goal": [action.goal_global[0], action.goal_global[1]],
                "recover": True,
            }
        )
        return action

    def _decide(self, agent: AgentState) -> Action | None:
        cfg = self.config
        res = self.arena.resolution
        field_global = shortest_path_field(self.maps.overhead, agent.cell(res), res)
        state = build_state(
            self.maps,
            agent.pose,
            cfg.mode,
            crop_side=cfg.crop_side,
            params=cfg.ivfm,
            field_global=field_global,
        )
        self.ledger.add_state(agent.agent_id, account_state(cfg.mode, cfg.crop_side))
        self._emit(
            {
                "type": "state",
                "step": self.step,
                "agent": agent.agent_id,
                "bytes": account_state(cfg.mode, cfg.crop_side),
            }
        )
        try:
            if cfg.policy.name == "random":
                action = random_policy(state, self.policy_rng)
            elif cfg.policy.name == "frontier":
                action = frontier_policy(self.maps.overhead, field_global, self.maps.vfm_merged)
            else:
                action = greedy_vfm_policy(state, cfg.policy.weights)
        except PolicyError:
            return None
        if action.goal_global == agent.last_goal and not agent.gained:
            return self._recover(agent)
        agent.last_goal = action.goal_global
        agent.gained = False
        self._emit(
            {
                "type": "action",
                "step": self.step,
                "agent": agent.agent_id,
                "goal": [action.goal_global[0], action.goal_global[1]],
            }
        )
        return action

    def _coverage(self) -> float:
        free = self.arena.occupancy == CellClass.FREE
        seen = self.maps.overhead == Overhead.FREE_SEEN
        denom = int(free.sum())
        return float((seen & free).sum()) / denom if denom else 1.0

    def run(self) -> EpisodeResult:
        cfg = self.config
        self._emit_header()
        stop = False
        for step in range(1, cfg.step_budget + 1):
            self.step = step
            self.wall_steps = step
            for agent in self.agents:
                found, novel = self._scan(agent, "sense")
                if found:
                    stop = True
                    break
                agent.stale = agent.stale + 1 if novel == 0 else 0
            # an agent whose scan showed nothing new looks around first;
            # when the full turn also shows nothing, or it already turned
            # a circle at this very spot, its map cannot change from here,
            # so it relocates instead of consulting the policy
            if not stop:
                for agent in self.agents:
                    if agent.stale != 1:
                        continue
                    if agent.cell(self.arena.resolution) == agent.last_sweep_cell:
                        agent.stale = 2
                        continue
                    found, novel = self._sweep(agent)
                    if found:
                        stop = True
                        break
                    agent.stale = 0 if novel > 0 else 2
            if not stop:
                goals = []
                for agent in self.agents:
                    if agent.stale >= 2:
                        agent.stale = 0
                        goals.append(self._recover(agent))
                    else:
                        goals.append(self._decide(agent))
                for agent, action in zip(self.agents, goals):
                    if action is None:
                        continue
                    if self.navigate(agent, action.goal_global):
                        stop = True
                        break
            self.maps.check_merge_law()
            if not self.server.matches(self.maps):
                raise RuntimeError("delta sync diverged from the authoritative maps")
            if self.snapshot_dir is not None and self.snapshot_every and step % self.snapshot_every == 0:
                export_snapshot(self.maps, self.snapshot_dir, self.episode_index, step)
            if stop:
                break
            if cfg.exploration_only and self._coverage() >= cfg.coverage_threshold:
                break

        result = EpisodeResult(
            found=self.found,
            wall_steps=self.wall_steps,
            steps_total=self.wall_steps * cfg.n_agents,
            agents=self.agents,
            maps=self.maps,
            ledger=self.ledger,
            arena=self.arena,
            config=cfg,
        )
        self._emit(
            {
                "type": "end",
                "found": self.found,
                "wall_steps": self.wall_steps,
                "steps_total": result.steps_total,
                "distance_m": [a.distance_m for a in self.agents],
                "state_bytes": [int(b) for b in self.ledger.state_bytes],
                "delta_bytes": [int(b) for b in self.ledger.delta_bytes],
                "pose_bytes": [int(b) for b in self.ledger.pose_bytes],
            }
        )
        return result


def run_episode(
    config: EpisodeConfig,
    trace_path: Path | None = None,
    snapshot_dir: Path | None = None,
    snapshot_every: int = 0,
    episode_index: int = 0,
) -> EpisodeResult:
    """Run one episode to completion.

    Args:
        config: full episode parameterization.
        trace_path: when set, write a JSONL event trace there.
        snapshot_dir: when set with ``snapshot_every`` > 0, dump map
            snapshots every that many steps.
        episode_index: index used in snapshot file names.
    """
    if trace_path is None:
        return EpisodeRunner(config, None, snapshot_dir, snapshot_every, episode_index).run()
    trace_path = Path(trace_path)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    with open(trace_path, "w") as fh:
        return EpisodeRunner(config, fh, snapshot_dir, snapshot_every, episode_index).run()
