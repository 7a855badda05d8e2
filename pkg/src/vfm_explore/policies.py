"""Goal-selection policies over local states and shared maps.

All three policies emit a navigation goal as a global map cell.  They are
deterministic given their inputs (the uniform policy takes an explicit RNG)
and break ties lexicographically by (row, col) so replays match across
runs and platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .mapping import DistanceField, LocalState, Overhead, StateMode, integrate


class PolicyError(RuntimeError):
    """No admissible goal exists for the current state."""


@dataclass(frozen=True)
class Action:
    """A navigation goal.  ``goal_crop`` is set when the goal was chosen in
    the crop frame, None for policies that work on the global maps."""

    goal_global: tuple[int, int]
    goal_crop: tuple[int, int] | None = None


@dataclass(frozen=True)
class GreedyWeights:
    """Scoring weights of the greedy policy.

    ``gain_radius_cells`` is the sensor range in cells; candidate cells are
    credited with the unvisited cells inside that disk.
    """

    w_gain: float = 1.0
    w_visit: float = 2.0
    w_dist: float = 0.05
    gain_radius_cells: int = 11

    def __post_init__(self) -> None:
        if self.gain_radius_cells < 1:
            raise ValueError("gain_radius_cells must be >= 1")


@dataclass(frozen=True)
class PolicySpec:
    """Which policy to run, plus its parameters."""

    name: str = "greedy"
    weights: GreedyWeights = field(default_factory=GreedyWeights)

    def __post_init__(self) -> None:
        if self.name not in ("random", "frontier", "greedy"):
            raise ValueError(f"unknown policy {self.name!r}")


def _state_masks(state: LocalState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(blocked, gain_mask, penalty) in the crop frame, identical across modes.

    Blocked covers obstacles and the robot footprint.  The gain mask holds
    the unknown cells the robot could actually get a look at: pockets whose
    every approach is walled off by observed obstacles carry an infinite
    distance-field value and are left out, otherwise they would act as
    beacons no viewpoint can ever cash in.  Penalty is the integrated visit
    value, recomputed from the raw channels in VFM4 mode.
    """
    if state.mode is StateMode.VFM4:
        blocked = (state.overhead == Overhead.OBSTACLE) | state.robot_mask
        gain_mask = (state.overhead == Overhead.UNKNOWN) & ~state.robot_mask
        penalty = integrate(state.vfm, state.overhead, state.robot_mask, state.params)
    else:
        blocked = state.ivfm == state.params.occupied_value
        gain_mask = state.ivfm == state.params.unvisited_value
        penalty = state.ivfm
    gain_mask &= np.isfinite(state.shortest_path)
    return blocked, gain_mask, penalty


def random_policy(state: LocalState, rng: np.random.Generator | int) -> Action:
    """Uniform draw over the reachable, unblocked crop cells."""
    rng = np.random.default_rng(rng)
    blocked, _, _ = _state_masks(state)
    eligible = np.isfinite(state.shortest_path) & ~blocked
    flat = np.flatnonzero(eligible)
    if flat.size == 0:
        raise PolicyError("no reachable free cell in the crop")
    pick = int(flat[int(rng.integers(flat.size))])
    crop_cell = (pick // state.crop_side, pick % state.crop_side)
    goal = state.to_global(crop_cell)
    assert goal is not None  # reachable implies inside the map
    return Action(goal_global=goal, goal_crop=crop_cell)


@dataclass
class FrontierSet:
    """8-connected clusters of frontier cells with one representative each.

    A frontier cell is FreeSeen with at least one Unknown 4-neighbor.  The
    representative is the cluster member nearest (Chebyshev) to the
    coordinate-wise median, ties broken by (row, col).
    """

    clusters: list[np.ndarray]
    representatives: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.clusters)


def detect_frontiers(overhead: np.ndarray) -> FrontierSet:
    free = overhead == Overhead.FREE_SEEN
    unknown = overhead == Overhead.UNKNOWN
    edge = np.zeros_like(free)
    edge[:-1, :] |= free[:-1, :] & unknown[1:, :]
    edge[1:, :] |= free[1:, :] & unknown[:-1, :]
    edge[:, :-1] |= free[:, :-1] & unknown[:, 1:]
    edge[:, 1:] |= free[:, 1:] & unknown[:, :-1]

    labels, count = ndimage.label(edge, structure=np.ones((3, 3), dtype=int))
    clusters = []
    reps = []
    for lab in range(1, count + 1):
        cells = np.argwhere(labels == lab)
        med = np.median(cells, axis=0)
        cheb = np.maximum(np.abs(cells[:, 0] - med[0]), np.abs(cells[:, 1] - med[1]))
        best = cells[int(np.argmin(cheb))]
        clusters.append(cells)
        reps.append((int(best[0]), int(best[1])))
    return FrontierSet(clusters=clusters, representatives=reps)


def least_visited_goal(
    overhead: np.ndarray,
    dist_field: DistanceField,
    vfm_merged: np.ndarray,
) -> Action:
    """Nearest among the reachable cells with the lowest merged visit count.

    Ties on the visit count go to the smaller distance, then to (row, col)
    order.  Serves as the frontier fallback and as the relocation goal for
    an agent whose surroundings have nothing new left to show.
    """
    candidates = np.isfinite(dist_field.dist) & (overhead != Overhead.OBSTACLE)
    if not candidates.any():
        raise PolicyError("no reachable cell at all")
    visits = np.where(candidates, vfm_merged.astype(np.int64), np.iinfo(np.int64).max)
    vmin = visits.min()
    dist = np.where(visits == vmin, dist_field.dist, np.inf)
    flat = int(np.argmin(dist))
    return Action(goal_global=(flat // overhead.shape[1], flat % overhead.shape[1]))


def frontier_policy(
    overhead: np.ndarray,
    dist_field: DistanceField,
    vfm_merged: np.ndarray | None = None,
) -> Action:
    """Head for the nearest reachable frontier representative.

    With no reachable frontier left the policy falls back to the reachable
    non-obstacle cell with the lowest merged visit count, which keeps
    agents sweeping after the map closes up.
    """
    frontiers = detect_frontiers(overhead)
    best: tuple[float, int, int] | None = None
    for r, c in frontiers.representatives:
        d = float(dist_field.dist[r, c])
        if not math.isfinite(d):
            continue
        key = (d, r, c)
        if best is None or key < best:
            best = key
    if best is not None:
        return Action(goal_global=(best[1], best[2]))

    if vfm_merged is None:
        raise PolicyError("no reachable frontier and no visit map for the fallback")
    return least_visited_goal(overhead, dist_field, vfm_merged)


def _disk_counts(mask: np.ndarray, radius: int) -> np.ndarray:
    """Per-cell count of True cells within a Euclidean disk, exact integers."""
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius + 1), dtype=np.int64)
    padded[radius : radius + h, radius + 1 : radius + 1 + w] = mask
    pref = np.cumsum(padded, axis=1)
    out = np.zeros((h, w), dtype=np.int64)
    for dr in range(-radius, radius + 1):
        half = int(math.floor(math.sqrt(radius * radius - dr * dr)))
        band = pref[radius + dr : radius + dr + h]
        out += band[:, radius + half + 1 : radius + half + 1 + w]
        out -= band[:, radius - half : radius - half + w]
    return out


def greedy_vfm_policy(state: LocalState, weights: GreedyWeights = GreedyWeights()) -> Action:
    """Score every reachable crop cell and take the best.

    score = w_gain * unknown cells within sensor range of the cell
          - w_visit * integrated visit value
          - w_dist  * shortest-path distance

    At the default weights the gain count dominates, so the agent commits
    to long dives toward whatever region holds the most unseen area; the
    visit penalty and distance term order cells within a gain plateau.
    The same scores come out of either state mode: VFM4 recomputes the
    integrated value from its raw channels, IVFM2 reads its own channel
    and recovers the cell classes from the value bands.
    """
    blocked, gain_mask, penalty = _state_masks(state)
    gain = _disk_counts(gain_mask, weights.gain_radius_cells).astype(np.float64)
    eligible = np.isfinite(state.shortest_path) & ~blocked
    if not eligible.any():
        raise PolicyError("no reachable free cell in the crop")
    score = (
        weights.w_gain * gain
        - weights.w_visit * penalty
        - weights.w_dist * np.where(eligible, state.shortest_path, 0.0)
    )
    score = np.where(eligible, score, -np.inf)
    flat = int(np.argmax(score))
    crop_cell = (flat // state.crop_side, flat % state.crop_side)
    goal = state.to_global(crop_cell)
    assert goal is not None
    return Action(goal_global=goal, goal_crop=crop_cell)
