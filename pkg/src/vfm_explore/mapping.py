"""Shared global maps and the local state representations cut from them.

The fleet maintains one overhead occupancy estimate plus one visit-frequency
map (VFM) per agent; the merged VFM is the elementwise saturating sum of the
per-agent layers and is kept consistent after every update.  Local states
are square, agent-centered, north-oriented crops of the global maps in one
of two layouts: four raw channels (robot mask, overhead, merged VFM,
shortest-path field) or two integrated channels (integrated VFM,
shortest-path field).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.special import expit

from .grid_world import (
    COLLISION_RADIUS_M,
    CellClass,
    Observation,
    Pose,
    disk_offsets,
    inflate,
)

VFM_MAX = np.uint16(65535)
UNREACHABLE = math.inf
CROP_SIDE = 96

SQRT2 = math.sqrt(2.0)


class Overhead(IntEnum):
    """Fleet-level occupancy estimate per cell."""

    UNKNOWN = 0
    FREE_SEEN = 1
    OBSTACLE = 2


class StateMode(str, Enum):
    VFM4 = "vfm4"
    IVFM2 = "ivfm2"


class MapConsistencyError(RuntimeError):
    """The merged VFM diverged from the per-agent layers."""


@dataclass(frozen=True)
class IvfmParams:
    """Parameters of the visit-count integration transform.

    ``lam`` scales the squashed visit count, ``eps`` is the extra offset
    marking occupied and robot cells, so integrated values split into three
    bands: unvisited-free at ``lam * sigma(0)``, visited-free strictly
    between that and ``lam``, and occupied at exactly ``lam + eps``.
    """

    lam: float = 10.0
    eps: float = 2.0
    variant: str = "logistic"

    def __post_init__(self) -> None:
        if self.lam <= 0 or self.eps <= 0:
            raise ValueError("lam and eps must be positive")
        if self.variant not in ("logistic", "shifted"):
            raise ValueError(f"unknown integration variant {self.variant!r}")

    @property
    def occupied_value(self) -> float:
        return self.lam + self.eps

    @property
    def unvisited_value(self) -> float:
        # sigma(0) = 1/2 exactly in both variants' closed forms
        return self.lam * 0.5 if self.variant == "logistic" else 0.0


@dataclass
class GlobalMaps:
    """Shared maps of the whole fleet.

    Invariant: ``vfm_merged`` equals the elementwise saturating sum of
    ``vfm_per_agent`` at all times; ``update_global`` maintains it and
    :meth:`check_merge_law` verifies it.
    """

    overhead: np.ndarray
    vfm_per_agent: np.ndarray
    vfm_merged: np.ndarray
    resolution: float

    @classmethod
    def create(cls, shape: tuple[int, int], n_agents: int, resolution: float) -> "GlobalMaps":
        if n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        return cls(
            overhead=np.zeros(shape, dtype=np.uint8),
            vfm_per_agent=np.zeros((n_agents,) + tuple(shape), dtype=np.uint16),
            vfm_merged=np.zeros(shape, dtype=np.uint16),
            resolution=resolution,
        )

    @property
    def n_agents(self) -> int:
        return int(self.vfm_per_agent.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.overhead.shape  # type: ignore[return-value]

    def check_merge_law(self) -> None:
        sums = self.vfm_per_agent.astype(np.int64).sum(axis=0)
        expected = np.minimum(sums, int(VFM_MAX)).astype(np.uint16)
        if not np.array_equal(expected, self.vfm_merged):
            bad = int(np.sum(expected != self.vfm_merged))
            raise MapConsistencyError(f"merged VFM differs from layer sum at {bad} cells")


def update_global(maps: GlobalMaps, agent_id: int, observation: Observation) -> GlobalMaps:
    """Fold one scan into the shared maps.

    Every observed cell gets its overhead class set and the observing
    agent's visit count incremented (saturating at the uint16 ceiling); the
    merged VFM is recomputed at the touched cells.

    Args:
        maps: shared maps, mutated in place.
        agent_id: index of the observing agent.
        observation: scan output with ground-truth classes.

    Returns:
        The same ``maps`` object.
    """
    if not 0 <= agent_id < maps.n_agents:
        raise ValueError(f"unknown agent_id {agent_id}")
    rows, cols = observation.rows, observation.cols
    if rows.size == 0:
        return maps
    is_free = observation.classes == CellClass.FREE
    maps.overhead[rows[is_free], cols[is_free]] = Overhead.FREE_SEEN
    maps.overhead[rows[~is_free], cols[~is_free]] = Overhead.OBSTACLE

    layer = maps.vfm_per_agent[agent_id]
    layer[rows, cols] = np.minimum(layer[rows, cols], VFM_MAX - np.uint16(1)) + np.uint16(1)
    sums = maps.vfm_per_agent[:, rows, cols].astype(np.int64).sum(axis=0)
    maps.vfm_merged[rows, cols] = np.minimum(sums, int(VFM_MAX)).astype(np.uint16)
    return maps


@dataclass
class DistanceField:
    """Shortest-path distances (in cell units) from a source cell.

    Unreachable cells hold ``inf``.
    """

    dist: np.ndarray
    source: tuple[int, int]

    def reachable(self, cell: tuple[int, int]) -> bool:
        return bool(np.isfinite(self.dist[cell]))


def shortest_path_field(
    overhead: np.ndarray, source: tuple[int, int], resolution: float
) -> DistanceField:
    """8-connected shortest-path distances over the known map.

    Obstacle cells inflated by the collision radius are untraversable;
    Unknown cells are traversable (optimistic planning).  Step costs are 1
    for axis moves and sqrt(2) for diagonals, so distances are in cell
    units.  The source cell is always traversable, which keeps the field
    usable when the robot sits inside the inflation margin of a freshly
    observed obstacle.
    """
    h, w = overhead.shape
    blocked = inflate(overhead == Overhead.OBSTACLE, COLLISION_RADIUS_M / resolution)
    blocked[source] = False
    free = ~blocked

    idx = np.arange(h * w).reshape(h, w)
    rows_l: list[np.ndarray] = []
    cols_l: list[np.ndarray] = []
    data_l: list[np.ndarray] = []
    for dr, dc, wgt in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, SQRT2), (1, -1, SQRT2)):
        src_r = slice(max(0, -dr), min(h, h - dr))
        src_c = slice(max(0, -dc), min(w, w - dc))
        dst_r = slice(max(0, dr), min(h, h + dr))
        dst_c = slice(max(0, dc), min(w, w + dc))
        ok = free[src_r, src_c] & free[dst_r, dst_c]
        rows_l.append(idx[src_r, src_c][ok])
        cols_l.append(idx[dst_r, dst_c][ok])
        data_l.append(np.full(int(ok.sum()), wgt))
    graph = sparse.coo_matrix(
        (np.concatenate(data_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
        shape=(h * w, h * w),
    )
    dist = csgraph.dijkstra(graph.tocsr(), directed=False, indices=int(idx[source]))
    return DistanceField(dist=dist.reshape(h, w), source=(int(source[0]), int(source[1])))


def crop_indices(
    pose: Pose, resolution: float, crop_side: int, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices of an agent-centered, north-oriented crop.

    Crop cell ``(i, j)`` maps to the global cell nearest to the crop offset
    rotated by ``-theta`` about the agent's cell, so the agent's heading
    always points toward crop row 0.  Rounding is nearest-even at exact
    halves, which makes the crop an exact window copy whenever ``theta`` is
    a multiple of ``pi/2``.

    Returns:
        ``(src_rows, src_cols, valid)``, each ``(crop_side, crop_side)``;
        ``valid`` is False where the crop sticks out of the global map.
    """
    ar, ac = pose.cell(resolution)
    half = crop_side // 2
    offs = np.arange(crop_side) - half
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    cos_t = math.cos(pose.theta)
    sin_t = math.sin(pose.theta)
    src_r = np.rint(ar + dr * cos_t + dc * sin_t).astype(np.int64)
    src_c = np.rint(ac - dr * sin_t + dc * cos_t).astype(np.int64)
    valid = (src_r >= 0) & (src_r < shape[0]) & (src_c >= 0) & (src_c < shape[1])
    return src_r, src_c, valid


def robot_mask(crop_side: int, resolution: float) -> np.ndarray:
    """Binary disk of the collision radius at the crop center."""
    mask = np.zeros((crop_side, crop_side), dtype=bool)
    center = crop_side // 2
    for dr, dc in disk_offsets(COLLISION_RADIUS_M / resolution):
        r, c = center + dr, center + dc
        if 0 <= r < crop_side and 0 <= c < crop_side:
            mask[r, c] = True
    return mask


def crop_local(
    maps: GlobalMaps, pose: Pose, crop_side: int = CROP_SIDE
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cut the raw local channels for one agent.

    Returns:
        ``(robot_mask, overhead_local, vfm_local)``.  Cells outside the
        global map read as Unknown with zero visits.
    """
    src_r, src_c, valid = crop_indices(pose, maps.resolution, crop_side, maps.shape)
    cr = np.clip(src_r, 0, maps.shape[0] - 1)
    cc = np.clip(src_c, 0, maps.shape[1] - 1)
    overhead_local = np.where(valid, maps.overhead[cr, cc], np.uint8(Overhead.UNKNOWN))
    vfm_local = np.where(valid, maps.vfm_merged[cr, cc], np.uint16(0))
    return robot_mask(crop_side, maps.resolution), overhead_local, vfm_local


def integrate(
    vfm_local: np.ndarray,
    overhead_local: np.ndarray,
    mask: np.ndarray,
    params: IvfmParams = IvfmParams(),
) -> np.ndarray:
    """Collapse visit counts and occupancy into one float channel.

    Free and unknown cells map to ``lam * sigma(count)`` (the ``shifted``
    variant uses ``lam * (2*sigma(count) - 1)``); cells that are occupied
    or covered by the robot footprint map to ``lam + eps``.  Free values
    are clamped one ulp below ``lam`` so the free band stays strictly below
    the occupied band even where the sigmoid saturates in float64.
    """
    counts = vfm_local.astype(np.float64)
    if params.variant == "logistic":
        vals = params.lam * expit(counts)
    else:
        vals = params.lam * (2.0 * expit(counts) - 1.0)
    np.minimum(vals, np.nextafter(params.lam, 0.0), out=vals)
    occupied = (overhead_local == Overhead.OBSTACLE) | mask
    vals[occupied] = params.occupied_value
    return vals


@dataclass
class LocalState:
    """One agent's policy input: cropped channels plus crop-frame metadata.

    ``VFM4`` carries ``(robot_mask, overhead, vfm, shortest_path)``;
    ``IVFM2`` carries ``(ivfm, shortest_path)``.  The source-index arrays
    tie crop cells back to global cells and are bookkeeping, not payload.
    """

    mode: StateMode
    crop_side: int
    pose: Pose
    params: IvfmParams
    shortest_path: np.ndarray
    robot_mask: np.ndarray | None = None
    overhead: np.ndarray | None = None
    vfm: np.ndarray | None = None
    ivfm: np.ndarray | None = None
    src_rows: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    src_cols: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    valid: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @property
    def channel_count(self) -> int:
        return 4 if self.mode is StateMode.VFM4 else 2

    def to_global(self, crop_cell: tuple[int, int]) -> tuple[int, int] | None:
        """Global cell behind a crop cell, or None outside the map."""
        i, j = crop_cell
        if not self.valid[i, j]:
            return None
        return int(self.src_rows[i, j]), int(self.src_cols[i, j])


def build_state(
    maps: GlobalMaps,
    pose: Pose,
    mode: StateMode,
    crop_side: int = CROP_SIDE,
    params: IvfmParams = IvfmParams(),
    field_global: DistanceField | None = None,
) -> LocalState:
    """Assemble the policy input for one agent.

    The shortest-path field is computed on the global overhead from the
    agent's cell and then cropped with the same transform as the map
    channels; out-of-map cells are unreachable.  Pass ``field_global`` to
    reuse a field already computed for this pose.
    """
    if field_global is None:
        field_global = shortest_path_field(maps.overhead, pose.cell(maps.resolution), maps.resolution)
    src_r, src_c, valid = crop_indices(pose, maps.resolution, crop_side, maps.shape)
    cr = np.clip(src_r, 0, maps.shape[0] - 1)
    cc = np.clip(src_c, 0, maps.shape[1] - 1)
    spf = np.where(valid, field_global.dist[cr, cc], UNREACHABLE)
    overhead_local = np.where(valid, maps.overhead[cr, cc], np.uint8(Overhead.UNKNOWN))
    vfm_local = np.where(valid, maps.vfm_merged[cr, cc], np.uint16(0))
    mask = robot_mask(crop_side, maps.resolution)

    if mode is StateMode.VFM4:
        return LocalState(
            mode=mode,
            crop_side=crop_side,
            pose=pose,
            params=params,
            shortest_path=spf,
            robot_mask=mask,
            overhead=overhead_local,
            vfm=vfm_local,
            src_rows=src_r,
            src_cols=src_c,
            valid=valid,
        )
    ivfm = integrate(vfm_local, overhead_local, mask, params)
    return LocalState(
        mode=mode,
        crop_side=crop_side,
        pose=pose,
        params=params,
        shortest_path=spf,
        ivfm=ivfm,
        src_rows=src_r,
        src_cols=src_c,
        valid=valid,
    )


def write_pgm16(path: Path, values: np.ndarray) -> None:
    """Write a 16-bit binary PGM (P5, maxval 65535, big-endian samples)."""
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.astype(">u2").tobytes())


def read_pgm16(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError(f"not a 16-bit P5 PGM: {path}")
    w, h = (int(tok) for tok in parts[1].split())
    return np.frombuffer(parts[3][: 2 * w * h], dtype=">u2").reshape(h, w).astype(np.uint16)


def export_snapshot(maps: GlobalMaps, out_dir: Path, episode: int, step: int) -> list[Path]:
    """Dump the shared maps for offline inspection.

    Writes ``{episode}_{step}_overhead.pgm`` and ``{episode}_{step}_vfm.pgm``
    (16-bit P5) plus ``{episode}_{step}_vfm.csv`` with the raw merged
    counts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out_dir / f"{episode}_{step}_overhead.pgm"
    write_pgm16(p, maps.overhead.astype(np.uint16))
    paths.append(p)
    p = out_dir / f"{episode}_{step}_vfm.pgm"
    write_pgm16(p, maps.vfm_merged)
    paths.append(p)
    p = out_dir / f"{episode}_{step}_vfm.csv"
    np.savetxt(p, maps.vfm_merged.astype(np.int64), fmt="%d", delimiter=",")
    paths.append(p)
    return paths
