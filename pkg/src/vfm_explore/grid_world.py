"""Arena construction and ray-cast sensing on occupancy grids.

Conventions used throughout the package:

* Grids are indexed ``(row, col)`` with row 0 at the top edge.
* World coordinates are meters: ``x = col * resolution`` (increasing col),
  ``y = row * resolution`` (increasing row).  A cell ``(r, c)`` covers the
  square ``[r, r+1) x [c, c+1)`` in cell units and its center sits at
  ``(r + 0.5, c + 0.5)``.
* Headings are compass-style bearings in radians, normalized to
  ``[-pi, pi)``: ``theta = 0`` points toward row 0 ("up"), ``pi/2`` points
  toward increasing col ("right").  A unit move along heading ``theta``
  changes the position by ``(drow, dcol) = (-cos(theta), sin(theta))``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
from scipy import ndimage

RESOLUTION_M = 0.05
COLLISION_RADIUS_M = 0.09

# bounded rejection sampling; exceeding these means the spec parameters are
# infeasible, not bad luck
PLACEMENT_RETRIES = 1000
ARENA_RETRIES = 100


class CellClass(IntEnum):
    """Ground-truth occupancy classes."""

    FREE = 0
    WALL = 1
    COLUMN = 2
    DIVIDER = 3


class ArenaKind(str, Enum):
    ONE_X = "one_x"
    TWO_X = "two_x"
    DIVIDER = "divider"


class ArenaGenerationError(RuntimeError):
    """Raised when obstacle placement cannot satisfy the constraints."""


@dataclass(frozen=True)
class ArenaSpec:
    """Parametric description of an arena family.

    The stock families: ``one_x`` is a 3 m x 3 m walled square with up to 25
    randomly placed 0.1 m square columns, ``two_x`` scales that to
    4.2 m x 4.2 m with up to 50 columns, and ``divider`` is the 3 m square
    with a single 0.8 m x 0.05 m wall strip instead of columns.
    """

    kind: ArenaKind = ArenaKind.ONE_X
    side_m: float = 3.0
    max_columns: int = 25
    column_width_m: float = 0.1
    divider_len_m: float = 0.8
    divider_thick_m: float = 0.05
    resolution: float = RESOLUTION_M

    def __post_init__(self) -> None:
        if self.side_m <= 0 or self.resolution <= 0:
            raise ValueError("side_m and resolution must be positive")
        if self.max_columns < 0:
            raise ValueError("max_columns must be >= 0")
        if self.grid_side < 8:
            raise ValueError("arena too small for walls plus interior")

    @property
    def grid_side(self) -> int:
        return int(round(self.side_m / self.resolution))

    @classmethod
    def one_x(cls) -> "ArenaSpec":
        return cls(kind=ArenaKind.ONE_X, side_m=3.0, max_columns=25)

    @classmethod
    def two_x(cls) -> "ArenaSpec":
        return cls(kind=ArenaKind.TWO_X, side_m=4.2, max_columns=50)

    @classmethod
    def divider(cls) -> "ArenaSpec":
        return cls(kind=ArenaKind.DIVIDER, side_m=3.0, max_columns=0)

    @classmethod
    def from_kind(cls, kind: ArenaKind | str) -> "ArenaSpec":
        kind = ArenaKind(kind)
        if kind is ArenaKind.ONE_X:
            return cls.one_x()
        if kind is ArenaKind.TWO_X:
            return cls.two_x()
        return cls.divider()


@dataclass(frozen=True)
class Pose:
    """Robot pose in world coordinates (meters, radians)."""

    x: float
    y: float
    theta: float

    def cell(self, resolution: float) -> tuple[int, int]:
        return int(self.y / resolution), int(self.x / resolution)

    @classmethod
    def at_cell(cls, cell: tuple[int, int], theta: float, resolution: float) -> "Pose":
        r, c = cell
        return cls(x=(c + 0.5) * resolution, y=(r + 0.5) * resolution, theta=theta)


@dataclass(frozen=True)
class SensorSpec:
    """Planar range sensor: a dense fan of rays over a limited field of view.

    ``ray_count`` fixes the nominal angular sampling; visibility itself is
    evaluated per candidate cell so the reported set is independent of ray
    aliasing artifacts.
    """

    fov_rad: float = math.radians(60.0)
    range_m: float = 0.55
    ray_count: int = 128

    def __post_init__(self) -> None:
        if not 0 < self.fov_rad <= 2 * math.pi:
            raise ValueError("fov_rad must be in (0, 2*pi]")
        if self.range_m <= 0:
            raise ValueError("range_m must be positive")
        if self.ray_count < 2:
            raise ValueError("ray_count must be >= 2")


@dataclass
class Observation:
    """Cells seen by one scan, sorted by (row, col).

    ``classes`` holds the ground-truth :class:`CellClass` of each cell; the
    first occupied cell along a sight line is included, cells behind it are
    not.
    """

    rows: np.ndarray
    cols: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return int(self.rows.size)

    def __iter__(self):
        for r, c, k in zip(self.rows, self.cols, self.classes):
            yield (int(r), int(c)), CellClass(int(k))

    def as_set(self) -> frozenset:
        return frozenset(((int(r), int(c)), int(k)) for r, c, k in zip(self.rows, self.cols, self.classes))

    def contains(self, cell: tuple[int, int]) -> bool:
        return bool(np.any((self.rows == cell[0]) & (self.cols == cell[1])))


@dataclass
class Arena:
    """A generated world: ground-truth occupancy plus task annotations.

    ``free_component`` is the 8-connected set of traversable cells (free
    after obstacle inflation by the collision radius) containing every spawn
    and the target.
    """

    occupancy: np.ndarray
    resolution: float
    seed: int
    kind: ArenaKind
    target_cell: tuple[int, int]
    spawn_cells: list[tuple[int, int]] = field(default_factory=list)
    free_component: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape  # type: ignore[return-value]

    @property
    def free_mask(self) -> np.ndarray:
        return self.occupancy == CellClass.FREE

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        h, w = self.occupancy.shape
        return 0 <= r < h and 0 <= c < w


def wrap_angle(theta: float | np.ndarray) -> float | np.ndarray:
    """Normalize an angle (or array of angles) to ``[-pi, pi)``."""
    return (theta + math.pi) % (2 * math.pi) - math.pi


def disk_offsets(radius_cells: float) -> np.ndarray:
    """Integer ``(dr, dc)`` offsets whose Euclidean norm is <= radius_cells."""
    r = int(math.floor(radius_cells))
    dr, dc = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    keep = dr * dr + dc * dc <= radius_cells * radius_cells + 1e-9
    return np.stack([dr[keep], dc[keep]], axis=1)


def inflate(blocked: np.ndarray, radius_cells: float) -> np.ndarray:
    """Dilate a boolean obstacle mask by a Euclidean disk.

    Cells outside the grid do not contribute; the border walls supply their
    own inflation in practice.
    """
    out = np.zeros_like(blocked, dtype=bool)
    h, w = blocked.shape
    for dr, dc in disk_offsets(radius_cells):
        src_r = slice(max(0, -dr), min(h, h - dr))
        src_c = slice(max(0, -dc), min(w, w - dc))
        dst_r = slice(max(0, dr), min(h, h + dr))
        dst_c = slice(max(0, dc), min(w, w + dc))
        out[dst_r, dst_c] |= blocked[src_r, src_c]
    return out


def traversable_mask(occupancy: np.ndarray, resolution: float) -> np.ndarray:
    """Free cells a robot of the collision radius can occupy."""
    blocked = occupancy != CellClass.FREE
    return ~inflate(blocked, COLLISION_RADIUS_M / resolution) & ~blocked


def _place_columns(occ: np.ndarray, spec: ArenaSpec, rng: np.random.Generator) -> bool:
    side = spec.grid_side
    wcells = max(1, int(round(spec.column_width_m / spec.resolution)))
    count = int(rng.integers(0, spec.max_columns + 1))
    for _ in range(count):
        for _ in range(PLACEMENT_RETRIES):
            r0 = int(rng.integers(1, side - wcells))
            c0 = int(rng.integers(1, side - wcells))
            patch = occ[r0 : r0 + wcells, c0 : c0 + wcells]
            if np.all(patch == CellClass.FREE):
                patch[:] = CellClass.COLUMN
                break
        else:
            return False
    return True


def _place_divider(occ: np.ndarray, spec: ArenaSpec, rng: np.random.Generator) -> None:
    side = spec.grid_side
    len_cells = max(1, int(round(spec.divider_len_m / spec.resolution)))
    thick_cells = max(1, int(round(spec.divider_thick_m / spec.resolution)))
    r0 = (side - len_cells) // 2
    c0 = int(rng.integers(1, side - thick_cells))
    occ[r0 : r0 + len_cells, c0 : c0 + thick_cells] = CellClass.DIVIDER


def generate_arena(spec: ArenaSpec, seed: int, n_spawns: int = 1) -> Arena:
    """Build a deterministic arena for ``(spec, seed, n_spawns)``.

    Obstacles are rejection-sampled, then spawn cells and the target are
    drawn uniformly from one traversable connected component so that every
    episode is solvable.  Spawn cells keep a pairwise center distance of at
    least twice the collision radius.

    Raises:
        ArenaGenerationError: placement constraints could not be met within
            the retry budgets.
    """
    if n_spawns < 1:
        raise ValueError("n_spawns must be >= 1")
    rng = np.random.default_rng(seed)
    side = spec.grid_side
    min_sep_cells = 2.0 * COLLISION_RADIUS_M / spec.resolution

    for _ in range(ARENA_RETRIES):
        occ = np.full((side, side), CellClass.FREE, dtype=np.uint8)
        occ[0, :] = CellClass.WALL
        occ[-1, :] = CellClass.WALL
        occ[:, 0] = CellClass.WALL
        occ[:, -1] = CellClass.WALL
        if spec.kind is ArenaKind.DIVIDER:
            _place_divider(occ, spec, rng)
        elif not _place_columns(occ, spec, rng):
            continue

        trav = traversable_mask(occ, spec.resolution)
        cells = np.argwhere(trav)
        if cells.shape[0] < n_spawns + 1:
            continue
        first = tuple(cells[int(rng.integers(cells.shape[0]))])
        labels, _ = ndimage.label(trav, structure=np.ones((3, 3), dtype=int))
        comp = labels == labels[first]
        comp_cells = np.argwhere(comp)
        if comp_cells.shape[0] < n_spawns + 1:
            continue

        target = None
        for _ in range(PLACEMENT_RETRIES):
            cand = tuple(comp_cells[int(rng.integers(comp_cells.shape[0]))])
            if cand != first:
                target = cand
                break
        if target is None:
            continue

        spawns = [first]
        ok = True
        for _ in range(n_spawns - 1):
            placed = False
            for _ in range(PLACEMENT_RETRIES):
                cand = tuple(comp_cells[int(rng.integers(comp_cells.shape[0]))])
                if cand == target:
                    continue
                d = min(math.hypot(cand[0] - s[0], cand[1] - s[1]) for s in spawns)
                if d > min_sep_cells:
                    spawns.append(cand)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        return Arena(
            occupancy=occ,
            resolution=spec.resolution,
            seed=seed,
            kind=spec.kind,
            target_cell=(int(target[0]), int(target[1])),
            spawn_cells=[(int(r), int(c)) for r, c in spawns],
            free_component=comp,
        )
    raise ArenaGenerationError(f"could not generate arena for seed {seed} after {ARENA_RETRIES} attempts")


def _visible_mask(
    occ: np.ndarray, pr: float, pc: float, trows: np.ndarray, tcols: np.ndarray
) -> np.ndarray:
    """Line-of-sight test from the point ``(pr, pc)`` (cell units) to cell centers.

    Closed supercover marching: every cell the sight segment touches blocks
    when occupied, including corner contacts.  A candidate is visible when
    the march reaches it before any other occupied cell; occupied candidates
    are therefore visible as the first hit along their own sight line.
    """
    h, w = occ.shape
    n = int(trows.size)
    visible = np.zeros(n, dtype=bool)
    if n == 0:
        return visible

    ir0, ic0 = int(math.floor(pr)), int(math.floor(pc))
    ir = np.full(n, ir0, dtype=np.int64)
    ic = np.full(n, ic0, dtype=np.int64)
    dr = trows + 0.5 - pr
    dc = tcols + 0.5 - pc
    sr = np.sign(dr).astype(np.int64)
    sc = np.sign(dc).astype(np.int64)
    with np.errstate(divide="ignore"):
        inv_r = np.where(dr != 0, 1.0 / np.abs(dr), np.inf)
        inv_c = np.where(dc != 0, 1.0 / np.abs(dc), np.inf)
    frac_r = np.where(sr > 0, ir0 + 1.0 - pr, pr - ir0)
    frac_c = np.where(sc > 0, ic0 + 1.0 - pc, pc - ic0)
    tmax_r = np.where(sr != 0, frac_r * inv_r, np.inf)
    tmax_c = np.where(sc != 0, frac_c * inv_c, np.inf)

    at_start = (trows == ir0) & (tcols == ic0)
    visible[at_start] = True
    idx = np.flatnonzero(~at_start)

    for _ in range(4 * (h + w)):
        if idx.size == 0:
            break
        tr_ = tmax_r[idx]
        tc_ = tmax_c[idx]
        corner = np.isfinite(tr_) & np.isfinite(tc_) & (np.abs(tr_ - tc_) < 1e-12)
        step_r = ~corner & (tr_ < tc_)
        step_c = ~corner & ~step_r

        ci = idx[corner]
        if ci.size:
            side_a = (ir[ci] + sr[ci], ic[ci])
            side_b = (ir[ci], ic[ci] + sc[ci])
            hit_target = ((side_a[0] == trows[ci]) & (side_a[1] == tcols[ci])) | (
                (side_b[0] == trows[ci]) & (side_b[1] == tcols[ci])
            )
            hit_wall = (occ[side_a] != CellClass.FREE) | (occ[side_b] != CellClass.FREE)
            visible[ci[hit_target]] = True
            adv = ci[~(hit_target | hit_wall)]
            ir[adv] += sr[adv]
            ic[adv] += sc[adv]
            tmax_r[adv] += inv_r[adv]
            tmax_c[adv] += inv_c[adv]
        else:
            adv = ci

        rsel = idx[step_r]
        ir[rsel] += sr[rsel]
        tmax_r[rsel] += inv_r[rsel]
        csel = idx[step_c]
        ic[csel] += sc[csel]
        tmax_c[csel] += inv_c[csel]

        moved = np.concatenate([adv, rsel, csel])
        at_target = (ir[moved] == trows[moved]) & (ic[moved] == tcols[moved])
        visible[moved[at_target]] = True
        hit = occ[ir[moved], ic[moved]] != CellClass.FREE
        idx = moved[~(at_target | hit)]
    else:
        raise RuntimeError("line-of-sight march failed to terminate")
    return visible


def sense(arena: Arena, pose: Pose, sensor: SensorSpec) -> Observation:
    """Simulate one scan and return every cell the sensor sees.

    A cell is reported when its center lies within ``range_m`` of the pose,
    its bearing falls inside the field of view, and the straight segment
    from the pose to the center crosses no occupied cell first.  The pose's
    own cell is always reported.

    Args:
        arena: ground-truth world.
        pose: sensing pose; its cell must be free and in bounds.
        sensor: sensor geometry.

    Returns:
        Observation sorted by (row, col).
    """
    res = arena.resolution
    h, w = arena.occupancy.shape
    pr = pose.y / res
    pc = pose.x / res
    ar, ac = int(math.floor(pr)), int(math.floor(pc))
    if not (0 <= ar < h and 0 <= ac < w):
        raise ValueError("pose outside the arena")
    if arena.occupancy[ar, ac] != CellClass.FREE:
        raise ValueError("cannot sense from an occupied cell")

    range_cells = sensor.range_m / res
    reach = int(math.ceil(range_cells))
    offs = np.arange(-reach, reach + 1)
    grid_r, grid_c = np.meshgrid(offs, offs, indexing="ij")
    rows = (ar + grid_r).ravel()
    cols = (ac + grid_c).ravel()
    inb = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows, cols = rows[inb], cols[inb]

    vr = rows + 0.5 - pr
    vc = cols + 0.5 - pc
    within = np.hypot(vr, vc) <= range_cells + 1e-9
    bearing = np.arctan2(vc, -vr)
    in_fov = np.abs(wrap_angle(bearing - pose.theta)) <= sensor.fov_rad / 2 + 1e-12
    keep = (within & in_fov) | ((rows == ar) & (cols == ac))
    rows, cols = rows[keep], cols[keep]

    vis = _visible_mask(arena.occupancy, pr, pc, rows, cols)
    rows, cols = rows[vis], cols[vis]
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    return Observation(rows=rows, cols=cols, classes=arena.occupancy[rows, cols].copy())


def target_visible(arena: Arena, observation: Observation) -> bool:
    """True when the scan saw the target cell."""
    return observation.contains(arena.target_cell)


_CHAR_FOR_CLASS = {
    CellClass.FREE: ".",
    CellClass.WALL: "#",
    CellClass.COLUMN: "C",
    CellClass.DIVIDER: "D",
}
_CLASS_FOR_CHAR = {v: k for k, v in _CHAR_FOR_CLASS.items()}
_HEADER_RE = re.compile(
    r"^# arena kind=(?P<kind>\S+) resolution=(?P<res>\S+) seed=(?P<seed>-?\d+)"
    r" spawns=(?P<spawns>\S+)$"
)


def arena_to_text(arena: Arena) -> str:
    """Serialize an arena to the plain-text grid format.

    One header comment line carries kind, resolution, seed and spawn cells;
    the body is one character per cell (``.#CD`` plus ``T`` marking the
    target, which always sits on a free cell).
    """
    spawns = ";".join(f"{r},{c}" for r, c in arena.spawn_cells)
    lines = [
        f"# arena kind={arena.kind.value} resolution={arena.resolution!r} "
        f"seed={arena.seed} spawns={spawns}"
    ]
    for r in range(arena.occupancy.shape[0]):
        chars = []
        for c in range(arena.occupancy.shape[1]):
            if (r, c) == arena.target_cell:
                chars.append("T")
            else:
                chars.append(_CHAR_FOR_CLASS[CellClass(int(arena.occupancy[r, c]))])
        lines.append("".join(chars))
    return "\n".join(lines) + "\n"


def arena_from_text(text: str) -> Arena:
    """Parse the plain-text grid format back into an :class:`Arena`.

    The traversable component is recomputed from the grid, so a round trip
    through :func:`arena_to_text` reproduces the original arena exactly.
    """
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise ValueError("empty arena text")
    m = _HEADER_RE.match(lines[0])
    if m is None:
        raise ValueError(f"bad arena header: {lines[0]!r}")
    kind = ArenaKind(m.group("kind"))
    resolution = float(m.group("res"))
    seed = int(m.group("seed"))
    spawns = []
    for part in m.group("spawns").split(";"):
        if part:
            r, c = part.split(",")
            spawns.append((int(r), int(c)))

    body = lines[1:]
    width = len(body[0])
    occ = np.zeros((len(body), width), dtype=np.uint8)
    target = None
    for r, row in enumerate(body):
        if len(row) != width:
            raise ValueError(f"ragged arena row {r}")
        for c, ch in enumerate(row):
            if ch == "T":
                if target is not None:
                    raise ValueError("multiple target cells")
                target = (r, c)
                occ[r, c] = CellClass.FREE
            elif ch in _CLASS_FOR_CHAR:
                occ[r, c] = _CLASS_FOR_CHAR[ch]
            else:
                raise ValueError(f"unknown arena character {ch!r}")
    if target is None:
        raise ValueError("arena text has no target cell")
    if not spawns:
        raise ValueError("arena text has no spawn cells")

    trav = traversable_mask(occ, resolution)
    labels, _ = ndimage.label(trav, structure=np.ones((3, 3), dtype=int))
    comp = labels == labels[spawns[0]]
    return Arena(
        occupancy=occ,
        resolution=resolution,
        seed=seed,
        kind=kind,
        target_cell=target,
        spawn_cells=spawns,
        free_component=comp,
    )
