"""Heightmap terrain, steppable classification with edge margin, scenario
generators (aligned / staggered / random block fields), and the foothold
planner.

Grids are row-major with axis 0 = x (forward) and axis 1 = y (lateral);
cell (i, j) center sits at origin + ((i + 0.5) res, (j + 0.5) res).
HeightMap and FootholdMask are immutable after construction; queries are
safe concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .config import DEFAULT_CONFIG


class CellClass(IntEnum):
    UNKNOWN = 0
    UNSTEPPABLE = 1
    MARGIN = 2
    STEPPABLE = 3


class NoFeasibleFoothold(RuntimeError):
    pass


@dataclass
class HeightMap:
    origin: np.ndarray  # world position of the grid corner (m)
    resolution: float
    elevation: np.ndarray  # (nx, ny), NaN = unobserved

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.elevation = np.asarray(self.elevation, dtype=float)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.elevation.setflags(write=False)

    @property
    def shape(self):
        return self.elevation.shape

    @property
    def observed_fraction(self) -> float:
        return float(np.isfinite(self.elevation).mean())

    def extent_x(self) -> tuple[float, float]:
        return float(self.origin[0]), float(self.origin[0] + self.shape[0] * self.resolution)

    def cell_of(self, xy) -> tuple[int, int]:
        i = int(np.floor((xy[0] - self.origin[0]) / self.resolution))
        j = int(np.floor((xy[1] - self.origin[1]) / self.resolution))
        if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
            raise IndexError(f"point {xy} outside the map")
        return i, j

    def center_of(self, i: int, j: int) -> np.ndarray:
        x = self.origin[0] + (i + 0.5) * self.resolution
        y = self.origin[1] + (j + 0.5) * self.resolution
        return np.array([x, y])

    def elevation_at(self, xy) -> float:
        i, j = self.cell_of(xy)
        return float(self.elevation[i, j])


@dataclass
class FootholdMask:
    origin: np.ndarray
    resolution: float
    classes: np.ndarray  # (nx, ny) of CellClass values

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.classes = np.asarray(self.classes)
        self.classes.setflags(write=False)

    @property
    def shape(self):
        return self.classes.shape

    def cell_of(self, xy):
        i = int(np.floor((xy[0] - self.origin[0]) / self.resolution))
        j = int(np.floor((xy[1] - self.origin[1]) / self.resolution))
        if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
            raise IndexError(f"point {xy} outside the map")
        return i, j


@dataclass
class TerrainScenario:
    """Block-field scenario: 6"x16" blocks at height 0, gaps dropping to
    gap_depth, gap lengths drawn from gap_range, deterministic per seed."""

    kind: str  # "aligned" | "staggered" | "random" | "flat"
    seed: int = 0
    length: float = 3.0
    width: float = 1.2
    gap_range: tuple = field(default_factory=lambda: tuple(DEFAULT_CONFIG["terrain"]["gap_range"]))
    resolution: float = field(default_factory=lambda: DEFAULT_CONFIG["terrain"]["resolution"])
    block_length: float = field(default_factory=lambda: DEFAULT_CONFIG["terrain"]["block_length"])
    block_width: float = field(default_factory=lambda: DEFAULT_CONFIG["terrain"]["block_width"])
    gap_depth: float = field(default_factory=lambda: DEFAULT_CONFIG["terrain"]["gap_depth"])
    lead_in: float = 0.8  # solid ground before the first gap
    yaw_range: float = 0.3  # random scenario only (rad)

    def __post_init__(self):
        if self.kind not in ("aligned", "staggered", "random", "flat"):
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        lo, hi = self.gap_range
        if not 0 < lo <= hi:
            raise ValueError("gap_range must be positive and ordered")


def _gap_sequence(rng, scenario, start, end):
    """Alternating (block, gap) x-intervals from `start` until past `end`."""
    gaps = []
    x = start
    while x < end:
        x += scenario.block_length
        gap = rng.uniform(*scenario.gap_range)
        gaps.append((x, x + gap))
        x += gap
    return gaps


def generate_terrain(scenario: TerrainScenario) -> HeightMap:
    """Deterministic heightmap for a scenario; same seed, same bits."""
    res = scenario.resolution
    nx = int(round(scenario.length / res))
    ny = int(round(scenario.width / res))
    origin = np.array([-scenario.lead_in, -scenario.width / 2, 0.0])
    elev = np.zeros((nx, ny))
    rng = np.random.default_rng(scenario.seed)
    xs = origin[0] + (np.arange(nx) + 0.5) * res
    ys = origin[1] + (np.arange(ny) + 0.5) * res

    if scenario.kind == "flat":
        return HeightMap(origin, res, elev)

    if scenario.kind == "aligned":
        for x0, x1 in _gap_sequence(rng, scenario, 0.0, scenario.length - scenario.lead_in):
            band = (xs >= x0) & (xs < x1)
            elev[band, :] = scenario.gap_depth
    elif scenario.kind == "staggered":
        left = _gap_sequence(rng, scenario, 0.0, scenario.length - scenario.lead_in)
        # independent phasing on the right track
        offset = rng.uniform(0.4, 0.8) * scenario.block_length
        right = _gap_sequence(rng, scenario, offset, scenario.length - scenario.lead_in)
        for x0, x1 in left:
            band = (xs >= x0) & (xs < x1)
            elev[np.ix_(band, ys >= 0)] = scenario.gap_depth
        for x0, x1 in right:
            band = (xs >= x0) & (xs < x1)
            elev[np.ix_(band, ys < 0)] = scenario.gap_depth
    else:  # random: yawed blocks stamped on a sunken field
        elev[:] = scenario.gap_depth
        elev[xs < 0.0, :] = 0.0  # lead-in stays solid
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        x = 0.0
        while x < scenario.length - scenario.lead_in:
            gap = rng.uniform(*scenario.gap_range)
            yaw = rng.uniform(-scenario.yaw_range, scenario.yaw_range)
            y_off = rng.uniform(-0.08, 0.08)
            cx = x + scenario.block_length / 2
            dx, dy = X - cx, Y - y_off
            c, s = np.cos(yaw), np.sin(yaw)
            u = c * dx + s * dy
            v = -s * dx + c * dy
            inside = (np.abs(u) <= scenario.block_length / 2) & (np.abs(v) <= scenario.block_width / 2)
            elev[inside] = 0.0
            x += scenario.block_length + gap
    return HeightMap(origin, res, elev)


def classify(
    hmap: HeightMap,
    margin: float | None = None,
    height_threshold: float = -0.05,
    max_slope_deg: float | None = None,
) -> FootholdMask:
    """Steppable / unsteppable / margin / unknown classification.

    Cells are unsteppable when below the walkable plane or when the surface
    normal (central-difference gradient) tilts past max_slope_deg; the
    normal test only fires between neighbours that are themselves at
    walkable height, so clean cliff edges are handled by the height test
    plus the margin erosion rather than being eaten twice.  Steppable cells
    within `margin` of anything unsteppable or unknown become margin cells.
    """
    if margin is None:
        margin = DEFAULT_CONFIG["terrain"]["margin"]
    if max_slope_deg is None:
        max_slope_deg = DEFAULT_CONFIG["terrain"]["normal_max_slope_deg"]
    elev = hmap.elevation
    unknown = ~np.isfinite(elev)
    walkable = np.isfinite(elev) & (elev >= height_threshold)
    low = np.isfinite(elev) & ~walkable

    filled = np.where(np.isfinite(elev), elev, 0.0)
    gx, gy = np.gradient(filled, hmap.resolution)
    # neighbour-validity masks for the central-difference stencil
    ok_x = np.zeros_like(walkable)
    ok_x[1:-1] = walkable[2:] & walkable[:-2]
    ok_y = np.zeros_like(walkable)
    ok_y[:, 1:-1] = walkable[:, 2:] & walkable[:, :-2]
    slope = np.sqrt(np.where(ok_x, gx, 0.0) ** 2 + np.where(ok_y, gy, 0.0) ** 2)
    steep = walkable & (slope > np.tan(np.deg2rad(max_slope_deg)))

    classes = np.full(elev.shape, int(CellClass.STEPPABLE), dtype=np.int8)
    classes[low | steep] = int(CellClass.UNSTEPPABLE)
    classes[unknown] = int(CellClass.UNKNOWN)

    bad = classes != int(CellClass.STEPPABLE)
    if bad.any():
        dist = ndimage.distance_transform_edt(~bad, sampling=hmap.resolution)
        in_margin = (classes == int(CellClass.STEPPABLE)) & (dist <= margin + 1e-9)
        classes[in_margin] = int(CellClass.MARGIN)
    return FootholdMask(hmap.origin, hmap.resolution, classes)


def plan_foothold(
    mask: FootholdMask,
    nominal,
    search_radius: float | None = None,
    hmap: HeightMap | None = None,
) -> np.ndarray:
    """Nearest steppable cell center to `nominal` within search_radius.

    Ties break deterministically: smaller |dx|, then smaller |dy|, then
    smaller x.  Returns (x, y, elevation); elevation 0 without a heightmap.
    """
    if search_radius is None:
        search_radius = DEFAULT_CONFIG["terrain"]["search_radius"]
    res = mask.resolution
    i0, j0 = mask.cell_of(nominal)

    def result(i, j):
        x = mask.origin[0] + (i + 0.5) * res
        y = mask.origin[1] + (j + 0.5) * res
        z = float(hmap.elevation[i, j]) if hmap is not None else 0.0
        return np.array([x, y, z])

    if mask.classes[i0, j0] == int(CellClass.STEPPABLE):
        return result(i0, j0)

    reach = int(np.ceil(search_radius / res)) + 1
    ilo, ihi = max(0, i0 - reach), min(mask.shape[0], i0 + reach + 1)
    jlo, jhi = max(0, j0 - reach), min(mask.shape[1], j0 + reach + 1)
    window = mask.classes[ilo:ihi, jlo:jhi]
    cand = np.argwhere(window == int(CellClass.STEPPABLE))
    if cand.size == 0:
        raise NoFeasibleFoothold(f"no steppable cell within {search_radius} m of {nominal}")
    nom = np.asarray(nominal, dtype=float)[:2]
    centers = np.column_stack(
        [
            mask.origin[0] + (cand[:, 0] + ilo + 0.5) * res,
            mask.origin[1] + (cand[:, 1] + jlo + 0.5) * res,
        ]
    )
    d = np.hypot(centers[:, 0] - nom[0], centers[:, 1] - nom[1])
    ok = d <= search_radius
    if not ok.any():
        raise NoFeasibleFoothold(f"no steppable cell within {search_radius} m of {nominal}")
    cand, centers, d = cand[ok], centers[ok], d[ok]
    keys = np.lexsort(
        (
            centers[:, 0],
            np.abs(centers[:, 1] - nom[1]),
            np.abs(centers[:, 0] - nom[0]),
            d,
        )
    )
    best = cand[keys[0]]
    return result(best[0] + ilo, best[1] + jlo)


def save_terrain(hmap: HeightMap, path) -> None:
    """terrain-v1: header (origin, resolution, dims) + row-major elevations."""
    with open(path, "w") as fh:
        fh.write("terrain-v1\n")
        fh.write("origin %.17g %.17g %.17g\n" % tuple(hmap.origin))
        fh.write("resolution %.17g\n" % hmap.resolution)
        fh.write("dims %d %d\n" % hmap.shape)
        for row in hmap.elevation:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_terrain(path) -> HeightMap:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "terrain-v1":
            raise ValueError(f"unsupported terrain format {header!r}")
        origin = np.array([float(v) for v in fh.readline().split()[1:]])
        resolution = float(fh.readline().split()[1])
        nx, ny = (int(v) for v in fh.readline().split()[1:])
        rows = []
        for _ in range(nx):
            line = fh.readline()
            if not line:
                raise ValueError("terrain file truncated")
            rows.append([float(v) for v in line.split()])
        elev = np.array(rows)
        if elev.shape != (nx, ny):
            raise ValueError("terrain file dims mismatch")
    return HeightMap(origin, resolution, elev)


def nominal_foothold(gait, leg: str, current_state, phase_index: int) -> np.ndarray:
    """Planned touchdown of `leg` for the gait's phase, transported to the
    world by the planar pose offset between the robot and the gait's
    cycle-start frame."""
    td = gait.touchdown_position(leg, phase_index)
    gait_anchor = gait.ref_states[0]
    from .mpc import euler_zyx

    yaw_now = euler_zyx(current_state.R)[2]
    yaw_gait = euler_zyx(gait_anchor.R)[2]
    dyaw = yaw_now - yaw_gait
    c, s = np.cos(dyaw), np.sin(dyaw)
    Rz = np.array([[c, -s], [s, c]])
    rel = td[:2] - gait_anchor.p[:2]
    xy = current_state.p[:2] + Rz @ rel
    return np.array([xy[0], xy[1], td[2] if td.shape[0] > 2 else 0.0])
