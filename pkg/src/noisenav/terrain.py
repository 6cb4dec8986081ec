"""Procedural height fields over a square arena, and a stacked bank for batched queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .nn import ConfigError

KINDS = ("smooth_slope", "rough_slope", "stairs_up", "stairs_down", "discrete_blocks")
ALL_KINDS = ("flat",) + KINDS
DEFAULT_PROPORTIONS = (0.25, 0.15, 0.25, 0.25, 0.1)
N_LEVELS = 5

# difficulty at level 4
MAX_SLOPE_DEG = 18.0
MAX_ROUGH = 0.05
MAX_STEP = 0.12
MAX_BLOCK = 0.12
STEP_WIDTH = 0.6


@dataclass
class TerrainField:
    grid: np.ndarray  # heights at vertices, indexed [ix, iy]
    cell: float
    origin: np.ndarray
    level: int
    kind: str
    var: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.var is None:
            self.var = local_variance(self.grid)

    @property
    def extent(self) -> float:
        return (self.grid.shape[0] - 1) * self.cell


def local_variance(grid: np.ndarray, size: int = 3) -> np.ndarray:
    mean = uniform_filter(grid, size=size, mode="nearest")
    sq = uniform_filter(grid * grid, size=size, mode="nearest")
    return np.maximum(sq - mean * mean, 0.0)


def flat(half: float = 12.0, cell: float = 0.125) -> TerrainField:
    n = int(round(2 * half / cell)) + 1
    return TerrainField(np.zeros((n, n)), cell, (-half, -half), 0, "flat")


def sample_kind(rng: np.random.Generator, proportions=DEFAULT_PROPORTIONS) -> str:
    p = np.asarray(proportions, dtype=np.float64)
    return KINDS[int(rng.choice(len(KINDS), p=p / p.sum()))]


def generate_terrain(kind: str, level: int, seed: int, half: float = 12.0, cell: float = 0.125,
                     proportions=DEFAULT_PROPORTIONS) -> TerrainField:
    """Deterministic terrain for ``(kind, level, seed)``; ``kind="random"`` draws by ``proportions``."""
    if not 0 <= level < N_LEVELS:
        raise ConfigError(f"terrain level {level} outside 0..{N_LEVELS - 1}")
    rng = np.random.default_rng(seed)
    if kind == "random":
        kind = sample_kind(rng, proportions)
    if kind not in ALL_KINDS:
        raise ConfigError(f"unknown terrain kind {kind!r}")
    d = level / (N_LEVELS - 1)
    n = int(round(2 * half / cell)) + 1
    axis = np.linspace(-half, half, n)
    x, y = np.meshgrid(axis, axis, indexing="ij")
    r = np.maximum(np.abs(x), np.abs(y))  # square rings around the arena center

    if kind == "flat":
        h = np.zeros((n, n))
    elif kind in ("smooth_slope", "rough_slope"):
        slope = np.tan(np.radians(MAX_SLOPE_DEG * d))
        period = 4.0
        phase = rng.uniform(0, period, size=2)
        tri = lambda u: np.abs(((u / period) % 1.0) - 0.5) * period  # noqa: E731
        h = slope * (tri(x + phase[0]) + tri(y + phase[1])) * 0.5
        h -= h.min()
        if kind == "rough_slope":
            amp = 0.005 + (MAX_ROUGH - 0.005) * d
            h = h + rng.uniform(-amp, amp, size=h.shape)
    elif kind in ("stairs_up", "stairs_down"):
        step = MAX_STEP * d
        offset = rng.uniform(0.0, STEP_WIDTH)
        rings = np.floor((r + offset) / STEP_WIDTH)
        h = step * rings
        if kind == "stairs_down":
            h = -h
    else:  # discrete_blocks
        h = np.zeros((n, n))
        height = MAX_BLOCK * d
        n_blocks = 600
        cx = rng.uniform(-half, half, n_blocks)
        cy = rng.uniform(-half, half, n_blocks)
        sx = rng.uniform(0.4, 1.2, n_blocks)
        sy = rng.uniform(0.4, 1.2, n_blocks)
        hz = rng.uniform(-height, height, n_blocks)
        for i in range(n_blocks):
            ix0, ix1 = np.searchsorted(axis, [cx[i] - sx[i] / 2, cx[i] + sx[i] / 2])
            iy0, iy1 = np.searchsorted(axis, [cy[i] - sy[i] / 2, cy[i] + sy[i] / 2])
            h[ix0:ix1, iy0:iy1] = hz[i]
    return TerrainField(h.astype(np.float64), cell, (-half, -half), level, kind)


class TerrainBank:
    """Stack of equally shaped terrains; environments refer to them by index."""

    def __init__(self, fields: list[TerrainField]):
        shapes = {f.grid.shape for f in fields}
        if len(shapes) != 1:
            raise ConfigError("terrain bank needs equally shaped grids")
        self.fields = list(fields)
        self.grids = np.stack([f.grid for f in fields])
        self.vars = np.stack([f.var for f in fields])
        self.cell = fields[0].cell
        self.origin = fields[0].origin
        self.n = fields[0].grid.shape[0]

    def __len__(self):
        return len(self.fields)

    def _coords(self, xy):
        f = (np.asarray(xy, dtype=np.float64) - self.origin) / self.cell
        f = np.clip(f, 0.0, self.n - 1.0)
        i = np.minimum(np.floor(f).astype(np.int64), self.n - 2)
        return i, f - i

    def height(self, tid, xy) -> np.ndarray:
        """Bilinear height at points ``xy[..., 2]`` of terrains ``tid`` (broadcast)."""
        i, t = self._coords(xy)
        g = self.grids
        tid = np.asarray(tid)
        ix, iy, tx, ty = i[..., 0], i[..., 1], t[..., 0], t[..., 1]
        h00 = g[tid, ix, iy]
        h10 = g[tid, ix + 1, iy]
        h01 = g[tid, ix, iy + 1]
        h11 = g[tid, ix + 1, iy + 1]
        return (h00 * (1 - tx) * (1 - ty) + h10 * tx * (1 - ty)
                + h01 * (1 - tx) * ty + h11 * tx * ty)

    def gradient(self, tid, xy) -> np.ndarray:
        i, t = self._coords(xy)
        g = self.grids
        tid = np.asarray(tid)
        ix, iy, tx, ty = i[..., 0], i[..., 1], t[..., 0], t[..., 1]
        h00 = g[tid, ix, iy]
        h10 = g[tid, ix + 1, iy]
        h01 = g[tid, ix, iy + 1]
        h11 = g[tid, ix + 1, iy + 1]
        gx = ((h10 - h00) * (1 - ty) + (h11 - h01) * ty) / self.cell
        gy = ((h01 - h00) * (1 - tx) + (h11 - h10) * tx) / self.cell
        return np.stack([gx, gy], axis=-1)

    def variance(self, tid, xy) -> np.ndarray:
        f = (np.asarray(xy, dtype=np.float64) - self.origin) / self.cell
        i = np.clip(np.rint(f).astype(np.int64), 0, self.n - 1)
        return self.vars[np.asarray(tid), i[..., 0], i[..., 1]]


def heightmap_offsets(n: int = 32, extent: float = 4.0) -> np.ndarray:
    """Cell-centred sample offsets ``(n*n, 2)`` as (forward, left), row-major by forward index."""
    c = (np.arange(n) + 0.5) * (extent / n) - extent / 2
    fwd, left = np.meshgrid(c, c, indexing="ij")
    return np.stack([fwd.ravel(), left.ravel()], axis=-1)


def heightmap_sample(bank: TerrainBank, tid, p, theta, z_body, n: int = 32,
                     extent: float = 4.0) -> np.ndarray:
    """Terrain height minus body height on an ``n x n`` grid in the body yaw frame."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    z_body = np.atleast_1d(np.asarray(z_body, dtype=np.float64))
    tid = np.broadcast_to(np.atleast_1d(tid), theta.shape)
    off = heightmap_offsets(n, extent)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    wx = p[:, 0:1] + off[None, :, 0] * c - off[None, :, 1] * s
    wy = p[:, 1:2] + off[None, :, 0] * s + off[None, :, 1] * c
    h = bank.height(tid[:, None], np.stack([wx, wy], axis=-1))
    return h - z_body[:, None]
