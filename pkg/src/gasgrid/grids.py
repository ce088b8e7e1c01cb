"""Spatial grids, time blocks, and the per-pipe/per-block model assignment."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .models import ModelLevel
from .network import Network


@dataclass(frozen=True)
class PipeGrid:
    """Uniform grid on one pipe: n_cells cells, n_cells + 1 points."""

    length: float
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("need at least one cell")

    @property
    def dx(self) -> float:
        return self.length / self.n_cells

    @property
    def n_points(self) -> int:
        return self.n_cells + 1

    def positions(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_points)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Block boundaries T_0 = 0 < T_1 < ... < T_K = T; adaptation decisions are per block."""

    boundaries: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return np.array_equal(self.boundaries, other.boundaries)

    __hash__ = object.__hash__

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least one block")
        if np.any(np.diff(b) <= 0):
            raise ValueError("block boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def uniform(cls, horizon: float, n_blocks: int, t0: float = 0.0) -> "TimeGrid":
        return cls(np.linspace(t0, t0 + horizon, n_blocks + 1))

    @property
    def n_blocks(self) -> int:
        return self.boundaries.size - 1

    @property
    def horizon(self) -> float:
        return float(self.boundaries[-1] - self.boundaries[0])

    def block_span(self, k: int) -> tuple[float, float]:
        return (float(self.boundaries[k]), float(self.boundaries[k + 1]))

    def block_length(self, k: int) -> float:
        return float(self.boundaries[k + 1] - self.boundaries[k])


def fit_dt(block_length: float, dt: float) -> float:
    """Largest dt <= requested that divides the block into an integer step count."""
    n = max(1, round(block_length / dt))
    if block_length / n > dt * (1 + 1e-12):
        n += 1
    return block_length / n


@dataclass(frozen=True)
class PipeSetting:
    """Model level and spatial resolution of one pipe within one time block.

    ``n_cells`` is retained even at level M1 (which has no interior grid) so a
    later upgrade to M2 starts from a sensible resolution.
    """

    level: ModelLevel
    n_cells: int

    def upgraded_level(self) -> "PipeSetting":
        return replace(self, level=ModelLevel(min(self.level + 1, ModelLevel.M3)))

    def downgraded_level(self) -> "PipeSetting":
        return replace(self, level=ModelLevel(max(self.level - 1, ModelLevel.M1)))

    def refined_dx(self) -> "PipeSetting":
        return replace(self, n_cells=self.n_cells * 2)

    def coarsened_dx(self) -> "PipeSetting":
        return replace(self, n_cells=max(1, self.n_cells // 2))


@dataclass(frozen=True)
class BlockAssignment:
    settings: dict[str, PipeSetting]  # pipe arc id -> setting
    dt: float  # shared time step within the block

    def layout_key(self) -> tuple:
        return tuple(sorted((aid, s.level.value, s.n_cells) for aid, s in self.settings.items()))


@dataclass(frozen=True)
class ModelAssignment:
    """Per-pipe, per-block model/discretization choice; dt is global per block."""

    time_grid: TimeGrid
    blocks: tuple[BlockAssignment, ...]

    def __post_init__(self):
        if len(self.blocks) != self.time_grid.n_blocks:
            raise ValueError("one BlockAssignment per time block required")
        fitted = []
        for k, blk in enumerate(self.blocks):
            dt = fit_dt(self.time_grid.block_length(k), blk.dt)
            fitted.append(BlockAssignment(dict(blk.settings), dt))
        object.__setattr__(self, "blocks", tuple(fitted))

    @classmethod
    def uniform(
        cls,
        network: Network,
        time_grid: TimeGrid,
        level: ModelLevel = ModelLevel.M2,
        dt: float = 600.0,
        dx_target: float = 5000.0,
    ) -> "ModelAssignment":
        settings = {}
        for arc in network.pipes():
            n = max(1, round(arc.variant.params.L / dx_target))
            settings[arc.id] = PipeSetting(level=level, n_cells=n)
        blocks = tuple(BlockAssignment(dict(settings), dt) for _ in range(time_grid.n_blocks))
        return cls(time_grid, blocks)

    def with_block(self, k: int, block: BlockAssignment) -> "ModelAssignment":
        blocks = list(self.blocks)
        blocks[k] = block
        return ModelAssignment(self.time_grid, tuple(blocks))

    def flattened(self) -> "ModelAssignment":
        """Time-uniform layout: per pipe the finest level/grid over all blocks.

        dt stays per block.  Used to freeze one discretization for gradient
        computations, where a block-wise changing state layout would force
        adjoint transport through projections.
        """
        settings: dict[str, PipeSetting] = {}
        for blk in self.blocks:
            for aid, s in blk.settings.items():
                cur = settings.get(aid)
                if cur is None:
                    settings[aid] = s
                else:
                    settings[aid] = PipeSetting(
                        level=max(cur.level, s.level), n_cells=max(cur.n_cells, s.n_cells)
                    )
        blocks = tuple(BlockAssignment(dict(settings), blk.dt) for blk in self.blocks)
        return ModelAssignment(self.time_grid, blocks)

    def model_usage(self) -> dict[ModelLevel, float]:
        """Fraction of pipe-time spent at each level, weighted by block length."""
        total = 0.0
        usage = {lvl: 0.0 for lvl in ModelLevel}
        for k, blk in enumerate(self.blocks):
            w = self.time_grid.block_length(k)
            for s in blk.settings.values():
                usage[s.level] += w
                total += w
        if total > 0.0:
            usage = {lvl: v / total for lvl, v in usage.items()}
        return usage
