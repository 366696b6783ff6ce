"""Deformable latent grid construction.

Physical inputs are standardized, a regular reference grid is seeded over
[-3.5, 3.5]^d (covers >99.95% of N(0,1)-normalized points), deformed toward
the fluid/solid/interface geometry by distance-weighted offsets, projected
into feature space, and wired up with an exact k-nearest-neighbor edge set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DimensionError, Tensor, linear, softmax

GRID_HALF_EXTENT = 3.5

FLUID, SOLID, INTERFACE = "fluid", "solid", "interface"
DOMAINS = (FLUID, SOLID, INTERFACE)


# -- observation containers ---------------------------------------------------


@dataclass
class DomainObservation:
    """Point positions plus per-point physical quantities for one domain."""

    positions: np.ndarray  # [N, d]
    quantities: np.ndarray  # [N, C]

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.quantities = np.atleast_2d(np.asarray(self.quantities, dtype=np.float64))
        if self.positions.shape[0] != self.quantities.shape[0]:
            raise DimensionError(
                f"positions ({self.positions.shape[0]}) and quantities "
                f"({self.quantities.shape[0]}) disagree on point count"
            )

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_channels(self) -> int:
        return self.quantities.shape[1]

    def copy(self) -> "DomainObservation":
        return DomainObservation(self.positions.copy(), self.quantities.copy())


@dataclass
class SystemState:
    """Fluid, solid, and interface observations at one time, plus metadata."""

    fluid: DomainObservation
    solid: DomainObservation
    interface: DomainObservation
    conditions: dict = field(default_factory=dict)
    time: float = 0.0

    def __post_init__(self):
        cb = self.interface.n_channels
        cf, cs = self.fluid.n_channels, self.solid.n_channels
        if cb != cf + cs:
            raise DimensionError(
                f"interface channels ({cb}) must equal fluid ({cf}) + solid ({cs})"
            )

    def domain(self, name: str) -> DomainObservation:
        return getattr(self, name)

    def copy(self) -> "SystemState":
        return SystemState(self.fluid.copy(), self.solid.copy(), self.interface.copy(),
                           dict(self.conditions), self.time)


# -- normalization --------------------------------------------------------------

STD_FLOOR = 1e-8


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


@dataclass
class DomainStats:
    positions: ChannelStats
    quantities: ChannelStats


@dataclass
class NormStats:
    """Per-domain standardization statistics, computed on the training split."""

    fluid: DomainStats
    solid: DomainStats
    interface: DomainStats

    def domain(self, name: str) -> DomainStats:
        return getattr(self, name)

    def to_dict(self) -> dict:
        out = {}
        for name in DOMAINS:
            ds = self.domain(name)
            out[name] = {
                "positions": {"mean": ds.positions.mean.tolist(), "std": ds.positions.std.tolist()},
                "quantities": {"mean": ds.quantities.mean.tolist(), "std": ds.quantities.std.tolist()},
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        def ds(name):
            e = d[name]
            return DomainStats(
                ChannelStats(np.array(e["positions"]["mean"]), np.array(e["positions"]["std"])),
                ChannelStats(np.array(e["quantities"]["mean"]), np.array(e["quantities"]["std"])),
            )

        return cls(ds(FLUID), ds(SOLID), ds(INTERFACE))


def normalize_with_stats(obs: DomainObservation, stats: DomainStats) -> DomainObservation:
    """Standardize positions and quantities: (x - mean) / std."""
    if obs.quantities.shape[1] != stats.quantities.mean.shape[0]:
        raise DimensionError(
            f"observation has {obs.quantities.shape[1]} channels, "
            f"stats expect {stats.quantities.mean.shape[0]}"
        )
    if obs.positions.shape[1] != stats.positions.mean.shape[0]:
        raise DimensionError("position dimensionality does not match stats")
    return DomainObservation(
        (obs.positions - stats.positions.mean) / stats.positions.std,
        (obs.quantities - stats.quantities.mean) / stats.quantities.std,
    )


def denormalize_with_stats(obs: DomainObservation, stats: DomainStats) -> DomainObservation:
    if obs.quantities.shape[1] != stats.quantities.mean.shape[0]:
        raise DimensionError("channel count mismatch")
    return DomainObservation(
        obs.positions * stats.positions.std + stats.positions.mean,
        obs.quantities * stats.quantities.std + stats.quantities.mean,
    )


def normalize_state(state: SystemState, stats: NormStats) -> SystemState:
    return SystemState(
        normalize_with_stats(state.fluid, stats.fluid),
        normalize_with_stats(state.solid, stats.solid),
        normalize_with_stats(state.interface, stats.interface),
        dict(state.conditions),
        state.time,
    )


def denormalize_state(state: SystemState, stats: NormStats) -> SystemState:
    return SystemState(
        denormalize_with_stats(state.fluid, stats.fluid),
        denormalize_with_stats(state.solid, stats.solid),
        denormalize_with_stats(state.interface, stats.interface),
        dict(state.conditions),
        state.time,
    )


# -- reference grid ----------------------------------------------------------------


@dataclass
class RegularGrid:
    points: np.ndarray  # [M, d]
    axis_counts: tuple

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def seed_regular_grid(axis_counts) -> RegularGrid:
    """Axis-aligned Cartesian grid over [-3.5, 3.5]^d, row-major flattened.

    Each axis holds M_k uniformly spaced samples including both endpoints.
    """
    axis_counts = tuple(int(m) for m in axis_counts)
    if any(m < 2 for m in axis_counts):
        raise ValueError(f"every axis needs at least 2 samples, got {axis_counts}")
    axes = [np.linspace(-GRID_HALF_EXTENT, GRID_HALF_EXTENT, m) for m in axis_counts]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return RegularGrid(points, axis_counts)


# -- geometry-aware offsets -----------------------------------------------------------


def offset_weights(grid_points: np.ndarray, positions: np.ndarray,
                   kernel_w: Tensor, kernel_b: Tensor) -> Tensor:
    """Per-grid-node weights over domain points: softmax of the affine-mapped
    negative squared distance.  Rows sum to 1."""
    positions = np.atleast_2d(positions)
    if positions.shape[0] == 0:
        raise ValueError("domain has no points")
    diff = grid_points[:, None, :] - positions[None, :, :]
    neg_d2 = -(diff * diff).sum(axis=2)  # [M, N], constant w.r.t. parameters
    logits = kernel_w * Tensor(neg_d2) + kernel_b
    return softmax(logits, axis=1)


def domain_offset(grid: RegularGrid, positions: np.ndarray,
                  kernel_w: Tensor, kernel_b: Tensor) -> Tensor:
    """Distance-weighted pull of each grid node toward one domain's points.

    offset_i = sum_j weights_ij * (pos_j - a_i); since rows of the weight
    matrix sum to 1 this reduces to weights @ positions - a.
    """
    w = offset_weights(grid.points, positions, kernel_w, kernel_b)
    return w @ Tensor(np.atleast_2d(positions)) - Tensor(grid.points)


# -- latent grid -------------------------------------------------------------------------


@dataclass
class LatentGrid:
    """Feature-space grid coordinates, kNN edges, and neighborhood logits."""

    coords: Tensor  # [M, D]
    edges: np.ndarray  # [M, k] neighbor indices
    gamma_logits: Tensor | None = None  # [M, k] velocity-smoothing logits
    beta_logits: Tensor | None = None  # [M, k] geometry-smoothing logits

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def k(self) -> int:
        return self.edges.shape[1]

    def with_logits(self, gamma_logits: Tensor, beta_logits: Tensor) -> "LatentGrid":
        return replace(self, gamma_logits=gamma_logits, beta_logits=beta_logits)

    def with_coords(self, coords: Tensor) -> "LatentGrid":
        return replace(self, coords=coords)


def knn_edges(coords: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbors per node (self excluded), ties broken by
    ascending index.  Returns an [M, k] int array ordered by distance."""
    coords = np.asarray(coords)
    m = coords.shape[0]
    if k >= m:
        raise ValueError(f"k={k} must be smaller than the node count {m}")
    if k < 1:
        raise ValueError("k must be at least 1")
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps equal distances in index order
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def init_latent_grid(grid: RegularGrid,
                     fluid_positions: np.ndarray,
                     solid_positions: np.ndarray,
                     interface_positions: np.ndarray,
                     kernel_w: Tensor, kernel_b: Tensor,
                     proj_w: Tensor, proj_b: Tensor,
                     k: int,
                     gamma_logits: Tensor | None = None,
                     beta_logits: Tensor | None = None) -> LatentGrid:
    """Build a fresh latent grid for one input: summed per-domain offsets,
    linear projection into feature space, and kNN edges over the projected
    coordinates.  The smoothing logits persist across inputs; coordinates
    and edges are recomputed per input."""
    for name, pos in ((FLUID, fluid_positions), (SOLID, solid_positions),
                      (INTERFACE, interface_positions)):
        if np.atleast_2d(pos).shape[0] == 0:
            raise ValueError(f"{name} domain has no points")
    total = Tensor(grid.points)
    for pos in (solid_positions, fluid_positions, interface_positions):
        total = total + domain_offset(grid, pos, kernel_w, kernel_b)
    coords = linear(total, proj_w, proj_b)
    edges = knn_edges(coords.data, k)
    return LatentGrid(coords, edges, gamma_logits, beta_logits)
