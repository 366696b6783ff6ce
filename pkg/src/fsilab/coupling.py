"""Partitioned coupling updates on the latent grid.

One coupled step mirrors a classical partitioned FSI solve: update the
solid embedding from the whole system (cross-attention), move the grid
with a learned velocity field plus neighborhood smoothing, update the
fluid embedding on the moved grid, then align all three domains through
self-attention on the interface.  The four substeps run in a configurable
order; each consumes the freshest available version of its inputs.

All attention here is the linear form Q~ (K~^T V) / D with Q~ softmaxed
along features per row and K~ softmaxed along the sequence per column,
which equals the dense (Q~ K~^T) V / D by associativity at linear cost.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import LatentGrid
from .tensor import DimensionError, Tensor, concat, ffn, linear, softmax

STEP_SOLID, STEP_GRID, STEP_FLUID, STEP_INTERFACE = "solid", "grid", "fluid", "interface"
DEFAULT_ORDERING = (STEP_SOLID, STEP_GRID, STEP_FLUID, STEP_INTERFACE)

# update orders with a classical partitioned reading, exercised by the tests
STANDARD_ORDERINGS = (
    (STEP_FLUID, STEP_GRID, STEP_SOLID, STEP_INTERFACE),
    (STEP_GRID, STEP_SOLID, STEP_FLUID, STEP_INTERFACE),
    (STEP_GRID, STEP_SOLID, STEP_INTERFACE, STEP_FLUID),
    (STEP_GRID, STEP_INTERFACE, STEP_SOLID, STEP_FLUID),
    (STEP_SOLID, STEP_FLUID, STEP_INTERFACE, STEP_GRID),
    DEFAULT_ORDERING,
)


@dataclass
class CouplingState:
    """Grid coordinates plus the three domain embeddings, all [M, D]."""

    coords: Tensor
    solid: Tensor
    fluid: Tensor
    interface: Tensor

    def __post_init__(self):
        shape = self.coords.shape
        for t in (self.solid, self.fluid, self.interface):
            if t.shape != shape:
                raise DimensionError("coupling state tensors must share [M, D]")


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor


@dataclass
class GridUpdateParams:
    w_msg: Tensor  # [3D, D]
    b_msg: Tensor


@dataclass
class CouplerParams:
    solid: AttentionParams
    grid: GridUpdateParams
    fluid: AttentionParams
    interface: AttentionParams
    dt: float = 1.0


@dataclass
class SingleAttentionParams:
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Q~ (K~^T V) / D without materializing the L_q x L_kv weight matrix.

    D is the query/key feature width; V's width is free (basis probing of
    the implicit weight matrix feeds single-column values)."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"query/key widths differ: {q.shape[1]} vs {k.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise DimensionError("K and V must share their sequence length")
    d = q.shape[1]
    q_tilde = softmax(q, axis=1)
    k_tilde = softmax(k, axis=0)
    return (q_tilde @ (k_tilde.T @ v)) * (1.0 / d)


def _chunk_rows(t: Tensor, blocks: int) -> list[Tensor]:
    rows = t.shape[0]
    m = rows // blocks
    return [t[i * m:(i + 1) * m] for i in range(blocks)]


def update_solid(state: CouplingState, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Cross-attention update of the solid embedding.

    The query stacks the position-tagged solid and interface blocks; keys
    and values see the whole system.  The 2M-row output is chunked back
    into (solid', interface')."""
    g = state.coords
    q_in = concat([state.solid + g, state.interface + g], axis=0)
    kv_in = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
    q = linear(q_in, p.wq, p.bq)
    k = linear(kv_in, p.wk, p.bk)
    v = linear(kv_in, p.wv, p.bv)
    out = linear_attention(q, k, v)
    new_solid, new_interface = _chunk_rows(out, 2)
    return new_solid, new_interface


def update_fluid(state: CouplingState, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Cross-attention update of the fluid embedding; output chunks into
    (fluid', interface')."""
    g = state.coords
    q_in = concat([state.fluid + g, state.interface + g], axis=0)
    kv_in = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
    q = linear(q_in, p.wq, p.bq)
    k = linear(kv_in, p.wk, p.bk)
    v = linear(kv_in, p.wv, p.bv)
    out = linear_attention(q, k, v)
    new_fluid, new_interface = _chunk_rows(out, 2)
    return new_fluid, new_interface


def update_interface(state: CouplingState, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Self-attention over all three domains; output chunks into
    (solid', fluid', interface')."""
    g = state.coords
    x = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
    q = linear(x, p.wq, p.bq)
    k = linear(x, p.wk, p.bk)
    v = linear(x, p.wv, p.bv)
    out = linear_attention(q, k, v)
    new_solid, new_fluid, new_interface = _chunk_rows(out, 3)
    return new_solid, new_fluid, new_interface


def update_grid(state: CouplingState, grid: LatentGrid, p: GridUpdateParams,
                dt: float = 1.0) -> Tensor:
    """Velocity-based smoothing of the grid coordinates.

    Per-node messages come from a linear map of the concatenated domain
    embeddings; node velocities are convex combinations of neighbor
    messages (softmaxed gamma logits), coordinates advance by dt * v, and
    a second convex neighborhood average (softmaxed beta logits) smooths
    the moved geometry."""
    edges = grid.edges
    msg_in = concat([state.solid, state.fluid, state.interface], axis=1)  # [M, 3D]
    messages = linear(msg_in, p.w_msg, p.b_msg)  # [M, D]

    gamma = softmax(grid.gamma_logits, axis=1)  # [M, k]
    velocity = gamma[:, 0:1] * messages.take_rows(edges[:, 0])
    for j in range(1, edges.shape[1]):
        velocity = velocity + gamma[:, j:j + 1] * messages.take_rows(edges[:, j])

    moved = state.coords + dt * velocity

    beta = softmax(grid.beta_logits, axis=1)
    smoothed = beta[:, 0:1] * moved.take_rows(edges[:, 0])
    for j in range(1, edges.shape[1]):
        smoothed = smoothed + beta[:, j:j + 1] * moved.take_rows(edges[:, j])
    return smoothed


def validate_ordering(ordering) -> tuple:
    ordering = tuple(ordering)
    if sorted(ordering) != sorted(DEFAULT_ORDERING):
        raise ValueError(
            f"ordering must be a permutation of {DEFAULT_ORDERING}, got {ordering}"
        )
    return ordering


def _apply_step(current: CouplingState, grid: LatentGrid, params: CouplerParams,
                step: str) -> CouplingState:
    if step == STEP_SOLID:
        new_solid, new_interface = update_solid(current, params.solid)
        return replace(current, solid=new_solid, interface=new_interface)
    if step == STEP_GRID:
        new_coords = update_grid(current, grid.with_coords(current.coords),
                                 params.grid, params.dt)
        return replace(current, coords=new_coords)
    if step == STEP_FLUID:
        new_fluid, new_interface = update_fluid(current, params.fluid)
        return replace(current, fluid=new_fluid, interface=new_interface)
    new_solid, new_fluid, new_interface = update_interface(current, params.interface)
    return replace(current, solid=new_solid, fluid=new_fluid, interface=new_interface)


def coupled_step(state: CouplingState, grid: LatentGrid, ordering,
                 params: CouplerParams) -> CouplingState:
    """Run the four substeps in the configured order, threading updates.

    A step scheduled before its producers simply reads the freshest
    available embeddings (the un-updated ones where nothing ran yet)."""
    ordering = validate_ordering(ordering)
    current = state
    for step in ordering:
        current = _apply_step(current, grid, params, step)
    return current


def substep_input_state(state: CouplingState, grid: LatentGrid, ordering,
                        params: CouplerParams, step: str) -> CouplingState:
    """Replay a coupled step up to (but excluding) `step` and return the
    state that substep would consume.  Diagnostic path for attention dumps."""
    ordering = validate_ordering(ordering)
    if step not in ordering:
        raise ValueError(f"unknown substep {step!r}")
    current = state
    for s in ordering:
        if s == step:
            return current
        current = _apply_step(current, grid, params, s)
    raise AssertionError("unreachable")


def single_attention_step(state: CouplingState,
                          params: SingleAttentionParams) -> CouplingState:
    """Ablation processor: one linear attention over all four blocks
    (grid coordinates included as a fourth block) followed by an FFN,
    chunked back into the four state components."""
    x = concat([state.solid, state.fluid, state.interface, state.coords], axis=0)
    q = linear(x, params.attn.wq, params.attn.bq)
    k = linear(x, params.attn.wk, params.attn.bk)
    v = linear(x, params.attn.wv, params.attn.bv)
    out = ffn(linear_attention(q, k, v), params.w1, params.b1, params.w2, params.b2)
    new_solid, new_fluid, new_interface, new_coords = _chunk_rows(out, 4)
    return CouplingState(coords=new_coords, solid=new_solid, fluid=new_fluid,
                         interface=new_interface)


def matched_single_attention_hidden(width: int, n_nodes: int, k: int) -> int:
    """Hidden width that matches the single-attention processor's parameter
    count to the four-substep processor's at the same feature width.

    Four-substep count: 9(D^2+D) q/k/v maps + (3D^2+D) message map + 2Mk
    smoothing logits.  Single-attention count: 3(D^2+D) q/k/v maps +
    (2Dh + h + D) FFN.  Solving for h matches them exactly up to rounding."""
    num = 9 * width * width + 6 * width + 2 * n_nodes * k
    return max(1, round(num / (2 * width + 1)))


def coupler_param_count(width: int, n_nodes: int, k: int) -> int:
    """Trainable scalars in one four-substep coupler at feature width D."""
    attn = 3 * (width * width + width)
    msg = 3 * width * width + width
    logits = 2 * n_nodes * k
    return 3 * attn + msg + logits


def single_attention_param_count(width: int, hidden: int) -> int:
    attn = 3 * (width * width + width)
    ffn_count = width * hidden + hidden + hidden * width + width
    return attn + ffn_count


def attention_logits(state: CouplingState, params: CouplerParams, step: str) -> np.ndarray:
    """Materialize the dense Q~ K~^T matrix for one attention substep.

    Evaluation-only diagnostic; the compute path never forms this product.
    Row/column blocks follow the substep's concatenation order."""
    g = state.coords
    if step == STEP_SOLID:
        p = params.solid
        q_in = concat([state.solid + g, state.interface + g], axis=0)
        kv_in = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
    elif step == STEP_FLUID:
        p = params.fluid
        q_in = concat([state.fluid + g, state.interface + g], axis=0)
        kv_in = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
    elif step == STEP_INTERFACE:
        p = params.interface
        q_in = concat([state.solid + g, state.fluid + g, state.interface + g], axis=0)
        kv_in = q_in
    else:
        raise ValueError(f"no attention logits for step {step!r}")
    q = linear(q_in, p.wq, p.bq)
    k = linear(kv_in, p.wk, p.bk)
    q_tilde = softmax(q, axis=1)
    k_tilde = softmax(k, axis=0)
    return (q_tilde.data @ k_tilde.data.T)
