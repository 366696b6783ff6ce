"""End-to-end surrogate: embedding, multi-pathway latent grids, stacked
encode -> coupled update -> decode levels, cross-scale aggregation, and
per-domain output heads.

The model maps one standardized system state to the standardized next
state (positions and quantities predicted directly, not as deltas).
Conditioning scalars for the steady-state task are broadcast-appended to
every point's features before embedding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import coupling
from .coupling import (
    DEFAULT_ORDERING,
    AttentionParams,
    CouplerParams,
    CouplingState,
    GridUpdateParams,
    SingleAttentionParams,
    coupled_step,
    matched_single_attention_hidden,
    single_attention_step,
    validate_ordering,
)
from .geometry import (
    DOMAINS,
    DomainObservation,
    LatentGrid,
    RegularGrid,
    SystemState,
    init_latent_grid,
    seed_regular_grid,
)
from .projection import decode_domain, encode_domain, fuse_pathways
from .tensor import (
    DimensionError,
    NonFiniteError,
    ParameterStore,
    Tensor,
    linear,
    no_grad,
)

TASKS = ("single_step", "rollout", "steady_state")
PROCESSORS = ("partitioned", "single_attention")


@dataclass
class ModelConfig:
    d: int
    pathways: int
    levels: int
    grid_shapes: list
    channels: list
    c_fluid: int
    c_solid: int
    k: int = 6
    ordering: tuple = DEFAULT_ORDERING
    task: str = "single_step"
    stride: int = 1
    noise_variance: float = 0.0
    processor: str = "partitioned"
    condition_keys: list = field(default_factory=list)
    ffn_hidden_factor: float = 2.0
    dtype: str = "f32"

    def __post_init__(self):
        if self.pathways < 1 or self.levels < 1:
            raise ValueError("pathways and levels must be at least 1")
        if len(self.grid_shapes) != self.pathways or len(self.channels) != self.pathways:
            raise ValueError("grid_shapes and channels must list one entry per pathway")
        if any(len(shape) != self.d for shape in self.grid_shapes):
            raise ValueError("each grid shape must have d axis counts")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.processor not in PROCESSORS:
            raise ValueError(f"processor must be one of {PROCESSORS}")
        self.ordering = validate_ordering(self.ordering)
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        for shape in self.grid_shapes:
            nodes = int(np.prod(shape))
            if self.k >= nodes:
                raise ValueError(
                    f"k={self.k} needs more grid nodes than shape {shape} provides"
                )

    @property
    def c_interface(self) -> int:
        return self.c_fluid + self.c_solid

    def domain_channels(self, dom: str) -> int:
        return {"fluid": self.c_fluid, "solid": self.c_solid,
                "interface": self.c_interface}[dom]

    @property
    def total_width(self) -> int:
        return sum(self.channels)

    @property
    def np_dtype(self):
        return {"f32": np.float32, "f64": np.float64}[self.dtype]

    def grid_nodes(self, h: int) -> int:
        return int(np.prod(self.grid_shapes[h]))

    def to_dict(self) -> dict:
        return {
            "d": self.d, "pathways": self.pathways, "levels": self.levels,
            "grid_shapes": self.grid_shapes, "channels": self.channels,
            "c_fluid": self.c_fluid, "c_solid": self.c_solid, "k": self.k,
            "ordering": "-".join(self.ordering), "task": self.task,
            "stride": self.stride, "noise_variance": self.noise_variance,
            "processor": self.processor, "condition_keys": self.condition_keys,
            "ffn_hidden_factor": self.ffn_hidden_factor, "dtype": self.dtype,
        }


def default_2d_config(c_fluid: int, c_solid: int, **overrides) -> ModelConfig:
    """Default configuration for 2D time-stepping tasks."""
    base = dict(d=2, pathways=2, levels=2, grid_shapes=[[16, 16], [8, 8]],
                channels=[64, 64], c_fluid=c_fluid, c_solid=c_solid, stride=4)
    base.update(overrides)
    return ModelConfig(**base)


def default_3d_config(c_fluid: int, c_solid: int, **overrides) -> ModelConfig:
    """Default configuration for the 3D steady-state task."""
    base = dict(d=3, pathways=2, levels=3, grid_shapes=[[5, 5, 5], [4, 4, 4]],
                channels=[96, 128], c_fluid=c_fluid, c_solid=c_solid,
                task="steady_state")
    base.update(overrides)
    return ModelConfig(**base)


# -- flat key-value config files -------------------------------------------------

MODEL_KEYS = ("d", "pathways", "levels", "grid_shapes", "channels", "c_fluid",
              "c_solid", "k", "ordering", "task", "stride", "noise_variance",
              "processor", "condition_keys", "ffn_hidden_factor", "dtype")


def parse_flat_config(text: str) -> dict:
    """Parse `key = value` lines; values are JSON with a bare-string
    fallback.  Blank lines and #-comments are ignored."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in out:
            raise ValueError(f"line {ln}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def model_config_from_mapping(mapping: dict) -> tuple[ModelConfig, dict]:
    """Build a ModelConfig from a flat mapping; returns (config, leftovers).

    Leftover keys belong to the training configuration; anything neither
    recognizes is a hard error there.
    """
    kwargs = {}
    leftovers = {}
    for key, value in mapping.items():
        if key in MODEL_KEYS:
            kwargs[key] = value
        else:
            leftovers[key] = value
    if "ordering" in kwargs and isinstance(kwargs["ordering"], str):
        kwargs["ordering"] = tuple(kwargs["ordering"].split("-"))
    return ModelConfig(**kwargs), leftovers


# -- parameter construction ----------------------------------------------------------


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_parameters(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Deterministically initialize every trainable array for `config`.

    Linear maps draw uniform +-sqrt(1/fan_in); smoothing logits start at
    zero (uniform neighborhood weights); the offset kernel starts as a
    plain normalized RBF (weight 1, inert bias 0 kept frozen).
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore(config.np_dtype)

    def add_linear(name, fan_in, fan_out):
        store.add(f"{name}.w", _uniform(rng, fan_in, (fan_in, fan_out)))
        store.add(f"{name}.b", _uniform(rng, fan_in, (fan_out,)))

    n_cond = len(config.condition_keys) if config.task == "steady_state" else 0

    for h in range(config.pathways):
        width = config.channels[h]
        store.add(f"path{h}.kernel_w", np.array(1.0))
        # constant logit shifts cancel inside softmax: keep frozen
        store.add(f"path{h}.kernel_b", np.array(0.0), trainable=False)
        add_linear(f"path{h}.grid_proj", config.d, width)
        for dom in DOMAINS:
            in_width = config.d + config.domain_channels(dom) + n_cond
            add_linear(f"path{h}.embed.{dom}", in_width, width)

    for l in range(config.levels):
        for h in range(config.pathways):
            width = config.channels[h]
            nodes = config.grid_nodes(h)
            for dom in DOMAINS:
                add_linear(f"lvl{l}.path{h}.enc.{dom}.q", width, width)
                add_linear(f"lvl{l}.path{h}.enc.{dom}.k", width, width)
            base = f"lvl{l}.path{h}.proc"
            if config.processor == "partitioned":
                for step in ("solid", "fluid", "interface"):
                    for nm in ("q", "k", "v"):
                        add_linear(f"{base}.{step}.{nm}", width, width)
                add_linear(f"{base}.grid.msg", 3 * width, width)
                store.add(f"{base}.grid.gamma", np.zeros((nodes, config.k)))
                store.add(f"{base}.grid.beta", np.zeros((nodes, config.k)))
            else:
                for nm in ("q", "k", "v"):
                    add_linear(f"{base}.attn.{nm}", width, width)
                hidden = matched_single_attention_hidden(width, nodes, config.k)
                add_linear(f"{base}.ffn.l1", width, hidden)
                add_linear(f"{base}.ffn.l2", hidden, width)
        total = config.total_width
        hidden = max(1, round(config.ffn_hidden_factor * total))
        for dom in DOMAINS:
            add_linear(f"lvl{l}.agg.{dom}.l1", total, hidden)
            add_linear(f"lvl{l}.agg.{dom}.l2", hidden, total)

    for dom in DOMAINS:
        out_width = config.d + config.domain_channels(dom)
        add_linear(f"head.{dom}", config.total_width, out_width)

    return store


def _coupler_params(store: ParameterStore, base: str) -> CouplerParams:
    def attn(step):
        return AttentionParams(store[f"{base}.{step}.q.w"], store[f"{base}.{step}.q.b"],
                               store[f"{base}.{step}.k.w"], store[f"{base}.{step}.k.b"],
                               store[f"{base}.{step}.v.w"], store[f"{base}.{step}.v.b"])

    return CouplerParams(attn("solid"),
                         GridUpdateParams(store[f"{base}.grid.msg.w"],
                                          store[f"{base}.grid.msg.b"]),
                         attn("fluid"), attn("interface"))


def _single_attention_params(store: ParameterStore, base: str) -> SingleAttentionParams:
    attn = AttentionParams(store[f"{base}.attn.q.w"], store[f"{base}.attn.q.b"],
                           store[f"{base}.attn.k.w"], store[f"{base}.attn.k.b"],
                           store[f"{base}.attn.v.w"], store[f"{base}.attn.v.b"])
    return SingleAttentionParams(attn, store[f"{base}.ffn.l1.w"], store[f"{base}.ffn.l1.b"],
                                 store[f"{base}.ffn.l2.w"], store[f"{base}.ffn.l2.b"])


# -- forward pass -----------------------------------------------------------------------


@dataclass
class ForwardOutputs:
    """Raw per-domain head outputs [N, d + C], still graph-connected."""

    fluid: Tensor
    solid: Tensor
    interface: Tensor

    def domain(self, name: str) -> Tensor:
        return getattr(self, name)


@dataclass
class Prediction:
    """Predicted observations (standardized space), detached from the graph."""

    fluid: DomainObservation
    solid: DomainObservation
    interface: DomainObservation
    time: float = 0.0

    def domain(self, name: str) -> DomainObservation:
        return getattr(self, name)


def outputs_to_prediction(outputs: ForwardOutputs, d: int, time: float = 0.0) -> Prediction:
    obs = {}
    for dom in DOMAINS:
        arr = outputs.domain(dom).data
        obs[dom] = DomainObservation(arr[:, :d].copy(), arr[:, d:].copy())
    return Prediction(obs["fluid"], obs["solid"], obs["interface"], time)


def _domain_input(state: SystemState, dom: str, cond: np.ndarray | None,
                  dtype) -> np.ndarray:
    o = state.domain(dom)
    parts = [o.positions, o.quantities]
    if cond is not None and cond.size:
        parts.append(np.tile(cond, (o.n_points, 1)))
    return np.concatenate(parts, axis=1).astype(dtype)


class StepTrace:
    """Optional forward-pass recorder for attention diagnostics."""

    def __init__(self):
        self.entries = {}  # (level, pathway) -> (CouplingState, LatentGrid, params)

    def record(self, level, pathway, state, grid, params):
        self.entries[(level, pathway)] = (state, grid, params)


def model_forward(state: SystemState, config: ModelConfig, store: ParameterStore,
                  trace: StepTrace | None = None) -> ForwardOutputs:
    """One surrogate evaluation on a standardized input state."""
    for dom in DOMAINS:
        obs = state.domain(dom)
        if obs.n_points == 0:
            raise ValueError(f"{dom} domain has no points")
        if obs.dim != config.d:
            raise DimensionError(f"{dom} positions are {obs.dim}-dimensional, config wants {config.d}")
        if obs.n_channels != config.domain_channels(dom):
            raise DimensionError(
                f"{dom} has {obs.n_channels} channels, config declares "
                f"{config.domain_channels(dom)}"
            )

    cond = None
    if config.task == "steady_state" and config.condition_keys:
        try:
            cond = np.array([state.conditions[k] for k in config.condition_keys],
                            dtype=np.float64)
        except KeyError as exc:
            raise KeyError(f"state is missing condition {exc}") from exc

    dtype = store.dtype

    grids: list[LatentGrid] = []
    feats: list[dict[str, Tensor]] = []
    for h in range(config.pathways):
        ref = seed_regular_grid(config.grid_shapes[h])
        lg = init_latent_grid(
            ref,
            state.fluid.positions, state.solid.positions, state.interface.positions,
            store[f"path{h}.kernel_w"], store[f"path{h}.kernel_b"],
            store[f"path{h}.grid_proj.w"], store[f"path{h}.grid_proj.b"],
            config.k,
            gamma_logits=None, beta_logits=None,
        )
        grids.append(lg)
        feats.append({
            dom: linear(Tensor(_domain_input(state, dom, cond, dtype)),
                        store[f"path{h}.embed.{dom}.w"], store[f"path{h}.embed.{dom}.b"])
            for dom in DOMAINS
        })

    fused: dict[str, Tensor] = {}
    for l in range(config.levels):
        decoded = {dom: [] for dom in DOMAINS}
        for h in range(config.pathways):
            weights = {}
            projected = {}
            for dom in DOMAINS:
                w, p = encode_domain(
                    feats[h][dom], grids[h].coords,
                    store[f"lvl{l}.path{h}.enc.{dom}.q.w"], store[f"lvl{l}.path{h}.enc.{dom}.q.b"],
                    store[f"lvl{l}.path{h}.enc.{dom}.k.w"], store[f"lvl{l}.path{h}.enc.{dom}.k.b"],
                )
                weights[dom], projected[dom] = w, p
            cstate = CouplingState(coords=grids[h].coords, solid=projected["solid"],
                                   fluid=projected["fluid"], interface=projected["interface"])
            base = f"lvl{l}.path{h}.proc"
            if config.processor == "partitioned":
                grid_view = grids[h].with_logits(store[f"{base}.grid.gamma"],
                                                 store[f"{base}.grid.beta"])
                params = _coupler_params(store, base)
                if trace is not None:
                    trace.record(l, h, cstate, grid_view, params)
                out_state = coupled_step(cstate, grid_view, config.ordering, params)
            else:
                params = _single_attention_params(store, base)
                if trace is not None:
                    trace.record(l, h, cstate, grids[h], params)
                out_state = single_attention_step(cstate, params)
            grids[h] = grids[h].with_coords(out_state.coords)
            for dom in DOMAINS:
                decoded[dom].append(decode_domain(getattr(out_state, dom), weights[dom]))
        for dom in DOMAINS:
            w1 = store[f"lvl{l}.agg.{dom}.l1.w"]
            b1 = store[f"lvl{l}.agg.{dom}.l1.b"]
            w2 = store[f"lvl{l}.agg.{dom}.l2.w"]
            b2 = store[f"lvl{l}.agg.{dom}.l2.b"]
            block = fuse_pathways(decoded[dom], w1, b1, w2, b2)
            if l < config.levels - 1:
                offset = 0
                for h, width in enumerate(config.channels):
                    feats[h][dom] = block[:, offset:offset + width]
                    offset += width
            else:
                fused[dom] = block

    outputs = {}
    for dom in DOMAINS:
        outputs[dom] = linear(fused[dom], store[f"head.{dom}.w"], store[f"head.{dom}.b"])
        if not np.all(np.isfinite(outputs[dom].data)):
            raise NonFiniteError(f"non-finite prediction for {dom}")
    return ForwardOutputs(fluid=outputs["fluid"], solid=outputs["solid"],
                          interface=outputs["interface"])


# -- loss --------------------------------------------------------------------------------

NORM_FLOOR = 1e-12


def compute_loss(outputs: ForwardOutputs, target: SystemState, task: str) -> Tensor:
    """Mean over domains of the per-domain error in standardized space.

    Time-stepping and steady-state tasks use the relative L2 of the stacked
    positions+quantities block; rollout training uses per-point RMSE.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    total = None
    for dom in DOMAINS:
        obs = target.domain(dom)
        tgt = np.concatenate([obs.positions, obs.quantities], axis=1)
        pred = outputs.domain(dom)
        if pred.shape != tgt.shape:
            raise DimensionError(
                f"{dom} prediction shape {pred.shape} != target {tgt.shape}"
            )
        diff = pred - Tensor(tgt.astype(pred.dtype))
        sq = (diff * diff).sum()
        if task == "rollout":
            term = (sq * (1.0 / tgt.shape[0])).sqrt()
        else:
            denom = max(float(np.linalg.norm(tgt)), NORM_FLOOR)
            term = sq.sqrt() * (1.0 / denom)
        total = term if total is None else total + term
    return total * (1.0 / len(DOMAINS))


# -- training-time input transforms ----------------------------------------------------


def inject_noise(state: SystemState, variance: float, rng) -> SystemState:
    """Add iid zero-mean Gaussian noise to every standardized input channel.

    `rng` is a numpy Generator or an integer seed; reproducible either way.
    Rollout-training inputs only; evaluation paths never call this.
    """
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if variance == 0:
        return state.copy()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    std = float(np.sqrt(variance))
    out = state.copy()
    for dom in DOMAINS:
        obs = out.domain(dom)
        obs.positions += rng.normal(0.0, std, size=obs.positions.shape)
        obs.quantities += rng.normal(0.0, std, size=obs.quantities.shape)
    return out


def apply_boundary_mask(pred: Prediction, inputs: SystemState,
                        masks: dict[str, np.ndarray]) -> Prediction:
    """Zero the predicted displacement of flagged points: their predicted
    positions are overwritten, bit-exactly, with the input positions."""
    new = {}
    for dom in DOMAINS:
        p = pred.domain(dom)
        mask = masks.get(dom)
        if mask is None:
            new[dom] = p.copy()
            continue
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != p.n_points:
            raise DimensionError(
                f"{dom} mask length {mask.shape[0]} != point count {p.n_points}"
            )
        positions = p.positions.copy()
        positions[mask] = inputs.domain(dom).positions[mask]
        new[dom] = DomainObservation(positions, p.quantities.copy())
    return Prediction(new["fluid"], new["solid"], new["interface"], pred.time)


def prediction_to_state(pred: Prediction, conditions: dict, time: float) -> SystemState:
    """Wrap a prediction as the next autoregressive input."""
    return SystemState(pred.fluid.copy(), pred.solid.copy(), pred.interface.copy(),
                       dict(conditions), time)
