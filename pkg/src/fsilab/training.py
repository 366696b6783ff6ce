"""Training loop, optimizer, evaluation drivers, rollout, and diagnostics.

Batching accumulates gradients over individual samples (meshes vary in
size, so there is no padding); one optimizer update per batch.  Validation
tracks the mean per-domain relative L2 and the best-scoring checkpoint is
retained.  Everything is seeded and single-threaded for bitwise
reproducibility.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coupling import STEP_FLUID, STEP_INTERFACE, STEP_SOLID, attention_logits, substep_input_state
from .data import Manifest, Trajectory, write_trajectory
from .geometry import DOMAINS, NormStats, SystemState, denormalize_with_stats, normalize_state
from .metrics import relative_l2, rmse_metric
from .model import (
    ModelConfig,
    Prediction,
    StepTrace,
    apply_boundary_mask,
    build_parameters,
    compute_loss,
    inject_noise,
    model_forward,
    outputs_to_prediction,
    prediction_to_state,
)
from .tensor import NonFiniteError, ParameterStore, no_grad

TRAIN_KEYS = ("epochs", "lr", "batch", "seed", "checkpoint_every", "max_steps",
              "val_every")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; message carries the offending batch ids."""


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch: int = 50
    seed: int = 0
    checkpoint_every: int = 0  # periodic epoch saves; 0 keeps best-val only
    max_steps: int = 0  # optimizer-step budget; 0 means unlimited
    val_every: int = 0  # validate every N steps; 0 means once per epoch

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch >= 1, lr > 0")


def train_config_from_mapping(mapping: dict) -> TrainConfig:
    unknown = set(mapping) - set(TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    return TrainConfig(**mapping)


class AdamOptimizer:
    """Adaptive-moment update with bias correction; resets gradients after
    each step and refuses non-finite gradients."""

    def __init__(self, store: ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()
                   if store.trainable(name)}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()
                   if store.trainable(name)}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, m in self._m.items():
            tensor = self.store[name]
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name}")
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            tensor.data -= update.astype(tensor.data.dtype, copy=False)
        self.store.zero_grad()


# -- samples -------------------------------------------------------------------


@dataclass
class SamplePair:
    traj_id: str
    frame: int
    inp: SystemState  # standardized
    target: SystemState  # standardized


class SplitData:
    """Normalized frame pairs for one split, loaded once."""

    def __init__(self, manifest: Manifest, directory, split: str, stride: int):
        self.split = split
        self.stride = stride
        self.stats = manifest.stats
        self.trajectories: dict[str, list[SystemState]] = {}
        self.pairs: list[tuple[str, int]] = []
        for tid in manifest.split_ids(split):
            traj = manifest.load_trajectory(directory, tid)
            frames = [normalize_state(f, manifest.stats) for f in traj.frames]
            self.trajectories[tid] = frames
            for i in range(len(frames) - stride):
                self.pairs.append((tid, i))
        if not self.pairs:
            raise ValueError(f"split {split!r} yields no sample pairs")

    def pair(self, tid: str, i: int) -> SamplePair:
        frames = self.trajectories[tid]
        return SamplePair(tid, i, frames[i], frames[i + self.stride])

    def __len__(self) -> int:
        return len(self.pairs)


def _batches_for_epoch(data: SplitData, cfg: TrainConfig, task: str,
                       rng: np.random.Generator):
    """Yield lists of (traj_id, frame) per optimizer step.

    Time-stepping and steady tasks shuffle all pairs globally; rollout
    training draws one trajectory per step and uses up to `batch` of its
    frame pairs (batch size counts time steps within the sample)."""
    if task == "rollout":
        tids = sorted(data.trajectories)
        n_steps = max(1, len(data.pairs) // max(cfg.batch, 1))
        for _ in range(n_steps):
            tid = tids[rng.integers(len(tids))]
            n_pairs = len(data.trajectories[tid]) - data.stride
            take = min(cfg.batch, n_pairs)
            idx = rng.choice(n_pairs, size=take, replace=False)
            yield [(tid, int(i)) for i in idx]
    else:
        order = rng.permutation(len(data.pairs))
        for start in range(0, len(order), cfg.batch):
            chunk = order[start:start + cfg.batch]
            yield [data.pairs[i] for i in chunk]


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    final_train_loss: float
    best_val_metric: float
    loss_trace: list = field(default_factory=list)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: Manifest,
               directory, out_path, log_path=None) -> TrainResult:
    """Train from scratch; keeps the best-validation checkpoint at out_path."""
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".log.csv")
    store = build_parameters(model_cfg, seed=train_cfg.seed)
    optimizer = AdamOptimizer(store, lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    noise_rng = np.random.default_rng(train_cfg.seed + 1)

    train_data = SplitData(manifest, directory, "train", model_cfg.stride)
    try:
        val_data = SplitData(manifest, directory, "val", model_cfg.stride)
    except (KeyError, ValueError):
        val_data = None

    store.save(out_path)  # epochs=0 leaves the initialization checkpoint
    best_val = float("inf")
    steps = 0
    final_loss = float("nan")
    trace: list[float] = []

    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["step", "train_loss", "val_metric"])
        for epoch in range(train_cfg.epochs):
            for batch in _batches_for_epoch(train_data, train_cfg, model_cfg.task, rng):
                if train_cfg.max_steps and steps >= train_cfg.max_steps:
                    break
                store.zero_grad()
                batch_loss = 0.0
                scale = 1.0 / len(batch)
                for tid, i in batch:
                    pair = train_data.pair(tid, i)
                    inp = pair.inp
                    if model_cfg.task == "rollout" and model_cfg.noise_variance > 0:
                        inp = inject_noise(inp, model_cfg.noise_variance, noise_rng)
                    outputs = model_forward(inp, model_cfg, store)
                    loss = compute_loss(outputs, pair.target, model_cfg.task)
                    value = loss.item()
                    if not np.isfinite(value):
                        store.save(out_path.with_suffix(".diverged"))
                        raise TrainingDiverged(
                            f"non-finite loss at step {steps} on batch "
                            f"{[(t, j) for t, j in batch]}"
                        )
                    batch_loss += value * scale
                    (loss * scale).backward()
                optimizer.step()
                steps += 1
                final_loss = batch_loss
                trace.append(batch_loss)

                if val_data and train_cfg.val_every and steps % train_cfg.val_every == 0:
                    best_val = _validate(model_cfg, store, val_data, out_path,
                                         best_val, log, steps, batch_loss)
                else:
                    log.writerow([steps, f"{batch_loss:.10e}", ""])
            if val_data and not train_cfg.val_every:
                best_val = _validate(model_cfg, store, val_data, out_path,
                                     best_val, log, steps, final_loss)
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                store.save(out_path.with_name(out_path.stem + f".epoch{epoch + 1}" + out_path.suffix))
            if train_cfg.max_steps and steps >= train_cfg.max_steps:
                break
        if not val_data or not np.isfinite(best_val):
            store.save(out_path)

    return TrainResult(out_path, log_path, steps, final_loss, best_val, trace)


def _validate(model_cfg, store, val_data, out_path, best_val, log, steps, train_loss):
    metric = mean_relative_l2(model_cfg, store, val_data)
    log.writerow([steps, f"{train_loss:.10e}", f"{metric:.10e}"])
    if metric < best_val:
        store.save(out_path)
        return metric
    return best_val


def mean_relative_l2(model_cfg: ModelConfig, store: ParameterStore,
                     data: SplitData) -> float:
    """Validation metric: per-domain relative L2 on denormalized predictions,
    averaged over domains and samples."""
    stats = data.stats
    totals = []
    with no_grad():
        for tid, i in data.pairs:
            pair = data.pair(tid, i)
            outputs = model_forward(pair.inp, model_cfg, store)
            pred = outputs_to_prediction(outputs, model_cfg.d)
            per_domain = []
            for dom in DOMAINS:
                dn_pred = denormalize_with_stats(pred.domain(dom), stats.domain(dom))
                dn_tgt = denormalize_with_stats(pair.target.domain(dom), stats.domain(dom))
                u = np.concatenate([dn_tgt.positions, dn_tgt.quantities], axis=1)
                u_hat = np.concatenate([dn_pred.positions, dn_pred.quantities], axis=1)
                per_domain.append(relative_l2(u, u_hat))
            totals.append(np.mean(per_domain))
    return float(np.mean(totals))


# -- evaluation ------------------------------------------------------------------


def evaluate_split(model_cfg: ModelConfig, store: ParameterStore,
                   manifest: Manifest, directory, split: str) -> dict:
    """Per-(domain, quantity) relative L2 in original units, averaged over
    all sample pairs of the split; geometry counts as a quantity."""
    data = SplitData(manifest, directory, split, model_cfg.stride)
    stats = manifest.stats
    sums: dict[tuple, float] = {}
    zero_norm_fallbacks: list = []
    count = 0
    with no_grad():
        for tid, i in data.pairs:
            pair = data.pair(tid, i)
            outputs = model_forward(pair.inp, model_cfg, store)
            pred = outputs_to_prediction(outputs, model_cfg.d)
            for dom in DOMAINS:
                dn_pred = denormalize_with_stats(pred.domain(dom), stats.domain(dom))
                dn_tgt = denormalize_with_stats(pair.target.domain(dom), stats.domain(dom))
                names = ["geometry"] + list(manifest.channels[dom]["names"])
                blocks_t = [dn_tgt.positions] + [dn_tgt.quantities[:, j:j + 1]
                                                 for j in range(dn_tgt.quantities.shape[1])]
                blocks_p = [dn_pred.positions] + [dn_pred.quantities[:, j:j + 1]
                                                  for j in range(dn_pred.quantities.shape[1])]
                for name, bt, bp in zip(names, blocks_t, blocks_p):
                    key = (dom, name)
                    sums[key] = sums.get(key, 0.0) + relative_l2(bt, bp)
                    if np.linalg.norm(bt) == 0 and key not in zero_norm_fallbacks:
                        zero_norm_fallbacks.append(key)
            count += 1

    domains: dict[str, dict] = {dom: {} for dom in DOMAINS}
    for (dom, name), total in sums.items():
        domains[dom][name] = total / count
    per_domain_mean = {dom: float(np.mean(list(vals.values())))
                       for dom, vals in domains.items()}
    return {
        "split": split,
        "samples": count,
        "metric": "relative_l2",
        "domains": domains,
        "per_domain_mean": per_domain_mean,
        "mean": float(np.mean(list(per_domain_mean.values()))),
        "absolute_fallback": [list(k) for k in zero_norm_fallbacks],
    }


# -- autoregressive rollout ----------------------------------------------------------


def rollout(model_cfg: ModelConfig, store: ParameterStore, manifest: Manifest,
            traj: Trajectory, steps: int,
            masks: dict[str, np.ndarray] | None = None) -> tuple[list, dict]:
    """Feed predictions back as inputs for `steps` steps from frame 0.

    Returns denormalized per-step predictions plus a report with per-step
    RMSE curves and their rollout averages per (domain, quantity), in
    original units.  A non-finite state truncates the rollout; the report
    records the failure step."""
    if traj.n_frames < steps + 1:
        raise ValueError(f"trajectory has {traj.n_frames} frames, need {steps + 1}")
    stats = manifest.stats
    masks = masks or {}
    current = normalize_state(traj.frames[0], stats)
    predictions: list[Prediction] = []
    curves: dict[tuple, list] = {}
    failure_step = None

    with no_grad():
        for step_index in range(1, steps + 1):
            try:
                outputs = model_forward(current, model_cfg, store)
            except NonFiniteError:
                failure_step = step_index
                break
            pred = outputs_to_prediction(outputs, model_cfg.d,
                                         time=traj.frames[step_index].time)
            pred = apply_boundary_mask(pred, current, masks)
            if any(not np.all(np.isfinite(pred.domain(d).quantities)) or
                   not np.all(np.isfinite(pred.domain(d).positions)) for d in DOMAINS):
                failure_step = step_index
                break

            truth = traj.frames[step_index]
            dn = {}
            for dom in DOMAINS:
                obs = denormalize_with_stats(pred.domain(dom), stats.domain(dom))
                if dom in masks:
                    m = np.asarray(masks[dom], dtype=bool)
                    obs.positions[m] = traj.frames[0].domain(dom).positions[m]
                dn[dom] = obs
                names = ["geometry"] + list(manifest.channels[dom]["names"])
                blocks_t = [truth.domain(dom).positions] + [
                    truth.domain(dom).quantities[:, j:j + 1]
                    for j in range(truth.domain(dom).n_channels)]
                blocks_p = [obs.positions] + [obs.quantities[:, j:j + 1]
                                              for j in range(obs.quantities.shape[1])]
                for name, bt, bp in zip(names, blocks_t, blocks_p):
                    curves.setdefault((dom, name), []).append(rmse_metric(bt, bp))
            predictions.append(Prediction(dn["fluid"], dn["solid"], dn["interface"],
                                          time=truth.time))
            current = prediction_to_state(pred, current.conditions,
                                          traj.frames[step_index].time)

    report = {
        "trajectory": traj.traj_id,
        "steps_requested": steps,
        "steps_completed": len(predictions),
        "failure_step": failure_step,
        "metric": "rmse",
        "curves": {f"{dom}/{name}": vals for (dom, name), vals in curves.items()},
        "rmse_all": {f"{dom}/{name}": float(np.mean(vals))
                     for (dom, name), vals in curves.items()},
    }
    return predictions, report


def predictions_to_trajectory(predictions: list, traj_id: str,
                              conditions: dict) -> Trajectory:
    frames = [SystemState(p.fluid, p.solid, p.interface, dict(conditions), p.time)
              for p in predictions]
    return Trajectory(traj_id, frames, dict(conditions))


# -- attention diagnostics --------------------------------------------------------------


def dump_attention(model_cfg: ModelConfig, store: ParameterStore,
                   state_norm: SystemState, level: int, pathway: int,
                   step: str, path=None) -> np.ndarray:
    """Materialize the dense attention-logit matrix for one substep of one
    coupled update, optionally writing an annotated CSV.

    Evaluation-only: the training/inference path never forms this product."""
    if model_cfg.processor != "partitioned":
        raise ValueError("attention dumps require the partitioned processor")
    if not 0 <= level < model_cfg.levels:
        raise IndexError(f"level {level} outside [0, {model_cfg.levels})")
    if not 0 <= pathway < model_cfg.pathways:
        raise IndexError(f"pathway {pathway} outside [0, {model_cfg.pathways})")
    if step not in (STEP_SOLID, STEP_FLUID, STEP_INTERFACE):
        raise ValueError(f"step must be solid|fluid|interface, got {step!r}")

    trace = StepTrace()
    with no_grad():
        model_forward(state_norm, model_cfg, store, trace=trace)
        cstate, grid, params = trace.entries[(level, pathway)]
        entry_state = substep_input_state(cstate, grid, model_cfg.ordering,
                                          params, step)
        dense = attention_logits(entry_state, params, step)

    m = grid.n_nodes
    if step == STEP_SOLID:
        row_blocks = [("solid", m), ("interface", m)]
    elif step == STEP_FLUID:
        row_blocks = [("fluid", m), ("interface", m)]
    else:
        row_blocks = [("solid", m), ("fluid", m), ("interface", m)]
    col_blocks = [("solid", m), ("fluid", m), ("interface", m)]

    if path is not None:
        def annotate(blocks):
            spans, start = [], 0
            for name, size in blocks:
                spans.append(f"{name}[{start}:{start + size})")
                start += size
            return " ".join(spans)

        with open(path, "w", newline="") as fh:
            fh.write(f"# attention logits Q~K~^T, level={level} pathway={pathway} step={step}\n")
            fh.write(f"# rows: {annotate(row_blocks)}\n")
            fh.write(f"# cols: {annotate(col_blocks)}\n")
            writer = csv.writer(fh)
            for row in dense:
                writer.writerow([f"{v:.8e}" for v in row])
    return dense


def save_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1))
