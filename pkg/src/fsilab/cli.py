"""Command-line entry points: dataset generation, splitting, training,
evaluation, rollout, gradient checking, and attention dumps."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import Manifest, build_manifest, write_conditions_sidecar, write_trajectory
from .geometry import DomainObservation, SystemState, normalize_state
from .model import (
    ModelConfig,
    build_parameters,
    compute_loss,
    model_config_from_mapping,
    model_forward,
    parse_flat_config,
)
from .piston import PISTON_CHANNELS, PistonParams, sample_piston_params, simulate_piston
from .potential import PotentialFlowParams, potential_channels, potential_flow_trajectory
from .tensor import ParameterStore, grad_check
from .training import (
    TrainConfig,
    dump_attention,
    evaluate_split,
    predictions_to_trajectory,
    rollout,
    save_report,
    train_config_from_mapping,
    train_loop,
)

CONFIG_SIDECAR_SUFFIX = ".config"


def load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    mapping = parse_flat_config(Path(path).read_text())
    model_cfg, leftovers = model_config_from_mapping(mapping)
    train_cfg = train_config_from_mapping(leftovers)
    return model_cfg, train_cfg


def _save_config_sidecar(config_path, ckpt_path) -> None:
    sidecar = Path(str(ckpt_path) + CONFIG_SIDECAR_SUFFIX)
    sidecar.write_text(Path(config_path).read_text())


def _load_checkpoint(ckpt_path) -> tuple[ModelConfig, TrainConfig, ParameterStore]:
    sidecar = Path(str(ckpt_path) + CONFIG_SIDECAR_SUFFIX)
    if not sidecar.exists():
        raise FileNotFoundError(
            f"missing config sidecar {sidecar}; train writes it next to the checkpoint"
        )
    model_cfg, train_cfg = load_configs(sidecar)
    return model_cfg, train_cfg, ParameterStore.load(ckpt_path)


def cmd_gen_piston(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    records = {}
    n_ood = int(round(args.trajectories * args.ood_fraction))
    overrides = {}
    if args.steps:
        overrides["steps"] = args.steps
    if args.dt:
        overrides["dt"] = args.dt
    for i in range(args.trajectories):
        ood = i >= args.trajectories - n_ood
        params = sample_piston_params(rng, ood=ood, **overrides)
        traj = simulate_piston(params, seed=int(rng.integers(2 ** 31)))
        tid = f"piston{i:04d}"
        traj.traj_id = tid
        write_trajectory(traj, out / f"{tid}.fsl")
        records[tid] = {"conditions": params.to_conditions(), "ood": ood}
    write_conditions_sidecar(out, records, channels=PISTON_CHANNELS,
                             frame_dt=overrides.get("dt", PistonParams.dt))
    print(f"wrote {args.trajectories} piston trajectories ({n_ood} ood) to {out}")
    return 0


def cmd_gen_potential(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    records = {}
    for i in range(args.samples):
        params = PotentialFlowParams(
            inflow_speed=float(rng.uniform(0.5, 3.0)),
            response_gain=float(rng.uniform(0.05, 0.2)),
            dim=args.dim,
        )
        traj = potential_flow_trajectory(params, seed=int(rng.integers(2 ** 31)))
        tid = f"potential{i:04d}"
        traj.traj_id = tid
        write_trajectory(traj, out / f"{tid}.fsl")
        records[tid] = {"conditions": params.to_conditions(), "ood": False}
    write_conditions_sidecar(out, records, channels=potential_channels(args.dim),
                             frame_dt=1.0)
    print(f"wrote {args.samples} potential-flow samples to {out}")
    return 0


def cmd_split(args) -> int:
    ratios = tuple(int(x) for x in args.ratios.split(":"))
    if len(ratios) != 3:
        raise SystemExit("ratios must look like 8:1:1")
    manifest = build_manifest(args.dir, ratios=ratios, seed=args.seed)
    path = manifest.save(args.dir)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"manifest {path} with splits {sizes}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_configs(args.config)
    manifest = Manifest.load(args.data)
    result = train_loop(model_cfg, train_cfg, manifest, args.data, args.out)
    _save_config_sidecar(args.config, args.out)
    print(f"trained {result.steps} steps; final loss {result.final_train_loss:.4e}; "
          f"best val {result.best_val_metric:.4e}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model_cfg, _, store = _load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.data)
    report = evaluate_split(model_cfg, store, manifest, args.data, args.split)
    out = args.out or f"eval-{args.split}.json"
    save_report(report, out)
    print(json.dumps(report["per_domain_mean"], indent=1))
    print(f"mean relative L2: {report['mean']:.6f} (report: {out})")
    return 0


def cmd_rollout(args) -> int:
    model_cfg, _, store = _load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.data)
    traj = manifest.load_trajectory(args.data, args.traj)
    predictions, report = rollout(model_cfg, store, manifest, traj, args.steps)
    out = args.out or f"rollout-{args.traj}.json"
    save_report(report, out)
    if args.save_trajectory and predictions:
        pred_traj = predictions_to_trajectory(predictions, f"{args.traj}-pred",
                                              traj.conditions)
        write_trajectory(pred_traj, args.save_trajectory)
    print(f"rollout {report['steps_completed']}/{args.steps} steps; "
          f"rmse-all: {json.dumps(report['rmse_all'], indent=1)}")
    return 0


def _synthetic_state(model_cfg: ModelConfig, rng, n_fluid=12, n_solid=6,
                     n_interface=4) -> SystemState:
    def obs(n, c):
        return DomainObservation(rng.standard_normal((n, model_cfg.d)),
                                 rng.standard_normal((n, c)))

    conditions = {k: float(rng.standard_normal()) for k in model_cfg.condition_keys}
    return SystemState(obs(n_fluid, model_cfg.c_fluid),
                       obs(n_solid, model_cfg.c_solid),
                       obs(n_interface, model_cfg.c_interface), conditions)


def cmd_gradcheck(args) -> int:
    model_cfg, _ = load_configs(args.config)
    model_cfg.dtype = "f64"
    rng = np.random.default_rng(args.seed)
    state = _synthetic_state(model_cfg, rng)
    target = _synthetic_state(model_cfg, rng)
    store = build_parameters(model_cfg, seed=args.seed)

    def fwd(s):
        return compute_loss(model_forward(state, model_cfg, s), target, model_cfg.task)

    report = grad_check(fwd, store, tol=args.tol, step=args.step, order=args.order)
    for name in sorted(report.errors, key=report.errors.get, reverse=True)[:10]:
        print(f"{report.errors[name]:.3e}  {name}")
    print(f"worst {report.worst:.3e} over {len(report.errors)} parameters "
          f"({'PASS' if report.passed else 'FAIL'} at tol {args.tol:g})")
    return 0 if report.passed else 1


def cmd_dump_attn(args) -> int:
    model_cfg, _, store = _load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.data)
    split = args.split
    tid = args.traj or manifest.split_ids(split)[0]
    traj = manifest.load_trajectory(args.data, tid)
    state = normalize_state(traj.frames[args.frame], manifest.stats)
    out = args.out or f"attn-l{args.level}-h{args.pathway}-{args.step}.csv"
    dense = dump_attention(model_cfg, store, state, args.level, args.pathway,
                           args.step, path=out)
    print(f"wrote {dense.shape[0]}x{dense.shape[1]} logit matrix to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsilab",
        description="two-way FSI surrogate lab: data generation, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate datasets").add_subparsers(
        dest="generator", required=True)
    gp = gen.add_parser("piston", help="1D gas-piston FSI trajectories")
    gp.add_argument("--out", required=True)
    gp.add_argument("--trajectories", type=int, default=16)
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--steps", type=int, default=0)
    gp.add_argument("--dt", type=float, default=0.0)
    gp.add_argument("--ood-fraction", type=float, default=0.0)
    gp.set_defaults(func=cmd_gen_piston)
    gq = gen.add_parser("potential", help="steady-state potential-flow samples")
    gq.add_argument("--out", required=True)
    gq.add_argument("--samples", type=int, default=16)
    gq.add_argument("--seed", type=int, default=0)
    gq.add_argument("--dim", type=int, choices=(2, 3), default=2)
    gq.set_defaults(func=cmd_gen_potential)

    sp = sub.add_parser("split", help="build the dataset manifest")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--ratios", default="8:1:1")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_split)

    tr = sub.add_parser("train", help="train a surrogate")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", choices=("train", "val", "test", "ood"), default="test")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    ro = sub.add_parser("rollout", help="autoregressive rollout on one trajectory")
    ro.add_argument("--data", required=True)
    ro.add_argument("--ckpt", required=True)
    ro.add_argument("--steps", type=int, required=True)
    ro.add_argument("--traj", required=True)
    ro.add_argument("--out")
    ro.add_argument("--save-trajectory")
    ro.set_defaults(func=cmd_rollout)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--config", required=True)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--step", type=float, default=2e-4)
    gc.add_argument("--order", type=int, choices=(2, 4), default=4)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    da = sub.add_parser("dump-attn", help="dense attention-logit dump")
    da.add_argument("--ckpt", required=True)
    da.add_argument("--data", required=True)
    da.add_argument("--level", type=int, required=True)
    da.add_argument("--pathway", type=int, required=True)
    da.add_argument("--step", choices=("solid", "fluid", "interface"), required=True)
    da.add_argument("--split", default="test")
    da.add_argument("--traj")
    da.add_argument("--frame", type=int, default=0)
    da.add_argument("--out")
    da.set_defaults(func=cmd_dump_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
