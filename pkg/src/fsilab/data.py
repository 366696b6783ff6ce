"""Trajectory persistence, dataset manifests, splits, and normalization.

Trajectories are stored one file each in a fixed binary layout (f32 bulk,
bit-exact round trip); the dataset manifest is human-inspectable JSON that
carries channel metadata, split assignment, per-trajectory conditions, and
the standardization statistics computed from the training split only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    DOMAINS,
    ChannelStats,
    DomainObservation,
    DomainStats,
    NormStats,
    SystemState,
)

TRAJECTORY_MAGIC = b"FSL1"
TRAJECTORY_VERSION = 1
TRAJECTORY_SUFFIX = ".fsl"
MANIFEST_NAME = "manifest.json"
CONDITIONS_NAME = "conditions.json"


class FormatError(ValueError):
    """Raised on malformed trajectory files or manifests."""


@dataclass
class Trajectory:
    """Ordered frames with fixed per-domain shapes; the dataset unit."""

    traj_id: str
    frames: list
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise FormatError("trajectory needs at least one frame")
        first = self.shapes
        for i, frame in enumerate(self.frames):
            got = _frame_shapes(frame)
            if got != first:
                raise FormatError(f"frame {i} shapes {got} != frame 0 shapes {first}")

    @property
    def shapes(self) -> dict:
        return _frame_shapes(self.frames[0])

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _frame_shapes(state: SystemState) -> dict:
    return {
        "d": state.fluid.dim,
        "n_fluid": state.fluid.n_points,
        "n_solid": state.solid.n_points,
        "n_interface": state.interface.n_points,
        "c_fluid": state.fluid.n_channels,
        "c_solid": state.solid.n_channels,
        "c_interface": state.interface.n_channels,
    }


def write_trajectory(traj: Trajectory, path) -> None:
    """Binary layout: magic "FSL1"; little-endian u32 fields version, d, T,
    N_f, N_s, N_b, C_f, C_s, C_b; then T frames of f32 row-major arrays in
    the order fluid positions, fluid quantities, solid positions, solid
    quantities, interface positions, interface quantities."""
    s = traj.shapes
    header = struct.pack(
        "<9I", TRAJECTORY_VERSION, s["d"], traj.n_frames,
        s["n_fluid"], s["n_solid"], s["n_interface"],
        s["c_fluid"], s["c_solid"], s["c_interface"],
    )
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(header)
        for frame in traj.frames:
            for dom in DOMAINS:
                obs = frame.domain(dom)
                fh.write(np.ascontiguousarray(obs.positions, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(obs.quantities, dtype="<f4").tobytes())


def read_trajectory(path, traj_id: str | None = None,
                    conditions: dict | None = None,
                    frame_dt: float = 1.0) -> Trajectory:
    """Inverse of write_trajectory; validates magic, version, channel
    accounting, and exact payload length.  Arrays come back as the stored
    f32 values promoted to f64 compute precision; frame times are
    i * frame_dt."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TRAJECTORY_MAGIC:
        raise FormatError(f"bad trajectory magic {raw[:4]!r} in {path}")
    if len(raw) < 4 + 36:
        raise FormatError(f"truncated trajectory header in {path}")
    version, d, t, n_f, n_s, n_b, c_f, c_s, c_b = struct.unpack("<9I", raw[4:40])
    if version != TRAJECTORY_VERSION:
        raise FormatError(f"unsupported trajectory version {version}")
    if c_b != c_f + c_s:
        raise FormatError(
            f"channel accounting violated: c_interface={c_b} != {c_f}+{c_s}"
        )
    frame_floats = (n_f * (d + c_f) + n_s * (d + c_s) + n_b * (d + c_b))
    expected = 40 + 4 * frame_floats * t
    if len(raw) != expected:
        raise FormatError(
            f"trajectory payload is {len(raw)} bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=40)
    frames = []
    cursor = 0

    def take(n, width):
        nonlocal cursor
        block = flat[cursor:cursor + n * width].reshape(n, width)
        cursor += n * width
        return block.astype(np.float64)

    for i in range(t):
        obs = {}
        for dom, n, c in (("fluid", n_f, c_f), ("solid", n_s, c_s),
                          ("interface", n_b, c_b)):
            positions = take(n, d)
            quantities = take(n, c)
            obs[dom] = DomainObservation(positions, quantities)
        frames.append(SystemState(obs["fluid"], obs["solid"], obs["interface"],
                                  dict(conditions or {}), time=i * frame_dt))
    return Trajectory(traj_id or path.stem, frames, dict(conditions or {}))


# -- manifest ------------------------------------------------------------------


@dataclass
class TrajectoryEntry:
    traj_id: str
    file: str
    frames: int
    shapes: dict
    conditions: dict
    ood: bool = False


@dataclass
class Manifest:
    version: int
    d: int
    channels: dict  # domain -> {"names": [...], "units": [...]}
    trajectories: list
    splits: dict  # split name -> [traj ids]
    stats: NormStats | None = None
    frame_dt: float = 1.0

    def entry(self, traj_id: str) -> TrajectoryEntry:
        for e in self.trajectories:
            if e.traj_id == traj_id:
                return e
        raise KeyError(f"unknown trajectory {traj_id!r}")

    def split_ids(self, split: str) -> list:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "d": self.d,
            "frame_dt": self.frame_dt,
            "channels": self.channels,
            "trajectories": [
                {"id": e.traj_id, "file": e.file, "frames": e.frames,
                 "shapes": e.shapes, "conditions": e.conditions, "ood": e.ood}
                for e in self.trajectories
            ],
            "splits": self.splits,
            "stats": self.stats.to_dict() if self.stats else None,
        }

    def save(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, directory) -> "Manifest":
        path = Path(directory) / MANIFEST_NAME
        if not path.exists():
            raise FormatError(f"no {MANIFEST_NAME} in {directory}")
        d = json.loads(path.read_text())
        return cls(
            version=d["version"],
            d=d["d"],
            channels=d["channels"],
            trajectories=[TrajectoryEntry(e["id"], e["file"], e["frames"],
                                          e["shapes"], e["conditions"], e["ood"])
                          for e in d["trajectories"]],
            splits=d["splits"],
            stats=NormStats.from_dict(d["stats"]) if d.get("stats") else None,
            frame_dt=d.get("frame_dt", 1.0),
        )

    def load_trajectory(self, directory, traj_id: str) -> Trajectory:
        e = self.entry(traj_id)
        return read_trajectory(Path(directory) / e.file, traj_id=e.traj_id,
                               conditions=e.conditions, frame_dt=self.frame_dt)


def default_channel_info(shapes: dict) -> dict:
    def names(c):
        return [f"q{i}" for i in range(c)]

    info = {
        "fluid": {"names": names(shapes["c_fluid"])},
        "solid": {"names": names(shapes["c_solid"])},
        "interface": {"names": names(shapes["c_interface"])},
    }
    for dom in info:
        info[dom]["units"] = ["1"] * len(info[dom]["names"])
    return info


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    total = sum(ratios)
    counts = [n * r // total for r in ratios]
    counts[0] += n - sum(counts)  # leftovers go to train
    return tuple(counts)


def build_manifest(directory, ratios=(8, 1, 1), seed: int = 0,
                   channel_info: dict | None = None,
                   frame_dt: float = 1.0) -> Manifest:
    """Scan a directory of trajectory files into a manifest.

    Non-OOD trajectories are shuffled deterministically by seed and split
    train/val/test by the given ratios; trajectories flagged OOD in the
    conditions sidecar go exclusively to the ood split.  Standardization
    statistics come from the train split alone.
    """
    directory = Path(directory)
    files = sorted(directory.glob(f"*{TRAJECTORY_SUFFIX}"))
    if not files:
        raise FormatError(f"no trajectory files in {directory}")
    side = {}
    side_path = directory / CONDITIONS_NAME
    if side_path.exists():
        side = json.loads(side_path.read_text())
    records = side.get("trajectories", side)  # legacy flat form allowed
    if channel_info is None:
        channel_info = side.get("channels")
    if "frame_dt" in side and frame_dt == 1.0:
        frame_dt = side["frame_dt"]

    entries = []
    for f in files:
        meta = records.get(f.stem, {})
        traj = read_trajectory(f, conditions=meta.get("conditions", {}),
                               frame_dt=frame_dt)
        entries.append(TrajectoryEntry(
            traj_id=f.stem, file=f.name, frames=traj.n_frames,
            shapes=traj.shapes, conditions=meta.get("conditions", {}),
            ood=bool(meta.get("ood", False)),
        ))

    pool = [e.traj_id for e in entries if not e.ood]
    rng = np.random.default_rng(seed)
    order = [pool[i] for i in rng.permutation(len(pool))]
    n_train, n_val, n_test = split_counts(len(order), ratios)
    splits = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:n_train + n_val + n_test],
        "ood": [e.traj_id for e in entries if e.ood],
    }

    shapes = entries[0].shapes
    manifest = Manifest(
        version=1,
        d=shapes["d"],
        channels=channel_info or default_channel_info(shapes),
        trajectories=entries,
        splits=splits,
        stats=None,
        frame_dt=frame_dt,
    )
    manifest.stats = compute_norm_stats(manifest, directory)
    return manifest


def compute_norm_stats(manifest: Manifest, directory) -> NormStats:
    """Per-domain per-channel mean/std over every frame of every training
    trajectory (population statistics, floored std)."""
    train = manifest.split_ids("train")
    if not train:
        raise FormatError("training split is empty")

    def update(slot, arr):
        if slot["sum"] is None:
            slot["sum"] = arr.sum(axis=0)
            slot["sumsq"] = (arr * arr).sum(axis=0)
            slot["n"] = arr.shape[0]
        else:
            slot["sum"] += arr.sum(axis=0)
            slot["sumsq"] += (arr * arr).sum(axis=0)
            slot["n"] += arr.shape[0]

    slots = {dom: {"pos": {"sum": None}, "q": {"sum": None}} for dom in DOMAINS}
    for traj_id in train:
        traj = manifest.load_trajectory(directory, traj_id)
        for frame in traj.frames:
            for dom in DOMAINS:
                obs = frame.domain(dom)
                update(slots[dom]["pos"], obs.positions)
                update(slots[dom]["q"], obs.quantities)

    def finalize(slot):
        mean = slot["sum"] / slot["n"]
        var = np.maximum(slot["sumsq"] / slot["n"] - mean * mean, 0.0)
        return ChannelStats(mean, np.sqrt(var))

    per_domain = {}
    for dom in DOMAINS:
        per_domain[dom] = DomainStats(finalize(slots[dom]["pos"]),
                                      finalize(slots[dom]["q"]))
    return NormStats(per_domain["fluid"], per_domain["solid"], per_domain["interface"])


def write_conditions_sidecar(directory, records: dict,
                             channels: dict | None = None,
                             frame_dt: float | None = None) -> None:
    """records: traj_id -> {"conditions": {...}, "ood": bool}.  Generators
    may also stash the channel metadata and frame interval for the manifest
    builder to pick up."""
    payload: dict = {"trajectories": records}
    if channels is not None:
        payload["channels"] = channels
    if frame_dt is not None:
        payload["frame_dt"] = frame_dt
    path = Path(directory) / CONDITIONS_NAME
    path.write_text(json.dumps(payload, indent=1))
