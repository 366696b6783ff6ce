import json

import numpy as np
import pytest

from fsilab.data import (
    FormatError,
    Manifest,
    Trajectory,
    build_manifest,
    compute_norm_stats,
    read_trajectory,
    split_counts,
    write_conditions_sidecar,
    write_trajectory,
)
from fsilab.geometry import DomainObservation, SystemState, normalize_with_stats


def make_state(rng, n_f=3, n_s=2, n_b=1, d=2, c_f=2, c_s=1, time=0.0):
    arr = lambda *s: rng.standard_normal(s).astype(np.float32).astype(np.float64)
    return SystemState(
        DomainObservation(arr(n_f, d), arr(n_f, c_f)),
        DomainObservation(arr(n_s, d), arr(n_s, c_s)),
        DomainObservation(arr(n_b, d), arr(n_b, c_f + c_s)),
        {}, time,
    )


def make_traj(rng, traj_id="t0", frames=3, **kw):
    return Trajectory(traj_id, [make_state(rng, time=float(i), **kw)
                                for i in range(frames)])


class TestBinaryFormat:
    def test_documented_byte_count(self, tmp_path):
        rng = np.random.default_rng(0)
        traj = make_traj(rng, frames=1, n_f=1, n_s=1, n_b=1, d=1, c_f=1, c_s=1)
        path = tmp_path / "t.fsl"
        write_trajectory(traj, path)
        # magic + 9 u32 header + (1+1+1+1+1+2) f32 payload
        assert path.stat().st_size == 4 + 9 * 4 + 7 * 4 == 68

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        traj = make_traj(rng, frames=4, n_f=5, n_s=3, n_b=2, d=3, c_f=2, c_s=2)
        path = tmp_path / "t.fsl"
        write_trajectory(traj, path)
        back = read_trajectory(path)
        assert back.n_frames == 4
        for a, b in zip(traj.frames, back.frames):
            for dom in ("fluid", "solid", "interface"):
                pa = a.domain(dom).positions.astype(np.float32)
                pb = b.domain(dom).positions.astype(np.float32)
                assert np.array_equal(pa.view(np.int32), pb.view(np.int32))

    def test_special_values_roundtrip(self, tmp_path):
        specials = np.array([[-0.0], [1e-41], [np.float32(np.pi)], [-1e-44]],
                            dtype=np.float32).astype(np.float64)
        state = SystemState(
            DomainObservation(specials, specials),
            DomainObservation(specials[:2], specials[:2]),
            DomainObservation(specials[:1], np.array([[np.float32(-0.0), 1e-41]])),
        )
        traj = Trajectory("s", [state])
        path = tmp_path / "s.fsl"
        write_trajectory(traj, path)
        back = read_trajectory(path)
        got = back.frames[0].fluid.positions.astype(np.float32)
        assert np.array_equal(got.view(np.int32),
                              specials.astype(np.float32).view(np.int32))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.fsl"
        path.write_bytes(b"NOPE" + b"\x00" * 36)
        with pytest.raises(FormatError):
            read_trajectory(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "t.fsl"
        write_trajectory(make_traj(rng), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            read_trajectory(path)

    def test_channel_accounting_enforced_on_read(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "t.fsl"
        write_trajectory(make_traj(rng, frames=1), path)
        raw = bytearray(path.read_bytes())
        # corrupt c_interface (9th u32, offset 4 + 8*4)
        raw[36:40] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_trajectory(path)

    def test_frame_shape_consistency_enforced(self):
        rng = np.random.default_rng(4)
        a = make_state(rng, n_f=3)
        b = make_state(rng, n_f=4)
        with pytest.raises(FormatError):
            Trajectory("bad", [a, b])

    def test_frame_times(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "t.fsl"
        write_trajectory(make_traj(rng, frames=3), path)
        back = read_trajectory(path, frame_dt=0.25)
        assert [f.time for f in back.frames] == [0.0, 0.25, 0.5]


class TestNormStats:
    def _write_dataset(self, tmp_path, rng, n=10, frames=3):
        for i in range(n):
            write_trajectory(make_traj(rng, traj_id=f"t{i}", frames=frames),
                             tmp_path / f"t{i:03d}.fsl")

    def test_constant_channel_floored_std(self, tmp_path):
        state = SystemState(
            DomainObservation(np.full((3, 1), 2.0), np.full((3, 1), 7.0)),
            DomainObservation(np.zeros((2, 1)), np.zeros((2, 1))),
            DomainObservation(np.zeros((1, 1)), np.zeros((1, 2))),
        )
        write_trajectory(Trajectory("c", [state]), tmp_path / "c.fsl")
        manifest = build_manifest(tmp_path, ratios=(1, 0, 0), seed=0)
        stats = manifest.stats
        np.testing.assert_allclose(stats.fluid.quantities.mean, [7.0])
        np.testing.assert_allclose(stats.fluid.quantities.std, [1e-8])

    def test_two_point_symmetric_channel(self, tmp_path):
        def state(v):
            return SystemState(
                DomainObservation(np.array([[0.0]]), np.array([[v]])),
                DomainObservation(np.array([[0.0]]), np.array([[0.0]])),
                DomainObservation(np.array([[0.0]]), np.array([[0.0, 0.0]])),
            )

        write_trajectory(Trajectory("pm", [state(-1.0), state(1.0)]),
                         tmp_path / "pm.fsl")
        manifest = build_manifest(tmp_path, ratios=(1, 0, 0), seed=0)
        np.testing.assert_allclose(manifest.stats.fluid.quantities.mean, [0.0])
        np.testing.assert_allclose(manifest.stats.fluid.quantities.std, [1.0])

    def test_self_normalization(self, tmp_path):
        rng = np.random.default_rng(6)
        self._write_dataset(tmp_path, rng)
        manifest = build_manifest(tmp_path, seed=1)
        stats = manifest.stats
        acc = []
        for tid in manifest.split_ids("train"):
            traj = manifest.load_trajectory(tmp_path, tid)
            for frame in traj.frames:
                acc.append(normalize_with_stats(frame.fluid, stats.fluid).quantities)
        all_q = np.concatenate(acc, axis=0)
        assert np.abs(all_q.mean(axis=0)).max() < 1e-6
        assert np.abs(all_q.std(axis=0) - 1.0).max() < 1e-6

    def test_stats_from_train_only(self, tmp_path):
        rng = np.random.default_rng(7)
        self._write_dataset(tmp_path, rng)
        manifest = build_manifest(tmp_path, seed=2)
        # recompute after deleting val/test files: stats must be identical
        for tid in manifest.split_ids("val") + manifest.split_ids("test"):
            (tmp_path / f"{tid}.fsl").unlink()
        again = compute_norm_stats(manifest, tmp_path)
        np.testing.assert_array_equal(again.fluid.quantities.mean,
                                      manifest.stats.fluid.quantities.mean)
        np.testing.assert_array_equal(again.solid.positions.std,
                                      manifest.stats.solid.positions.std)


class TestManifest:
    def test_exact_811_split(self, tmp_path):
        rng = np.random.default_rng(8)
        for i in range(10):
            write_trajectory(make_traj(rng, frames=2), tmp_path / f"t{i:03d}.fsl")
        manifest = build_manifest(tmp_path, ratios=(8, 1, 1), seed=3)
        assert len(manifest.split_ids("train")) == 8
        assert len(manifest.split_ids("val")) == 1
        assert len(manifest.split_ids("test")) == 1

    def test_split_counts_leftover_to_train(self):
        assert split_counts(10, (8, 1, 1)) == (8, 1, 1)
        assert split_counts(11, (8, 1, 1)) == (9, 1, 1)
        assert split_counts(7, (8, 1, 1)) == (7, 0, 0)

    def test_same_seed_same_split(self, tmp_path):
        rng = np.random.default_rng(9)
        for i in range(12):
            write_trajectory(make_traj(rng, frames=2), tmp_path / f"t{i:03d}.fsl")
        a = build_manifest(tmp_path, seed=4)
        b = build_manifest(tmp_path, seed=4)
        assert a.splits == b.splits
        c = build_manifest(tmp_path, seed=5)
        assert a.splits != c.splits

    def test_ood_never_in_main_splits(self, tmp_path):
        rng = np.random.default_rng(10)
        records = {}
        for i in range(10):
            tid = f"t{i:03d}"
            write_trajectory(make_traj(rng, frames=2, traj_id=tid),
                             tmp_path / f"{tid}.fsl")
            records[tid] = {"conditions": {"x": i}, "ood": i >= 8}
        write_conditions_sidecar(tmp_path, records)
        manifest = build_manifest(tmp_path, seed=6)
        ood = set(manifest.split_ids("ood"))
        assert ood == {"t008", "t009"}
        for split in ("train", "val", "test"):
            assert not ood & set(manifest.split_ids(split))
        assert manifest.entry("t003").conditions == {"x": 3}

    def test_manifest_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(5):
            write_trajectory(make_traj(rng, frames=2), tmp_path / f"t{i:03d}.fsl")
        manifest = build_manifest(tmp_path, seed=7, frame_dt=0.1)
        manifest.save(tmp_path)
        loaded = Manifest.load(tmp_path)
        assert loaded.splits == manifest.splits
        assert loaded.frame_dt == 0.1
        np.testing.assert_array_equal(loaded.stats.fluid.positions.mean,
                                      manifest.stats.fluid.positions.mean)
        traj = loaded.load_trajectory(tmp_path, loaded.split_ids("train")[0])
        assert traj.n_frames == 2

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FormatError):
            build_manifest(tmp_path)

    def test_randomized_roundtrips(self, tmp_path):
        rng = np.random.default_rng(12)
        for i in range(50):
            n_f, n_s, n_b = rng.integers(1, 6, size=3)
            d = int(rng.integers(1, 4))
            c_f, c_s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            frames = int(rng.integers(1, 5))
            traj = make_traj(rng, traj_id=f"r{i}", frames=frames, n_f=int(n_f),
                             n_s=int(n_s), n_b=int(n_b), d=d, c_f=c_f, c_s=c_s)
            path = tmp_path / f"r{i}.fsl"
            write_trajectory(traj, path)
            back = read_trajectory(path)
            for a, b in zip(traj.frames, back.frames):
                for dom in ("fluid", "solid", "interface"):
                    av = a.domain(dom).quantities.astype(np.float32)
                    bv = b.domain(dom).quantities.astype(np.float32)
                    assert np.array_equal(av.view(np.int32), bv.view(np.int32))
