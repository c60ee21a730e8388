import json

import numpy as np
import pytest
from PIL import Image as PilImage

from exposure_bench.core import BracketFrame, BracketSequence, Image12, Pose
from exposure_bench.dataset_io import (
    MANIFEST_NAME,
    REFERENCE_NAME,
    load_dataset,
    load_image12,
    load_reference_trajectory,
    load_sequence,
    load_trajectory,
    save_image12,
    save_sequence,
    save_trajectory,
    trajectory_from_sequence,
)
from exposure_bench.errors import (
    BadQuaternion,
    CorruptImage,
    IoFailure,
    LadderMismatch,
    MissingManifest,
    NonMonotoneTimestamps,
    ParseError,
    RangeViolation,
)
from exposure_bench.trajectory import Trajectory

LADDER = (1.0, 2.0, 4.0)
IDENTITY_Q = np.array([0.0, 0.0, 0.0, 1.0])


def random_image(rng, shape=(6, 8)):
    return Image12(rng.integers(0, 4096, size=shape).astype(np.uint16))


def make_sequence(rng, frames=3, posed=False, seq_id="seq"):
    out = []
    for k in range(frames):
        pose = Pose(np.array([0.25 * k, 0.0, 0.0]), IDENTITY_Q) if posed else None
        out.append(
            BracketFrame(
                images=tuple(random_image(rng) for _ in LADDER),
                exposures_ms=LADDER,
                timestamp=0.5 * k,
                pose=pose,
            )
        )
    return BracketSequence(tuple(out), id=seq_id)


class TestImageIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = random_image(rng)
        save_image12(img, tmp_path / "a.png")
        assert np.array_equal(load_image12(tmp_path / "a.png").data, img.data)

    def test_sixteen_bit_container(self, tmp_path):
        save_image12(Image12(np.full((2, 2), 4095, np.uint16)), tmp_path / "b.png")
        with PilImage.open(tmp_path / "b.png") as pil:
            assert pil.mode in ("I;16", "I")

    def test_range_violation(self, tmp_path):
        PilImage.fromarray(np.full((2, 2), 5000, np.uint16)).save(
            tmp_path / "hot.png"
        )
        with pytest.raises(RangeViolation):
            load_image12(tmp_path / "hot.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptImage):
            load_image12(tmp_path / "nope.png")

    def test_garbage_file(self, tmp_path):
        (tmp_path / "junk.png").write_text("this is not a png")
        with pytest.raises(CorruptImage):
            load_image12(tmp_path / "junk.png")

    def test_multichannel_rejected(self, tmp_path):
        PilImage.fromarray(
            np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB"
        ).save(tmp_path / "rgb.png")
        with pytest.raises(CorruptImage):
            load_image12(tmp_path / "rgb.png")

    def test_write_failure(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            save_image12(
                Image12(np.zeros((2, 2), np.uint16)), blocker / "sub" / "img.png"
            )


class TestSequenceRoundTrip:
    def test_images_and_metadata_survive(self, tmp_path):
        rng = np.random.default_rng(1)
        seq = make_sequence(rng, frames=3)
        save_sequence(seq, tmp_path / "seq")
        loaded = load_sequence(tmp_path / "seq")
        assert loaded.id == "seq"
        assert loaded.ladder_ms == LADDER
        assert len(loaded) == 3
        for a, b in zip(loaded.frames, seq.frames):
            assert a.timestamp == b.timestamp
            assert a.pose is None
            for ia, ib in zip(a.images, b.images):
                assert np.array_equal(ia.data, ib.data)

    def test_ten_frames_make_sixty_images(self, tmp_path):
        rng = np.random.default_rng(2)
        frames = []
        ladder6 = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
        for k in range(10):
            frames.append(
                BracketFrame(
                    images=tuple(random_image(rng) for _ in ladder6),
                    exposures_ms=ladder6,
                    timestamp=float(k),
                )
            )
        save_sequence(BracketSequence(tuple(frames), id="ten"), tmp_path / "ten")
        assert len(list((tmp_path / "ten" / "images").glob("*.png"))) == 60

    def test_empty_sequence(self, tmp_path):
        save_sequence(BracketSequence((), id="empty"), tmp_path / "empty")
        loaded = load_sequence(tmp_path / "empty")
        assert len(loaded) == 0

    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        seq = make_sequence(rng, frames=2, posed=True)
        save_sequence(seq, tmp_path / "a")
        save_sequence(load_sequence(tmp_path / "a"), tmp_path / "b")
        first = (tmp_path / "a" / MANIFEST_NAME).read_bytes()
        second = (tmp_path / "b" / MANIFEST_NAME).read_bytes()
        assert first == second
        assert (tmp_path / "a" / REFERENCE_NAME).read_bytes() == (
            tmp_path / "b" / REFERENCE_NAME
        ).read_bytes()

    def test_poses_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        seq = make_sequence(rng, frames=3, posed=True)
        save_sequence(seq, tmp_path / "posed")
        loaded = load_sequence(tmp_path / "posed")
        for a, b in zip(loaded.frames, seq.frames):
            assert np.allclose(a.pose.translation, b.pose.translation)
            assert np.allclose(a.pose.quaternion, b.pose.quaternion)

    def test_reference_trajectory_written_when_fully_posed(self, tmp_path):
        rng = np.random.default_rng(5)
        save_sequence(make_sequence(rng, frames=3, posed=True), tmp_path / "p")
        ref = load_reference_trajectory(tmp_path / "p")
        assert isinstance(ref, Trajectory)
        assert len(ref) == 3
        assert np.allclose(ref.translations[:, 0], [0.0, 0.25, 0.5])

    def test_no_reference_when_unposed(self, tmp_path):
        rng = np.random.default_rng(6)
        save_sequence(make_sequence(rng, frames=2), tmp_path / "u")
        assert load_reference_trajectory(tmp_path / "u") is None
        assert not (tmp_path / "u" / REFERENCE_NAME).exists()


class TestSequenceLoadErrors:
    def saved(self, tmp_path, **kwargs):
        rng = np.random.default_rng(9)
        path = tmp_path / "seq"
        save_sequence(make_sequence(rng, **kwargs), path)
        return path

    def edit_manifest(self, path, mutate):
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        mutate(manifest)
        (path / MANIFEST_NAME).write_text(json.dumps(manifest))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingManifest):
            load_sequence(tmp_path)

    def test_invalid_json(self, tmp_path):
        path = self.saved(tmp_path)
        (path / MANIFEST_NAME).write_text("{nope")
        with pytest.raises(ParseError):
            load_sequence(path)

    def test_wrong_version(self, tmp_path):
        path = self.saved(tmp_path)
        self.edit_manifest(path, lambda m: m.update(version=99))
        with pytest.raises(ParseError, match="version"):
            load_sequence(path)

    def test_missing_key(self, tmp_path):
        path = self.saved(tmp_path)
        self.edit_manifest(path, lambda m: m.pop("ladder_ms"))
        with pytest.raises(ParseError):
            load_sequence(path)

    def test_frame_count_mismatch(self, tmp_path):
        path = self.saved(tmp_path)
        self.edit_manifest(path, lambda m: m.update(frame_count=7))
        with pytest.raises(ParseError, match="frame_count"):
            load_sequence(path)

    def test_decreasing_ladder(self, tmp_path):
        path = self.saved(tmp_path)
        self.edit_manifest(path, lambda m: m.update(ladder_ms=[2.0, 1.0, 4.0]))
        with pytest.raises(LadderMismatch):
            load_sequence(path)

    def test_image_count_vs_ladder(self, tmp_path):
        path = self.saved(tmp_path)

        def drop_one(m):
            m["frames"][0]["images"] = m["frames"][0]["images"][:-1]

        self.edit_manifest(path, drop_one)
        with pytest.raises(LadderMismatch):
            load_sequence(path)

    def test_shape_mismatch(self, tmp_path):
        path = self.saved(tmp_path)
        self.edit_manifest(path, lambda m: m.update(width=99))
        with pytest.raises(CorruptImage, match="shape"):
            load_sequence(path)

    def test_hot_pixel_rejected(self, tmp_path):
        path = self.saved(tmp_path)
        name = json.loads((path / MANIFEST_NAME).read_text())["frames"][0]["images"][0]
        PilImage.fromarray(np.full((6, 8), 4500, np.uint16)).save(
            path / name
        )
        with pytest.raises(RangeViolation):
            load_sequence(path)


class TestTrajectoryFile:
    def make(self, n=5):
        ts = np.arange(n) * 0.5
        tr = np.column_stack([np.linspace(0, 2, n), np.zeros(n), np.zeros(n)])
        qs = np.tile(IDENTITY_Q, (n, 1))
        return Trajectory(ts, tr, qs)

    def test_round_trip_exact(self, tmp_path):
        traj = self.make()
        save_trajectory(traj, tmp_path / "t.txt")
        loaded = load_trajectory(tmp_path / "t.txt")
        assert np.array_equal(loaded.timestamps, traj.timestamps)
        assert np.array_equal(loaded.translations, traj.translations)
        assert np.array_equal(loaded.quaternions, traj.quaternions)

    def test_two_line_file(self, tmp_path):
        (tmp_path / "t.txt").write_text(
            "0.0 0 0 0 0 0 0 1\n1.0 1 0 0 0 0 0 1\n"
        )
        assert len(load_trajectory(tmp_path / "t.txt")) == 2

    def test_comments_and_blanks_ignored(self, tmp_path):
        (tmp_path / "t.txt").write_text(
            "# header\n\n0.0 0 0 0 0 0 0 1\n# middle\n1.0 1 0 0 0 0 0 1\n"
        )
        assert len(load_trajectory(tmp_path / "t.txt")) == 2

    def test_empty_file_is_empty_trajectory(self, tmp_path):
        (tmp_path / "t.txt").write_text("# nothing here\n")
        assert len(load_trajectory(tmp_path / "t.txt")) == 0

    def test_wrong_field_count(self, tmp_path):
        (tmp_path / "t.txt").write_text("0.0 0 0 0 0 0 1\n")
        with pytest.raises(ParseError, match="8 fields"):
            load_trajectory(tmp_path / "t.txt")

    def test_non_numeric_field(self, tmp_path):
        (tmp_path / "t.txt").write_text("0.0 0 0 zero 0 0 0 1\n")
        with pytest.raises(ParseError):
            load_trajectory(tmp_path / "t.txt")

    def test_quaternion_inside_renorm_band(self, tmp_path):
        q = 1.0005  # norm within 1e-3: renormalized, not rejected
        (tmp_path / "t.txt").write_text(f"0.0 0 0 0 0 0 0 {q}\n")
        loaded = load_trajectory(tmp_path / "t.txt")
        assert np.linalg.norm(loaded.quaternions[0]) == pytest.approx(1.0)

    def test_quaternion_outside_band_rejected(self, tmp_path):
        (tmp_path / "t.txt").write_text("0.0 0 0 0 0 0 0 1.01\n")
        with pytest.raises(BadQuaternion):
            load_trajectory(tmp_path / "t.txt")

    def test_non_monotone_timestamps(self, tmp_path):
        (tmp_path / "t.txt").write_text(
            "1.0 0 0 0 0 0 0 1\n0.5 1 0 0 0 0 0 1\n"
        )
        with pytest.raises(NonMonotoneTimestamps):
            load_trajectory(tmp_path / "t.txt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_trajectory(tmp_path / "absent.txt")


class TestTrajectoryFromSequence:
    def test_extracts_poses(self):
        rng = np.random.default_rng(11)
        traj = trajectory_from_sequence(make_sequence(rng, frames=4, posed=True))
        assert len(traj) == 4

    def test_rejects_unposed_frames(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ValueError):
            trajectory_from_sequence(make_sequence(rng, frames=2, posed=False))


class TestLoadDataset:
    def test_discovers_subdirectories_sorted(self, tmp_path):
        rng = np.random.default_rng(13)
        for name in ("bravo", "alpha", "charlie"):
            save_sequence(make_sequence(rng, seq_id=name), tmp_path / name)
        (tmp_path / "not_a_sequence").mkdir()
        seqs = load_dataset(tmp_path)
        assert [s.id for s in seqs] == ["alpha", "bravo", "charlie"]

    def test_root_as_single_sequence(self, tmp_path):
        rng = np.random.default_rng(14)
        save_sequence(make_sequence(rng), tmp_path / "solo")
        seqs = load_dataset(tmp_path / "solo")
        assert len(seqs) == 1 and seqs[0].id == "solo"

    def test_empty_root(self, tmp_path):
        assert load_dataset(tmp_path) == []
