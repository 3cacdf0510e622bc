"""Tests for the annotation data model and file formats."""

from pathlib import Path

import numpy as np
import pytest

from vidanno.core.annotation_store import (
    AnnotationRecord,
    AnnotationSet,
    BBox,
    Direction,
    ImageDirectory,
    Source,
    TrackedFrame,
    VideoMeta,
    read_annotations,
    read_failure_list,
    read_frame,
    read_tracker_dump,
    resize_response_map,
    validate_records,
    write_annotations,
    write_failure_list,
    write_frame,
    write_tracker_dump,
)
from vidanno.core.errors import (
    ConfigError,
    CoverageError,
    FailureKind,
    FormatError,
    MissingArtifactError,
    ShapeError,
    StageFailure,
)


@pytest.fixture
def meta() -> VideoMeta:
    return VideoMeta("clip", frame_count=4, frame_width=64, frame_height=48, anchor_interval=3)


def _records() -> list[AnnotationRecord]:
    return [
        AnnotationRecord(0, Source.MANUAL, BBox(1.0, 2.0, 11.0, 12.0)),
        AnnotationRecord(1, Source.FORWARD, BBox(1.5, 2.25, 11.1, 12.3), quality=0.8125),
        AnnotationRecord(2, Source.FAILURE),
        AnnotationRecord(3, Source.MANUAL, BBox(0.1, 0.2, 10.3, 9.7)),
    ]


class TestBBox:
    """Tests for BBox."""

    def test_geometry(self) -> None:
        """Test width, height, area and centre."""
        box = BBox(10.0, 20.0, 30.0, 60.0)
        assert box.width == 20.0
        assert box.height == 40.0
        assert box.area == 800.0
        assert box.center == (20.0, 40.0)

    def test_from_center(self) -> None:
        """Test construction from centre and size."""
        assert BBox.from_center(5.0, 5.0, 4.0, 2.0) == BBox(3.0, 4.0, 7.0, 6.0)

    @pytest.mark.parametrize(
        "coords",
        [(0.0, 0.0, 0.0, 1.0), (5.0, 0.0, 1.0, 1.0), (0.0, 0.0, float("nan"), 1.0)],
    )
    def test_invalid(self, coords: tuple[float, float, float, float]) -> None:
        """Test degenerate and non-finite boxes are rejected."""
        with pytest.raises(ValueError):
            BBox(*coords)

    def test_clip(self) -> None:
        """Test clipping to the frame."""
        assert BBox(-5.0, -5.0, 10.0, 10.0).clip(8, 8) == BBox(0.0, 0.0, 8.0, 8.0)
        assert BBox(20.0, 20.0, 30.0, 30.0).clip(8, 8) is None


class TestRecords:
    """Tests for record invariants."""

    def test_failure_has_no_box(self) -> None:
        """Test FAILURE records cannot carry a box."""
        with pytest.raises(ValueError):
            AnnotationRecord(0, Source.FAILURE, BBox(0.0, 0.0, 1.0, 1.0))

    def test_tracker_record_needs_positive_quality(self) -> None:
        """Test tracker-sourced records need quality > 0."""
        box = BBox(0.0, 0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            AnnotationRecord(0, Source.FORWARD, box)
        with pytest.raises(ValueError):
            AnnotationRecord(0, Source.BACKWARD, box, quality=0.0)

    def test_manual_record_has_no_quality(self) -> None:
        """Test MANUAL records cannot carry a quality score."""
        with pytest.raises(ValueError):
            AnnotationRecord(0, Source.MANUAL, BBox(0.0, 0.0, 1.0, 1.0), quality=0.5)

    def test_validate_duplicate(self, meta: VideoMeta) -> None:
        """Test duplicate frame indices are rejected."""
        records = _records()
        records[1] = AnnotationRecord(0, Source.MANUAL, BBox(0.0, 0.0, 1.0, 1.0))
        with pytest.raises(CoverageError) as excinfo:
            validate_records(records, meta)
        assert excinfo.value.frame_idx == 0

    def test_validate_out_of_range(self, meta: VideoMeta) -> None:
        """Test frame indices beyond the video are rejected."""
        records = [*_records(), AnnotationRecord(4, Source.FAILURE)]
        with pytest.raises(CoverageError):
            validate_records(records, meta)

    def test_validate_complete(self, meta: VideoMeta) -> None:
        """Test completeness check reports the first missing frame."""
        records = [r for r in _records() if r.frame_idx != 2]
        validate_records(records, meta)
        with pytest.raises(CoverageError) as excinfo:
            validate_records(records, meta, complete=True)
        assert excinfo.value.frame_idx == 2

    def test_annotation_set(self, meta: VideoMeta) -> None:
        """Test AnnotationSet accessors."""
        annotations = AnnotationSet(meta, tuple(_records()))
        assert annotations.is_complete
        assert annotations.failure_frames == [2]
        assert sorted(annotations.boxes()) == [0, 1, 3]
        assert annotations.by_frame()[1].quality == 0.8125


class TestAnnotationFile:
    """Tests for the annotation file format."""

    def test_round_trip_exact(self, meta: VideoMeta, tmp_path: Path) -> None:
        """Test records read back bit-exactly."""
        path = tmp_path / "out" / "annotations.txt"
        write_annotations(_records(), meta, path)
        annotations = read_annotations(path)
        assert annotations.meta == meta
        assert list(annotations.records) == _records()

    def test_header(self, meta: VideoMeta, tmp_path: Path) -> None:
        """Test the header line carries magic and metadata."""
        path = tmp_path / "annotations.txt"
        write_annotations(_records(), meta, path)
        first = path.read_text(encoding="utf-8").splitlines()[0]
        assert first == "VANN1,clip,4,64,48,3"

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test a missing file raises MissingArtifactError."""
        with pytest.raises(MissingArtifactError, match="annotation file"):
            read_annotations(tmp_path / "absent.txt")

    def test_bad_magic(self, tmp_path: Path) -> None:
        """Test a wrong header is reported on line 1."""
        path = tmp_path / "annotations.txt"
        path.write_text("VANN9,clip,4,64,48,3\n", encoding="utf-8")
        with pytest.raises(FormatError) as excinfo:
            read_annotations(path)
        assert excinfo.value.line == 1

    def test_bad_row_line_number(self, meta: VideoMeta, tmp_path: Path) -> None:
        """Test a malformed row reports its line number."""
        path = tmp_path / "annotations.txt"
        write_annotations(_records(), meta, path)
        with path.open("a", encoding="utf-8") as f:
            f.write("x,manual,1,2,3,4,\n")
        with pytest.raises(FormatError) as excinfo:
            read_annotations(path)
        assert excinfo.value.line == 6

    def test_unknown_source(self, tmp_path: Path) -> None:
        """Test an unknown source tag is a format error."""
        path = tmp_path / "annotations.txt"
        path.write_text("VANN1,clip,4,64,48,3\n0,guess,1,2,3,4,\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_annotations(path)

    def test_write_rejects_duplicates(self, meta: VideoMeta, tmp_path: Path) -> None:
        """Test duplicates are refused before anything is written."""
        records = [*_records(), AnnotationRecord(3, Source.FAILURE)]
        path = tmp_path / "annotations.txt"
        with pytest.raises(CoverageError):
            write_annotations(records, meta, path)
        assert not path.exists()


class TestTrackerDump:
    """Tests for tracker dump directories."""

    def _frames(self, size: int = 4) -> list[TrackedFrame]:
        rng = np.random.default_rng(0)
        return [
            TrackedFrame(
                idx,
                Direction.FORWARD,
                BBox(idx + 0.1, 2.0, idx + 10.7, 12.0),
                0.25 * idx,
                rng.random((size, size)),
            )
            for idx in (3, 1, 2)
        ]

    def test_round_trip(self, tmp_path: Path) -> None:
        """Test frames read back sorted with identical maps."""
        frames = self._frames()
        write_tracker_dump(frames, tmp_path / "forward", Direction.FORWARD)
        loaded = read_tracker_dump(tmp_path / "forward", Direction.FORWARD, response_size=4)
        assert [f.frame_idx for f in loaded] == [1, 2, 3]
        by_idx = {f.frame_idx: f for f in frames}
        for frame in loaded:
            original = by_idx[frame.frame_idx]
            assert frame.box == original.box
            assert frame.confidence == original.confidence
            np.testing.assert_array_equal(frame.response_map, original.response_map)

    def test_response_map_read_only(self) -> None:
        """Test stored response maps are float32 and immutable."""
        frame = self._frames()[0]
        assert frame.response_map.dtype == np.float32
        with pytest.raises(ValueError):
            frame.response_map[0, 0] = 1.0

    def test_direction_mismatch(self, tmp_path: Path) -> None:
        """Test a dump is read only as its own direction."""
        write_tracker_dump(self._frames(), tmp_path / "dump", Direction.FORWARD)
        with pytest.raises(FormatError):
            read_tracker_dump(tmp_path / "dump", Direction.BACKWARD, response_size=4)

    def test_wrong_size(self, tmp_path: Path) -> None:
        """Test a map of the wrong size is a shape error naming the frame."""
        write_tracker_dump(self._frames(), tmp_path / "dump", Direction.FORWARD)
        with pytest.raises(ShapeError) as excinfo:
            read_tracker_dump(tmp_path / "dump", Direction.FORWARD, response_size=8)
        assert excinfo.value.frame_idx == 1

    def test_resize(self, tmp_path: Path) -> None:
        """Test maps are resized when allowed."""
        write_tracker_dump(self._frames(), tmp_path / "dump", Direction.FORWARD)
        loaded = read_tracker_dump(
            tmp_path / "dump", Direction.FORWARD, response_size=8, resize=True
        )
        assert all(f.response_map.shape == (8, 8) for f in loaded)

    def test_confidence_clipped(self, tmp_path: Path) -> None:
        """Test out-of-range confidences are clipped on read."""
        write_tracker_dump(self._frames(), tmp_path / "dump", Direction.FORWARD)
        index = tmp_path / "dump" / "index.txt"
        lines = index.read_text(encoding="utf-8").splitlines()
        fields = lines[1].split(",")
        fields[-1] = "1.5"
        lines[1] = ",".join(fields)
        index.write_text("\n".join(lines) + "\n", encoding="utf-8")
        loaded = read_tracker_dump(tmp_path / "dump", Direction.FORWARD, response_size=4)
        assert loaded[0].confidence == 1.0

    def test_missing_map(self, tmp_path: Path) -> None:
        """Test a missing response map file is a missing artifact."""
        write_tracker_dump(self._frames(), tmp_path / "dump", Direction.FORWARD)
        (tmp_path / "dump" / "maps" / "000002.f32").unlink()
        with pytest.raises(MissingArtifactError):
            read_tracker_dump(tmp_path / "dump", Direction.FORWARD, response_size=4)

    def test_missing_dump(self, tmp_path: Path) -> None:
        """Test a missing dump directory is a missing artifact."""
        with pytest.raises(MissingArtifactError):
            read_tracker_dump(tmp_path / "absent", Direction.FORWARD)

    def test_resize_response_map(self) -> None:
        """Test a constant map stays constant when resized."""
        resized = resize_response_map(np.full((4, 4), 0.5, dtype=np.float32), 16)
        assert resized.shape == (16, 16)
        np.testing.assert_allclose(resized, 0.5, atol=1e-6)


class TestFramesAndFailures:
    """Tests for frame images and failure lists."""

    def test_frame_round_trip(self, tmp_path: Path) -> None:
        """Test frames survive 8-bit quantization within one step."""
        image = np.linspace(0.0, 1.0, 48 * 64, dtype=np.float32).reshape(48, 64)
        frames = ImageDirectory(tmp_path / "frames")
        write_frame(image, frames.frame_path(7))
        loaded = frames.frame(7)
        assert loaded.shape == (48, 64)
        np.testing.assert_allclose(loaded, image, atol=1 / 255)

    def test_missing_frame(self, tmp_path: Path) -> None:
        """Test a missing frame image is a missing artifact."""
        with pytest.raises(MissingArtifactError):
            read_frame(tmp_path / "000000.png")

    def test_failure_list(self, tmp_path: Path) -> None:
        """Test failure lists are written sorted."""
        path = tmp_path / "failures.txt"
        write_failure_list([9, 2, 5], path)
        assert path.read_text(encoding="utf-8") == "2\n5\n9\n"
        assert read_failure_list(path) == [2, 5, 9]

    def test_empty_failure_list(self, tmp_path: Path) -> None:
        """Test an empty failure list is an empty file."""
        path = tmp_path / "failures.txt"
        write_failure_list([], path)
        assert read_failure_list(path) == []


class TestStageFailure:
    """Tests for StageFailure classification."""

    def test_config_error(self) -> None:
        """Test configuration errors exit with status 2."""
        failure = StageFailure.from_exception("annotate", ConfigError("bad key"))
        assert failure.kind is FailureKind.CONFIG
        assert failure.exit_code == 2
        assert str(failure) == "annotate failed (configuration error): bad key"

    def test_missing_artifact(self, tmp_path: Path) -> None:
        """Test missing artifacts name the path."""
        error = MissingArtifactError(tmp_path / "assess.pt", "assessment checkpoint")
        failure = StageFailure.from_exception("annotate", error)
        assert failure.kind is FailureKind.MISSING_INPUT
        assert failure.exit_code == 1
        assert "assess.pt" in failure.message

    def test_invalid_input(self) -> None:
        """Test format errors are invalid input."""
        failure = StageFailure.from_exception("eval", FormatError("bad", Path("a.txt"), 3))
        assert failure.kind is FailureKind.INVALID_INPUT
        assert failure.message == "a.txt:3: bad"

    def test_unknown(self) -> None:
        """Test other exceptions are unknown failures with a one-line message."""
        failure = StageFailure.from_exception("report", RuntimeError("line one\nline two"))
        assert failure.kind is FailureKind.UNKNOWN
        assert failure.message == "line one line two"
