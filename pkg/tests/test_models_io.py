import json

import numpy as np
import pytest
from pydantic import ValidationError

from or_gaze import io
from or_gaze.models import (
    ActivityClass,
    ActivitySegment,
    FeatureKind,
    FeatureTable,
    GazePoint,
    OutputExistsError,
    PersonObservation,
    SchemaViolationError,
    SegmentSet,
    UnsupportedFormatError,
)
from tests.conftest import create_frame, create_person, create_segment


@pytest.fixture
def frames():
    return [
        create_frame(
            [
                create_person("p0", 0.3, 0.5, gaze=(0.5, 0.5)),
                create_person("p1", 0.7, 0.5),
            ],
            frame_index=i,
        )
        for i in range(3)
    ]


class TestRecords:
    def test_gaze_and_outside_are_exclusive(self):
        person = create_person("p0", 0.5, 0.5, gaze=(0.2, 0.2))
        with pytest.raises(ValidationError):
            PersonObservation.model_validate(
                {**person.model_dump(), "looking_outside": True}
            )

    def test_duplicate_person_ids_rejected(self):
        with pytest.raises(ValidationError):
            create_frame([create_person("p0", 0.3, 0.5), create_person("p0", 0.6, 0.5)])

    def test_head_outside_image_rejected(self):
        person = create_person("p0", 0.5, 0.5)
        data = person.model_dump()
        data["head"] = {"x1": 600.0, "y1": 10.0, "x2": 700.0, "y2": 40.0}
        with pytest.raises(ValidationError):
            create_frame([PersonObservation.model_validate(data)])

    def test_gaze_point_pixels(self):
        point = GazePoint.from_pixels(160.0, 120.0, (640, 480))
        assert (point.x, point.y) == (0.25, 0.25)
        assert point.to_pixels((640, 480)) == (160.0, 120.0)

    def test_segment_must_be_ordered(self):
        with pytest.raises(ValidationError):
            create_segment(5.0, 5.0)

    def test_segment_set_within_duration(self):
        with pytest.raises(ValidationError):
            SegmentSet(video_id="v000", duration_s=10.0, segments=[create_segment(8.0, 12.0)])

    def test_feature_table_rejects_non_finite(self):
        with pytest.raises(ValueError):
            FeatureTable("v000", FeatureKind.VISUAL, 0.5, 1.0, np.array([[np.nan, 1.0]]))

    def test_feature_table_records(self):
        table = FeatureTable("v000", FeatureKind.ACTION, 8.0, 8.0, np.ones((3, 2)))
        records = table.records()
        assert [r.t_center_s for r in records] == [8.0, 16.0, 24.0]
        assert table.vectors.dtype == np.float32


class TestAnnotations:
    def test_save_and_load(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        loaded = io.load_video(path)
        assert loaded.video_id == "v000"
        assert loaded.frames == frames

    def test_load_annotations(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        assert io.load_annotations(path) == frames

    def test_refuses_overwrite_without_force(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        with pytest.raises(OutputExistsError):
            io.save_annotations(frames, path, fps=1.0)
        io.save_annotations(frames, path, fps=1.0, force=True)

    def test_every_offending_record_is_listed(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        raw = json.loads(path.read_text())
        for i in (0, 2):
            raw["frames"][i]["persons"][0]["looking_outside"] = True
        path.write_text(json.dumps(raw))

        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_video(path)
        locators = [issue.locator for issue in excinfo.value.issues]
        assert locators == ["frames[0].persons[0]", "frames[2].persons[0]"]
        assert "frames[2].persons[0]" in str(excinfo.value)

    def test_non_increasing_timestamps(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        raw = json.loads(path.read_text())
        raw["frames"][2]["timestamp_s"] = 1.0
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_video(path)
        assert excinfo.value.issues[0].locator == "frames[2].timestamp_s"

    def test_schema_and_order_issues_are_listed_together(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        raw = json.loads(path.read_text())
        raw["frames"][0]["persons"][0]["looking_outside"] = True
        raw["frames"][2]["timestamp_s"] = 0.5
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_video(path)
        locators = [issue.locator for issue in excinfo.value.issues]
        assert locators == ["frames[0].persons[0]", "frames[2].timestamp_s"]

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "v000.gaze.json"
        path.write_bytes(b'{"format_version": 1, "video_id": "\xff\xfe"}')
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_video(path)
        assert [str(issue) for issue in excinfo.value.issues] == ["$: not valid UTF-8"]

    def test_unknown_format_version(self, frames, tmp_path):
        path = tmp_path / "v000.gaze.json"
        io.save_annotations(frames, path, fps=1.0)
        raw = json.loads(path.read_text())
        raw["format_version"] = 2
        path.write_text(json.dumps(raw))
        with pytest.raises(UnsupportedFormatError):
            io.load_video(path)

    def test_parse_error_has_line_locator(self, tmp_path):
        path = tmp_path / "broken.gaze.json"
        path.write_text('{"format_version": 1,\n "video_id": }')
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_video(path)
        assert excinfo.value.issues[0].locator == "line 2"


class TestSegmentsAndFeatures:
    def test_segments_round_trip(self, tmp_path):
        segment_set = SegmentSet(
            video_id="v000",
            duration_s=40.0,
            segments=[
                create_segment(1.0, 5.0),
                create_segment(10.0, 12.5, score=0.8, activity=ActivityClass.ABA),
            ],
        )
        path = tmp_path / "v000.segments.json"
        io.save_segments(segment_set, path)
        assert io.load_segments(path) == segment_set

    def test_segment_outside_duration(self, tmp_path):
        path = tmp_path / "v000.segments.json"
        path.write_text(
            json.dumps(
                {
                    "format_version": 1,
                    "video_id": "v000",
                    "duration_s": 10.0,
                    "segments": [{"activity": "STOP", "start_s": 2.0, "end_s": 11.0}],
                }
            )
        )
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_segments(path)
        assert excinfo.value.issues[0].locator == "segments[0]"

    def test_feature_blob_layout(self, tmp_path):
        vectors = np.arange(12, dtype=np.float32).reshape(3, 4)
        io.save_features(FeatureTable("v000", FeatureKind.VISUAL, 8.0, 8.0, vectors), tmp_path)
        blob, sidecar = io.feature_paths(tmp_path, "v000", FeatureKind.VISUAL)
        assert blob.read_bytes() == vectors.astype("<f4").tobytes()
        assert json.loads(sidecar.read_text())["num_clips"] == 3

        table = io.load_features(tmp_path, "v000", "visual")
        np.testing.assert_array_equal(table.vectors, vectors)
        assert table.t_center(2) == 24.0

    def test_truncated_feature_blob(self, tmp_path):
        vectors = np.ones((3, 4), dtype=np.float32)
        io.save_features(FeatureTable("v000", FeatureKind.ACTION, 8.0, 8.0, vectors), tmp_path)
        blob, _ = io.feature_paths(tmp_path, "v000", FeatureKind.ACTION)
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(SchemaViolationError):
            io.load_features(tmp_path, "v000", FeatureKind.ACTION)

    def test_validate_directory_reports_failures(self, frames, tmp_path):
        io.save_annotations(frames, tmp_path / "v000.gaze.json", fps=1.0)
        assert io.validate_directory(tmp_path) == {}
        (tmp_path / "v001.gaze.json").write_text('{"format_version": 1}')
        failures = io.validate_directory(tmp_path)
        assert list(failures) == [str(tmp_path / "v001.gaze.json")]

    def test_missing_feature_blob(self, tmp_path):
        vectors = np.ones((3, 4), dtype=np.float32)
        io.save_features(FeatureTable("v000", FeatureKind.ACTION, 8.0, 8.0, vectors), tmp_path)
        blob, _ = io.feature_paths(tmp_path, "v000", FeatureKind.ACTION)
        blob.unlink()
        with pytest.raises(SchemaViolationError) as excinfo:
            io.load_features(tmp_path, "v000", FeatureKind.ACTION)
        assert excinfo.value.path == str(blob)
        assert excinfo.value.issues[0].locator == "$"

    def test_validate_directory_reports_unreadable_files(self, frames, tmp_path):
        io.save_annotations(frames, tmp_path / "v000.gaze.json", fps=1.0)
        (tmp_path / "v001.segments.json").write_bytes(b"\xff\xfe\x00")
        vectors = np.ones((3, 4), dtype=np.float32)
        io.save_features(FeatureTable("v000", FeatureKind.VISUAL, 8.0, 8.0, vectors), tmp_path)
        blob, sidecar = io.feature_paths(tmp_path, "v000", FeatureKind.VISUAL)
        blob.unlink()
        failures = io.validate_directory(tmp_path)
        assert sorted(failures) == sorted([str(tmp_path / "v001.segments.json"), str(sidecar)])

    def test_frame_labels(self, tmp_path):
        path = tmp_path / "labels.json"
        io.save_frame_labels("v000", {2: "b", 0: "a"}, path)
        assert io.load_frame_labels(path) == ("v000", {0: "a", 2: "b"})


class TestSegmentScores:
    def test_score_bounds(self):
        with pytest.raises(ValidationError):
            ActivitySegment(
                video_id="v000", activity=ActivityClass.STOP, start_s=0.0, end_s=1.0, score=1.5
            )
