import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolpose3d.errors import StreamFormatError
from toolpose3d.streams import (
    CorruptFrame,
    DetectionFrame,
    PoseFrame,
    PoseRecord,
    SkipRecord,
    format_detection,
    format_detection_frame,
    format_gt_frame,
    format_pose_frame,
    frames_to_text,
    parse_detection,
    parse_detection_block,
    read_detection_stream,
    read_gt,
    read_poses,
)
from toolpose3d.simulator import NoiseModel, make_rig, simulate
from toolpose3d.types import BEAN, GRASPER, DetectionBatch, Keypoint, ToolDetection2D, ToolPose3D

six = st.floats(-1e4, 1e4, allow_nan=False).map(lambda v: round(v, 6))
kp = st.builds(Keypoint, six, six, st.sampled_from([0, 1, 2]), st.floats(0, 1).map(lambda v: round(v, 6)))


@st.composite
def detection(draw):
    cls = draw(st.sampled_from([GRASPER, BEAN]))
    x0, y0 = draw(six), draw(six)
    w, h = draw(st.floats(0.001, 500).map(lambda v: round(v, 3))), draw(st.floats(0.001, 500).map(lambda v: round(v, 3)))
    n = 4 if cls == GRASPER else 1
    return ToolDetection2D(draw(st.integers(0, 20)), cls, (x0, y0, round(x0 + w, 6), round(y0 + h, 6)),
                           tuple(draw(kp) for _ in range(n)), draw(st.floats(0, 1).map(lambda v: round(v, 6))))


@given(detection())
def test_detection_line_round_trip(d):
    assert parse_detection(format_detection(d)) == d
    batch = parse_detection_block([(1, format_detection(d))])
    assert batch.detection(0) == d


@given(st.lists(detection(), max_size=8))
def test_detection_block_matches_object_path(dets):
    lines = [(i + 1, format_detection(d)) for i, d in enumerate(dets)]
    assert parse_detection_block(lines).detections() == dets


def test_detection_block_errors_name_the_line():
    good = format_detection(ToolDetection2D(0, BEAN, (0, 0, 1, 1), (Keypoint(0.5, 0.5),)))
    bad = [
        "D 0 bean 1.0 0 0 1 1 1 0.5 0.5 3 1.0",  # visibility
        "D 0 bean 1.0 1 0 0 1 1 0.5 0.5 2 1.0",  # bbox
        "D 0 bean nan 0 0 1 1 1 0.5 0.5 2 1.0",
        "D 0 drill 1.0 0 0 1 1 1 0.5 0.5 2 1.0",
        "D 0 bean 1.0 0 0 1 1 2 0.5 0.5 2 1.0",  # wrong keypoint count
        "D 0 bean 1.0 0 0 1 1 1 0.5 0.5 2",
        "X 0",
    ]
    for line in bad:
        with pytest.raises(StreamFormatError, match="line 7"):
            parse_detection_block([(6, good), (7, line)])


def sim_stream(n, sigma=0.0):
    rig = make_rig()
    frames = list(simulate(rig, n, NoiseModel(sigma_px=sigma, seed=3)))
    return rig, frames, "".join(format_detection_frame(f.frame_index, f.all_detections()) for f in frames)


def test_stream_round_trip_and_empty_frames():
    _, frames, text = sim_stream(5, sigma=1.0)
    text += "F 9\n"
    parsed = read_detection_stream(io.StringIO(text))
    assert [f.frame_index for f in parsed] == [0, 1, 2, 3, 4, 9]
    assert all(isinstance(f, DetectionFrame) for f in parsed)
    for p, f in zip(parsed, frames):
        again = [parse_detection(format_detection(d)) for d in f.all_detections()]
        assert list(p.detections) == again
    assert len(parsed[-1].batch) == 0


def test_one_corrupt_frame_in_a_long_stream():
    _, _, text = sim_stream(1000)
    lines = text.splitlines(keepends=True)
    start = lines.index("F 500\n")
    lines[start + 1] = lines[start + 1].replace("grasper", "grasper 1.0 junk", 1)
    parsed = read_detection_stream(io.StringIO("".join(lines)))
    corrupt = [f for f in parsed if isinstance(f, CorruptFrame)]
    assert len(parsed) == 1000 and len(corrupt) == 1
    assert corrupt[0].frame_index == 500 and f"line {start + 2}" in corrupt[0].message


def test_header_problems_are_reported():
    body = "D 0 bean 1.0 0 0 1 1 1 0.5 0.5 2 1.0\n"
    text = body + "F 1\n" + body + "F 1\n" + body + "F 0\n" + body + "F x\n" + body + "F 2\n" + body
    parsed = read_detection_stream(io.StringIO(text))
    kinds = [(type(f).__name__, f.frame_index) for f in parsed]
    assert kinds == [("CorruptFrame", None), ("DetectionFrame", 1), ("CorruptFrame", 1),
                     ("CorruptFrame", 0), ("CorruptFrame", None), ("DetectionFrame", 2)]
    assert "before any frame header" in parsed[0].message
    assert "out of order" in parsed[2].message and "out of order" in parsed[3].message


def test_gt_round_trip_and_negative_zero():
    pose = ToolPose3D(np.array([-1e-9, 0.1, 0.2]), np.array([0.3, -0.4, 0.5]), np.array([0.0, -0.0, 1.0]),
                      np.array([0.0, 0.0, -1.0]))
    text = format_gt_frame(4, pose, [np.array([0.01, -0.02, 0.03])])
    assert "-0.000000" not in text
    gt = read_gt(io.StringIO(text))[4]
    np.testing.assert_allclose(gt.grasper["tip_b"], [0.3, -0.4, 0.5])
    np.testing.assert_allclose(gt.beans[0], [0.01, -0.02, 0.03])
    np.testing.assert_allclose(gt.axis, [0, 0, -1])
    with pytest.raises(StreamFormatError, match=":2:"):
        read_gt(io.StringIO(text.splitlines()[0] + "\nG 4 grasper.elbow 0 0 0\n"))


def test_pose_round_trip():
    frames = [
        PoseFrame(0, ("beans_ambiguous", "tips_greedy"),
                  (PoseRecord("grasper.wrist", np.array([1e-8, -2.5, 3.0]), 0.25, ((0, 0, 2), (3, 1, 2))),
                   PoseRecord("bean", np.array([0.1, 0.2, -0.3]), 0.0, ((0, 2, 0), (1, 4, 0)))),
                  np.array([0.0, 0.6, -0.8])),
        SkipRecord(1, "corrupt"),
        PoseFrame(2, (), (), None),
        SkipRecord(None, "bad header"),
    ]
    text = frames_to_text(frames)
    assert "-0.000000" not in text and "S - bad_header" in text
    back = read_poses(io.StringIO(text))
    assert frames_to_text(back) == text
    assert back[0].flags == frames[0].flags and back[0].points[1].support == ((0, 2, 0), (1, 4, 0))
    assert back[0].grasper_point("wrist").residual == 0.25 and back[0].grasper_point("tip_a") is None
    assert len(back[0].beans) == 1 and back[2].axis is None


def test_pose_reader_errors():
    with pytest.raises(StreamFormatError, match=":1:"):
        read_poses(io.StringIO("G 0 bean 0 0 0 0 0\n"))
    with pytest.raises(StreamFormatError, match=":2:"):
        read_poses(io.StringIO("P 0 -\nG 0 bean 0 0 0 0 2 0:0:0\n"))
    with pytest.raises(StreamFormatError, match=":2:"):
        read_poses(io.StringIO("P 0 -\nG 1 bean 0 0 0 0 0\n"))


def test_detection_frame_constructor():
    d = ToolDetection2D(2, BEAN, (0, 0, 1, 1), (Keypoint(0.5, 0.5),))
    f = DetectionFrame.of(3, [d])
    assert f.detections == (d,) and isinstance(f.batch, DetectionBatch)
