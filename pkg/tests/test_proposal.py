import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cattle_interaction._records import FormatError
from cattle_interaction.geometry import BoundingBox as B, interaction_region, iou, rasterize_pair_map
from cattle_interaction.proposal import (
    Detection,
    OutOfFrameError,
    extract_slices,
    filter_detections,
    generate_proposals,
    read_detections,
    throttle_frames,
    write_detections,
)


def det(box, conf=0.9, did=0, fid=0):
    return Detection(B(*box), conf, fid, did)


def brute_force_proposals(dets, lo=0.2, hi=0.7):
    out = set()
    for d1, d2 in itertools.combinations(dets, 2):
        v = iou(d1.box, d2.box)
        if lo < v < hi:
            a, b = sorted((d1, d2), key=lambda d: d.detection_id)
            out.add((a.detection_id, b.detection_id))
    return out


class TestFilter:
    def test_strict_threshold(self):
        dets = [det((0, 0, 1, 1), c, k) for k, c in enumerate([0.9, 0.7, 0.5])]
        assert [d.confidence for d in filter_detections(dets, 0.7)] == [0.9]

    def test_empty(self):
        assert filter_detections([]) == []

    def test_all_above(self):
        dets = [det((0, 0, 1, 1), c, k) for k, c in enumerate([0.95, 0.8, 0.71])]
        assert filter_detections(dets) == dets

    def test_confidence_range(self):
        with pytest.raises(ValueError):
            det((0, 0, 1, 1), 1.2)


class TestGenerateProposals:
    def test_single_gated_pair_among_three(self):
        dets = [det((0, 0, 7, 1), did=0), det((3, 0, 10, 1), did=1), det((20, 20, 30, 30), did=2)]
        expected = brute_force_proposals(dets)
        assert expected == {(0, 1)}
        props = generate_proposals(dets)
        assert {(p.a.detection_id, p.b.detection_id) for p in props} == expected
        assert props[0].iou == pytest.approx(0.4)

    def test_disjoint(self):
        dets = [det((k * 20, 0, k * 20 + 10, 10), did=k) for k in range(4)]
        assert generate_proposals(dets) == []

    def test_heavy_occlusion_excluded(self):
        dets = [det((0, 0, 7, 1), did=0), det((1, 0, 8, 1), did=1)]
        assert iou(dets[0].box, dets[1].box) == pytest.approx(0.75)
        assert generate_proposals(dets) == []

    def test_canonical_order(self):
        dets = [det((3, 0, 10, 1), did=9), det((0, 0, 7, 1), did=4)]
        (p,) = generate_proposals(dets)
        assert (p.a.detection_id, p.b.detection_id) == (4, 9)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            generate_proposals([det((0, 0, 7, 1), did=1), det((3, 0, 10, 1), did=1)])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(2, 20), st.integers(2, 20)),
                    min_size=0, max_size=8), st.randoms(use_true_random=False))
    def test_properties(self, raw, rnd):
        dets = [det((x, y, x + w, y + h), did=k) for k, (x, y, w, h) in enumerate(raw)]
        props = generate_proposals(dets)
        n = len(dets)
        assert len(props) <= math.comb(n, 2)
        assert {(p.a.detection_id, p.b.detection_id) for p in props} == brute_force_proposals(dets)
        for p in props:
            assert 0.2 < p.iou < 0.7
            assert p.a.detection_id < p.b.detection_id
            assert p.region == interaction_region(p.a.box, p.b.box)
            assert p.a.box.contains(p.region) and p.b.box.contains(p.region)
        shuffled = list(dets)
        rnd.shuffle(shuffled)
        assert generate_proposals(shuffled) == props


class TestExtractSlices:
    @pytest.fixture
    def frame(self, rng):
        return rng.integers(0, 256, size=(64, 80, 3), dtype=np.uint8)

    def test_sizes_and_range(self, frame):
        (p,) = generate_proposals([det((0, 0, 30, 20), did=0), det((12, 4, 40, 30), did=1)])
        s = extract_slices(frame, p, input_size=100, map_resolution=16)
        for img in (s.c1, s.c2, s.i):
            assert img.shape == (3, 100, 100) and img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0
        np.testing.assert_array_equal(s.geometric.data, rasterize_pair_map(p.a.box, p.b.box, 16).data)

    def test_region_equal_to_a_box(self, frame):
        (p,) = generate_proposals([det((10, 10, 30, 30), did=0), det((5, 5, 40, 40), did=1)])
        assert p.region == p.a.box
        s = extract_slices(frame, p, input_size=100)
        np.testing.assert_array_equal(s.i, s.c1)

    def test_deterministic(self, frame):
        (p,) = generate_proposals([det((0, 0, 30, 20), did=0), det((12, 4, 40, 30), did=1)])
        assert extract_slices(frame, p, 40) == extract_slices(frame, p, 40)

    def test_crop_of_constant_region_is_constant(self):
        frame = np.zeros((50, 50, 3), dtype=np.uint8)
        frame[10:30, 10:30] = 255
        (p,) = generate_proposals([det((10, 10, 30, 30), did=0), det((5, 5, 40, 40), did=1)])
        s = extract_slices(frame, p, 32)
        assert np.all(s.c1 == 1.0)

    def test_clamps_partially_outside_boxes(self, frame):
        (p,) = generate_proposals([det((-5, -5, 20, 20), did=0), det((5, 5, 30, 30), did=1)])
        s = extract_slices(frame, p, 32)
        assert s.c1.shape == (3, 32, 32)

    def test_out_of_frame(self, frame):
        (p,) = generate_proposals([det((100, 100, 120, 120), did=0), det((105, 105, 125, 125), did=1)])
        with pytest.raises(OutOfFrameError):
            extract_slices(frame, p, 32)


class TestThrottle:
    def test_every_fifth(self):
        assert list(throttle_frames(range(10), 5)) == [0, 5]

    def test_default_stride_is_five(self):
        assert list(throttle_frames(range(12))) == [0, 5, 10]

    def test_stride_one(self):
        assert list(throttle_frames(range(4), 1)) == [0, 1, 2, 3]

    def test_short_stream(self):
        assert list(throttle_frames(["a", "b", "c"], 5)) == ["a"]

    @pytest.mark.parametrize("stride", [0, -1, 1.5])
    def test_invalid(self, stride):
        with pytest.raises(ValueError):
            throttle_frames(range(3), stride)


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        frames = {0: [det((0, 0, 5.5, 5), 0.8, 0, 0), det((1, 1, 6, 7), 0.3, 1, 0)],
                  3: [det((2, 2, 4, 4), 0.99, 7, 3)]}
        path = tmp_path / "detections.jsonl"
        write_detections(path, frames)
        assert json.loads(path.read_text().splitlines()[0]) == {"format_version": 1}
        assert read_detections(path) == frames

    def test_bad_line_is_named(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"format_version": 1}\n{"frame_id": 0, "detections": []}\n{oops\n')
        with pytest.raises(FormatError, match=r"d\.jsonl:3"):
            read_detections(path)

    def test_invalid_box_is_named(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"format_version": 1}\n'
                        '{"frame_id": 0, "detections": [{"id": 0, "x1": 5, "y1": 0, "x2": 1, "y2": 1, '
                        '"confidence": 0.9}]}\n')
        with pytest.raises(FormatError, match=":2"):
            read_detections(path)

    def test_version_gate(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"format_version": 2}\n')
        with pytest.raises(FormatError, match="format_version"):
            read_detections(path)
