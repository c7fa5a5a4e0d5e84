import numpy as np
import pytest

from shapedet.detection import (
    BoundingBox,
    decode_center,
    dump_maps,
    extract_detections,
    load_maps,
    render_ground_truth,
)
from shapedet.errors import BadDims, CenterOutOfBounds, DuplicateClass


DIMS = (64, 64, 64)


def box(anatomy=0, center=(40.0, 48.0, 36.0), radii=(8.0, 6.0, 7.0)):
    return BoundingBox(anatomy=anatomy, center=np.array(center), radii=np.array(radii))


class TestRenderGroundTruth:
    def test_peak_at_strided_voxel(self):
        maps = render_ground_truth([box()], DIMS, num_classes=2, stride=4)
        assert maps.heatmap[0, 10, 12, 9] == 1.0
        assert maps.heatmap[0].max() == 1.0
        assert np.allclose(maps.offset_map[:, 10, 12, 9], 0.0)
        assert maps.center_mask[10, 12, 9]

    def test_fractional_center_offset(self):
        maps = render_ground_truth(
            [box(center=(41.5, 48.25, 35.0))], DIMS, num_classes=1, stride=4
        )
        assert maps.heatmap[0, 10, 12, 8] == 1.0
        assert np.allclose(maps.offset_map[:, 10, 12, 8], [1.5, 0.25, 3.0])

    def test_empty_box_list(self):
        maps = render_ground_truth([], DIMS, num_classes=3, stride=4)
        assert not maps.heatmap.any()
        assert not maps.center_mask.any()

    def test_heat_in_unit_interval(self):
        maps = render_ground_truth(
            [box(), box(anatomy=1, center=(20.0, 20.0, 20.0))], DIMS, num_classes=2
        )
        assert maps.heatmap.min() >= 0.0 and maps.heatmap.max() <= 1.0

    def test_center_out_of_bounds(self):
        with pytest.raises(CenterOutOfBounds):
            render_ground_truth([box(center=(70.0, 10.0, 10.0))], DIMS, num_classes=1)

    def test_duplicate_class(self):
        with pytest.raises(DuplicateClass):
            render_ground_truth([box(), box(center=(20.0, 20.0, 20.0))], DIMS, num_classes=1)

    def test_bad_dims(self):
        with pytest.raises(BadDims):
            render_ground_truth([box()], (63, 64, 64), num_classes=1, stride=4)


class TestDecodeCenter:
    def test_origin(self):
        assert np.allclose(decode_center((0, 0, 0), (0, 0, 0), 4), [0, 0, 0])

    def test_direct_evaluation(self):
        c = decode_center((10, 12, 8), (1.5, 0.25, 3.0), 4)
        assert np.allclose(c, [41.5, 48.25, 35.0])

    def test_round_trip_random_centers(self):
        rng = np.random.default_rng(0)
        stride = 4
        for _ in range(100):
            center = rng.uniform(stride, 64 - stride, size=3)
            maps = render_ground_truth(
                [box(center=center)], DIMS, num_classes=1, stride=stride
            )
            peak = np.unravel_index(np.argmax(maps.heatmap[0]), maps.heatmap[0].shape)
            decoded = decode_center(
                peak, maps.offset_map[(slice(None),) + peak], stride
            )
            assert np.array_equal(decoded, center)


class TestExtractDetections:
    def test_round_trip_single_box(self):
        b = box(center=(41.5, 48.25, 35.0), radii=(8.0, 6.5, 7.25))
        maps = render_ground_truth([b], DIMS, num_classes=2)
        found = extract_detections(maps, presence_threshold=0.3)
        assert len(found) == 1
        assert found[0].anatomy == 0
        assert np.array_equal(found[0].center, b.center)
        assert np.array_equal(found[0].radii, b.radii)
        assert found[0].confidence == 1.0

    def test_zero_heatmap_empty(self):
        maps = render_ground_truth([], DIMS, num_classes=2)
        assert extract_detections(maps) == []

    def test_zeroed_channel_drops_one(self):
        maps = render_ground_truth(
            [box(), box(anatomy=1, center=(20.0, 20.0, 20.0))], DIMS, num_classes=2
        )
        maps.heatmap[1] = 0.0
        found = extract_detections(maps)
        assert [b.anatomy for b in found] == [0]

    def test_radii_clamped_to_one_voxel(self):
        maps = render_ground_truth([box()], DIMS, num_classes=1)
        maps.radius_map[:] = 0.25
        found = extract_detections(maps)
        assert np.all(found[0].radii >= 1.0)

    def test_codec_round_trip_100_random_boxes(self):
        rng = np.random.default_rng(42)
        stride = 4
        for _ in range(100):
            center = rng.uniform(stride, 64 - stride, size=3)
            radii = rng.uniform(2.0, 12.0, size=3)
            b = box(center=center, radii=radii)
            maps = render_ground_truth([b], DIMS, num_classes=1, stride=stride)
            found = extract_detections(maps, presence_threshold=0.3)
            assert len(found) == 1
            assert np.array_equal(found[0].center, center)
            assert np.array_equal(found[0].radii, radii)


class TestMapDump:
    def test_round_trip(self, tmp_path):
        maps = render_ground_truth(
            [box(center=(41.5, 48.25, 35.0)), box(anatomy=1, center=(20.0, 22.0, 24.5))],
            DIMS,
            num_classes=2,
        )
        path = tmp_path / "maps.txt"
        dump_maps(maps, path)
        loaded = load_maps(path)
        assert loaded.stride == maps.stride
        assert np.array_equal(loaded.heatmap, maps.heatmap)
        assert np.array_equal(loaded.radius_map, maps.radius_map)
        assert np.array_equal(loaded.offset_map, maps.offset_map)
        assert np.array_equal(loaded.center_mask, maps.center_mask)

    def test_header_format(self, tmp_path):
        maps = render_ground_truth([box()], DIMS, num_classes=3)
        path = tmp_path / "maps.txt"
        dump_maps(maps, path)
        header = path.read_text().splitlines()[0]
        assert header == "3 64 64 64 4"
