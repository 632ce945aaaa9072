"""Domain type invariants and config loading."""

import math

import numpy as np
import pytest

from rvredeem.core import (
    Box3D,
    ConfigError,
    FeaturePointCloud,
    PipelineConfig,
    Point,
    RangeImage,
    SensorModel,
    SGridConfig,
    load_config,
    normalize_yaw,
    points_to_array,
)


def make_sensor(h=4, w=8):
    return SensorModel(height=h, width=w, fov_up=math.pi / 8, fov_down=math.pi / 8)


class TestSensorModel:
    def test_fov_total(self):
        s = SensorModel(64, 512, 0.1, 0.3)
        assert s.fov_total == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(height=0, width=8, fov_up=0.1, fov_down=0.1),
            dict(height=4, width=0, fov_up=0.1, fov_down=0.1),
            dict(height=4, width=8, fov_up=-0.1, fov_down=0.1),
            dict(height=4, width=8, fov_up=0.0, fov_down=0.0),
            dict(height=4, width=8, fov_up=2.0, fov_down=2.0),
        ],
    )
    def test_rejects_bad_geometry(self, kwargs):
        with pytest.raises(ValueError):
            SensorModel(**kwargs)


class TestPoint:
    def test_derives_range(self):
        p = Point(3.0, 4.0, 0.0)
        assert p.range == 5.0

    def test_accepts_consistent_range(self):
        p = Point(1.0, 2.0, 2.0, 0.5, 3.0)
        assert p.range == 3.0

    def test_rejects_inconsistent_range(self):
        with pytest.raises(ValueError):
            Point(3.0, 4.0, 0.0, 0.0, 5.1)

    def test_clamps_intensity(self, caplog):
        with caplog.at_level("WARNING"):
            p = Point(1.0, 0.0, 0.0, 1.5)
        assert p.intensity == 1.0
        assert "clamped" in caplog.text

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Point(math.nan, 0.0, 0.0)


class TestPointsToArray:
    def test_from_list(self):
        arr = points_to_array([Point(3.0, 4.0, 0.0, 0.25)])
        assert arr.shape == (1, 5)
        np.testing.assert_allclose(arr[0], [3.0, 4.0, 0.0, 0.25, 5.0])

    def test_derives_range_column(self):
        arr = points_to_array(np.array([[3.0, 4.0, 0.0, 0.1]]))
        assert arr[0, 4] == 5.0

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            points_to_array(np.zeros((2, 2)))


class TestRangeImage:
    def make_image(self):
        s = make_sensor()
        planes = np.zeros((5, 4, 8))
        valid = np.zeros((4, 8), dtype=bool)
        valid[1, 2] = True
        planes[:, 1, 2] = [3.0, 0.0, 4.0, 0.5, 5.0]
        return RangeImage(s, planes, valid)

    def test_accepts_consistent(self):
        img = self.make_image()
        assert img.plane_count == 5
        assert not img.channels.flags.writeable

    def test_rejects_nonzero_invalid_pixel(self):
        s = make_sensor()
        planes = np.zeros((5, 4, 8))
        planes[0, 0, 0] = 1.0
        with pytest.raises(ValueError):
            RangeImage(s, planes, np.zeros((4, 8), dtype=bool))

    def test_rejects_zero_range_at_valid_pixel(self):
        s = make_sensor()
        planes = np.zeros((5, 4, 8))
        valid = np.zeros((4, 8), dtype=bool)
        valid[0, 0] = True
        planes[0, 0, 0] = 1.0  # range plane stays 0
        with pytest.raises(ValueError):
            RangeImage(s, planes, valid)

    def test_with_features_zeroes_invalid(self):
        img = self.make_image()
        feats = np.ones((2, 4, 8))
        out = img.with_features(feats)
        assert out.plane_count == 7
        assert out.channels[5, 0, 0] == 0.0
        assert out.channels[5, 1, 2] == 1.0
        np.testing.assert_array_equal(out.channels[:5], img.channels[:5])


class TestFeaturePointCloud:
    def test_round_trip(self):
        pts = [Point(3.0, 4.0, 0.0, 0.5), Point(0.0, 0.0, 2.0, 0.25)]
        cloud = FeaturePointCloud.from_points(pts, np.arange(4.0).reshape(2, 2))
        assert len(cloud) == 2
        assert cloud.feature_dim == 2
        back = cloud.to_points()
        assert back[0] == pts[0]
        np.testing.assert_allclose(cloud.ranges, [5.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            FeaturePointCloud(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 1)))

    def test_source_pixel_shape(self):
        with pytest.raises(ValueError):
            FeaturePointCloud(
                np.zeros((2, 3)),
                np.zeros(2),
                np.zeros((2, 0)),
                source_pixel=np.zeros((1, 2), dtype=np.int64),
            )


class TestBox3D:
    def test_yaw_wraps(self):
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert Box3D(0, 0, 0, 1, 1, 1, -math.pi).yaw == pytest.approx(math.pi)
        assert Box3D(0, 0, 0, 1, 1, 1, math.pi).yaw == pytest.approx(math.pi)

    def test_normalize_yaw_range(self):
        for k in range(-8, 9):
            a = normalize_yaw(0.7 + k * math.tau)
            assert -math.pi < a <= math.pi
            assert a == pytest.approx(0.7, abs=1e-12)

    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, 0.0, 1, 0)


class TestPipelineConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig(sensor=make_sensor())
        assert cfg.feature_dim == 64
        assert cfg.sgrid.fine_grid == 3

    def test_rejects_odd_feature_dim(self):
        with pytest.raises(ValueError, match="feature_dim"):
            PipelineConfig(sensor=make_sensor(), feature_dim=63)

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            PipelineConfig(
                sensor=make_sensor(), range_min=(0, 0, 0), range_max=(1, -1, 1)
            )

    def test_sgrid_rejects_bad_mode(self):
        with pytest.raises(ValueError):
            SGridConfig(upsample_mode="cubic")


CONFIG_TEXT = """
# scanner geometry
sensor.height = 64
sensor.width = 512
sensor.fov_up_deg = 2.0
sensor.fov_down_deg = 24.8

rvfe.conv_channels = 16
rvfe.feature_dim = 32
keypoints.count = 256
voxel.size_z = 0.5
sgrid.fine_radius = 0.8
sgrid.coarse_radius = auto
seed = 7
"""


class TestLoadConfig:
    def write(self, tmp_path, text):
        path = tmp_path / "pipeline.cfg"
        path.write_text(text)
        return path

    def test_parses_full_file(self, tmp_path):
        cfg = load_config(self.write(tmp_path, CONFIG_TEXT))
        assert cfg.sensor.height == 64
        assert cfg.sensor.fov_up == pytest.approx(math.radians(2.0))
        assert cfg.sensor.fov_down == pytest.approx(math.radians(24.8))
        assert cfg.conv_channels == 16
        assert cfg.feature_dim == 32
        assert cfg.keypoint_count == 256
        assert cfg.voxel_size == (0.4, 0.4, 0.5)
        assert cfg.sgrid.fine_radius == 0.8
        assert cfg.sgrid.coarse_radius is None
        assert cfg.seed == 7

    def test_same_file_same_config(self, tmp_path):
        path = self.write(tmp_path, CONFIG_TEXT)
        assert load_config(path) == load_config(path)

    def test_missing_key_named(self, tmp_path):
        path = self.write(tmp_path, "sensor.height = 64\n")
        with pytest.raises(ConfigError, match="sensor.width"):
            load_config(path)

    def test_unknown_key_named(self, tmp_path):
        path = self.write(tmp_path, CONFIG_TEXT + "sensor.tilt = 3\n")
        with pytest.raises(ConfigError, match="sensor.tilt"):
            load_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = self.write(tmp_path, "seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_config(path)

    def test_rad_and_deg_conflict(self, tmp_path):
        text = CONFIG_TEXT + "sensor.fov_up = 0.03\n"
        with pytest.raises(ConfigError, match="fov_up"):
            load_config(self.write(tmp_path, text))

    def test_bad_number_named(self, tmp_path):
        text = CONFIG_TEXT.replace("seed = 7", "seed = seven")
        with pytest.raises(ConfigError, match="seed"):
            load_config(self.write(tmp_path, text))

    def test_invariant_violation_reported(self, tmp_path):
        text = CONFIG_TEXT.replace("rvfe.feature_dim = 32", "rvfe.feature_dim = 33")
        with pytest.raises(ConfigError, match="feature_dim"):
            load_config(self.write(tmp_path, text))
