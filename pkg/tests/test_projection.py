import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarseq import projection as pj
from lidarseq.errors import ConfigurationError, FormatError, UsageError


@pytest.fixture
def sensor():
    return pj.SensorModel(rows=32, cols=128)


def random_image(sensor, rng, defect_rate=0.3):
    r = rng.uniform(0.05, sensor.max_range, size=sensor.shape).astype(np.float32)
    r[rng.random(sensor.shape) < defect_rate] = 0
    return pj.RangeImage(sensor, r)


def test_sensor_invariants():
    with pytest.raises(ConfigurationError):
        pj.SensorModel(theta_min=0.2, theta_max=0.1)
    with pytest.raises(ConfigurationError):
        pj.SensorModel(rows=1)
    with pytest.raises(ConfigurationError):
        pj.SensorModel(cols=3)
    with pytest.raises(ConfigurationError):
        pj.SensorModel(max_range=0)


def test_forward_axis_pixel():
    # odd width and symmetric FOV put a pixel centre exactly on phi = 0, theta = 0
    s = pj.SensorModel(rows=3, cols=5, theta_min=-0.3, theta_max=0.3)
    np.testing.assert_allclose(pj.pixel_to_ray(s, 1, 2), [1.0, 0.0, 0.0], atol=1e-7)


def test_left_axis_pixel():
    s = pj.SensorModel(rows=3, cols=10, theta_min=-0.3, theta_max=0.3)
    np.testing.assert_allclose(pj.pixel_to_ray(s, 1, 2), [0.0, 1.0, 0.0], atol=1e-7)
    np.testing.assert_allclose(pj.direction(0.0, math.pi / 2), [0.0, 1.0, 0.0], atol=1e-15)


def test_all_rays_are_unit(sensor):
    for row in range(sensor.rows):
        for col in range(sensor.cols):
            assert abs(np.linalg.norm(pj.pixel_to_ray(sensor, row, col)) - 1.0) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(sensor.ray_grid(), axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("row,col", [(-1, 0), (0, -1), (32, 0), (0, 128)])
def test_pixel_to_ray_bounds(sensor, row, col):
    with pytest.raises(UsageError):
        pj.pixel_to_ray(sensor, row, col)


def test_empty_point_list_is_all_defected(sensor):
    image, winner = pj.project_points(sensor, np.zeros((0, 3)))
    assert image.defect_mask.all()
    assert (winner == -1).all()


def test_single_forward_point():
    s = pj.SensorModel(rows=4, cols=16, theta_min=-0.2, theta_max=0.2)
    image, _ = pj.project_points(s, [[5.0, 0.0, 0.0]])
    hit = np.argwhere(~image.defect_mask)
    assert hit.tolist() == [[2, 8]]   # theta = 0 is the row 1/2 boundary; phi = 0 opens column w/2
    assert image.ranges[2, 8] == 5.0


def test_zbuffer_keeps_nearest_with_attributes(sensor):
    d = pj.pixel_to_ray(sensor, 10, 40)
    pts = np.stack([7 * d, 3 * d])
    attrs = np.array([[7.0, 70.0], [3.0, 30.0]])
    image, winner, picked = pj.project_points(sensor, pts, attrs)
    assert image.ranges[10, 40] == 3.0
    assert winner[10, 40] == 1
    assert picked[10, 40].tolist() == [3.0, 30.0]
    assert (~image.defect_mask).sum() == 1


def test_farther_point_never_changes_image(sensor):
    rng = np.random.default_rng(0)
    img = random_image(sensor, rng)
    pts, rows, cols = pj.backproject(img, with_pixels=True)
    before, _ = pj.project_points(sensor, pts)
    extra = pts[:50] * 1.5
    after, _ = pj.project_points(sensor, np.concatenate([pts, extra]))
    assert before == after


def test_points_outside_fov_or_range_are_dropped(sensor):
    pts = [[0, 0, 5.0], [0, 0, -5.0], [200.0, 0, 0]]
    image, _ = pj.project_points(sensor, pts)
    assert image.defect_mask.all()


def test_column_binning_is_periodic(sensor):
    phis = np.random.default_rng(1).uniform(-math.pi, math.pi, 200)
    a = pj.pixel_of(sensor, pj.direction(0.0, phis) * 4)
    b = pj.pixel_of(sensor, pj.direction(0.0, phis + 2 * math.pi) * 4)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0])


def test_backproject_examples(sensor):
    assert pj.backproject(pj.RangeImage.empty(sensor)).shape == (0, 3)
    s = pj.SensorModel(rows=3, cols=5, theta_min=-0.3, theta_max=0.3)
    img = pj.RangeImage.empty(s)
    img.ranges[1, 2] = 2.0
    np.testing.assert_allclose(pj.backproject(img), [[2.0, 0.0, 0.0]], atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), defect=st.floats(0.0, 1.0))
def test_round_trip_is_bitwise(seed, defect):
    sensor = pj.SensorModel(rows=16, cols=64)
    img = random_image(sensor, np.random.default_rng(seed), defect)
    back, _ = pj.project_points(sensor, pj.backproject(img))
    assert back.ranges.tobytes() == img.ranges.tobytes()


def test_round_trip_at_max_range(sensor):
    img = pj.RangeImage(sensor, np.full(sensor.shape, sensor.max_range, np.float32))
    back, _ = pj.project_points(sensor, pj.backproject(img))
    assert back == img


def test_file_round_trips(tmp_path, sensor):
    rng = np.random.default_rng(2)
    img = random_image(sensor, rng)
    labels = rng.choice([0, 1, 255], size=sensor.shape).astype(np.uint8)
    vel = rng.normal(size=sensor.shape + (2,)).astype(np.float32)
    pj.write_range_image(tmp_path / "a.rimg", img)
    pj.write_label_map(tmp_path / "a.rlbl", sensor, labels)
    pj.write_velocity_map(tmp_path / "a.rvel", sensor, vel)
    assert pj.read_range_image(tmp_path / "a.rimg") == img
    s2, lab2 = pj.read_label_map(tmp_path / "a.rlbl")
    assert s2 == sensor and np.array_equal(lab2, labels)
    s3, vel2 = pj.read_velocity_map(tmp_path / "a.rvel")
    assert s3 == sensor and vel2.tobytes() == vel.tobytes()


def test_file_header_layout(tmp_path):
    s = pj.SensorModel(rows=2, cols=4, theta_min=-0.5, theta_max=0.25, max_range=50)
    pj.write_range_image(tmp_path / "a.rimg", pj.RangeImage.empty(s))
    raw = (tmp_path / "a.rimg").read_bytes()
    assert raw[:4] == b"RIMG"
    assert np.frombuffer(raw[4:10], "<u2").tolist() == [1, 2, 4]
    assert np.frombuffer(raw[10:22], "<f4").tolist() == [-0.5, 0.25, 50.0]
    assert len(raw) == 22 + 4 * 8


@pytest.mark.parametrize("reader,magic", [(pj.read_range_image, b"RLBL"), (pj.read_label_map, b"RIMG")])
def test_file_magic_checked(tmp_path, sensor, reader, magic):
    path = tmp_path / "x"
    pj.write_range_image(path, pj.RangeImage.empty(sensor))
    raw = path.read_bytes()
    path.write_bytes(magic + raw[4:])
    with pytest.raises(FormatError):
        reader(path)


def test_truncated_file(tmp_path, sensor):
    path = tmp_path / "x.rimg"
    pj.write_range_image(path, pj.RangeImage.empty(sensor))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        pj.read_range_image(path)
