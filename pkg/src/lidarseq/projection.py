"""Spherical range-image geometry.

Column ``c`` of a ``w``-wide image looks along azimuth
``pi - 2*pi*(c + 0.5)/w`` and row ``r`` along elevation
``theta_max - (theta_max - theta_min)*(r + 0.5)/h``; +x is the sensor's
forward axis, +z is up.  A range of exactly 0 marks a defected pixel.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError, UsageError

DEFECT = 0.0
LABEL_BACKGROUND = 0
LABEL_HUMAN = 1
LABEL_DEFECT = 255


@dataclass(frozen=True)
class SensorModel:
    rows: int = 32
    cols: int = 128
    theta_min: float = -0.535
    theta_max: float = 0.186
    max_range: float = 100.0

    def __post_init__(self):
        # file headers store float32; keep the in-memory model identical
        for name in ("theta_min", "theta_max", "max_range"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        if not self.theta_min < self.theta_max:
            raise ConfigurationError(f"theta_min {self.theta_min} must be below theta_max {self.theta_max}")
        if self.rows < 2 or self.cols < 4:
            raise ConfigurationError(f"sensor needs rows >= 2 and cols >= 4, got {self.rows}x{self.cols}")
        if not self.max_range > 0:
            raise ConfigurationError(f"max_range must be positive, got {self.max_range}")

    @property
    def shape(self):
        return (self.rows, self.cols)

    def azimuths(self):
        return np.pi - 2.0 * np.pi * (np.arange(self.cols) + 0.5) / self.cols

    def elevations(self):
        return self.theta_max - (self.theta_max - self.theta_min) * (np.arange(self.rows) + 0.5) / self.rows

    def ray_grid(self):
        """Unit directions for every pixel, shape (rows, cols, 3)."""
        theta = self.elevations()[:, None]
        phi = self.azimuths()[None, :]
        return direction(theta, phi)


def direction(theta, phi):
    """Unit vector for elevation ``theta`` and azimuth ``phi`` (broadcasting)."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


@dataclass
class RangeImage:
    sensor: SensorModel
    ranges: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float32)
        if self.ranges.shape != self.sensor.shape:
            raise ConfigurationError(f"range grid {self.ranges.shape} does not match sensor {self.sensor.shape}")

    @classmethod
    def empty(cls, sensor):
        return cls(sensor, np.zeros(sensor.shape, dtype=np.float32))

    @property
    def defect_mask(self):
        return self.ranges == DEFECT

    def normalized(self):
        """Network input: range / max_range, defected pixels 0."""
        return (self.ranges / np.float32(self.sensor.max_range)).astype(np.float32)

    def __eq__(self, other):
        return (isinstance(other, RangeImage) and self.sensor == other.sensor
                and np.array_equal(self.ranges, other.ranges))


def pixel_to_ray(sensor, row, col):
    if not (0 <= row < sensor.rows and 0 <= col < sensor.cols):
        raise UsageError(f"pixel ({row}, {col}) outside {sensor.rows}x{sensor.cols} image")
    theta = sensor.theta_max - (sensor.theta_max - sensor.theta_min) * (row + 0.5) / sensor.rows
    phi = np.pi - 2.0 * np.pi * (col + 0.5) / sensor.cols
    return direction(theta, phi)


def pixel_of(sensor, points):
    """Pixel (row, col) and range for each point; row is -1 outside the vertical FOV."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    phi = np.arctan2(y, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arcsin(np.clip(z / r, -1.0, 1.0))
    u = (np.pi - phi) / (2.0 * np.pi)
    col = np.floor(u * sensor.cols).astype(np.int64) % sensor.cols
    v = (sensor.theta_max - theta) / (sensor.theta_max - sensor.theta_min)
    row = np.floor(v * sensor.rows)
    inside = (r > 0) & np.isfinite(row) & (row >= 0) & (row < sensor.rows)
    row = np.where(inside, row, -1).astype(np.int64)
    return row, col, r


def project_points(sensor, points, attributes=None):
    """Z-buffer a point list into a :class:`RangeImage`.

    Returns ``(image, winner)`` where ``winner`` is an (h, w) array holding,
    per pixel, the index of the point that won it (-1 if none).  When
    ``attributes`` (length N along axis 0) is given, a third element holds the
    winners' attributes with defected pixels zero-filled.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    row, col, r = pixel_of(sensor, pts)
    r32 = r.astype(np.float32)
    keep = (row >= 0) & (r32 > 0) & (r32 <= np.float32(sensor.max_range))
    idx = np.flatnonzero(keep)
    pixel = row[idx] * sensor.cols + col[idx]
    win = kernels.zbuffer(pixel, r[idx], sensor.rows * sensor.cols)
    winner = np.full(win.shape, -1, dtype=np.int64)
    winner[win >= 0] = idx[win[win >= 0]]
    winner = winner.reshape(sensor.shape)
    ranges = np.full(sensor.shape, np.float32(DEFECT), dtype=np.float32)
    ranges[winner >= 0] = r32[winner[winner >= 0]]
    image = RangeImage(sensor, ranges)
    if attributes is None:
        return image, winner
    attributes = np.asarray(attributes)
    picked = np.zeros(winner.shape + attributes.shape[1:], dtype=attributes.dtype)
    picked[winner >= 0] = attributes[winner[winner >= 0]]
    return image, winner, picked


def backproject(image, with_pixels=False):
    """Points (N, 3) for non-defected pixels, row-major order."""
    rows, cols = np.nonzero(~image.defect_mask)
    dirs = image.sensor.ray_grid()[rows, cols]
    pts = dirs * image.ranges[rows, cols].astype(np.float64)[:, None]
    if with_pixels:
        return pts, rows, cols
    return pts


# ---------------------------------------------------------------------------
# RIMG / RLBL / RVEL files
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHfff")
MAGIC_RANGE = b"RIMG"
MAGIC_LABEL = b"RLBL"
MAGIC_VELOCITY = b"RVEL"


def _pack_header(magic, sensor):
    return _HEADER.pack(magic, FORMAT_VERSION, sensor.rows, sensor.cols,
                        sensor.theta_min, sensor.theta_max, sensor.max_range)


def _unpack(path, magic):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, version, h, w, tmin, tmax, rmax = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        sensor = SensorModel(h, w, float(tmin), float(tmax), float(rmax))
    except ConfigurationError as exc:
        raise FormatError(f"{path}: invalid sensor header ({exc})") from None
    return sensor, buf[_HEADER.size:]


def _payload(path, body, dtype, count):
    itemsize = np.dtype(dtype).itemsize
    if len(body) != count * itemsize:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {count * itemsize}")
    return np.frombuffer(body, dtype=dtype).copy()


def write_range_image(path, image):
    Path(path).write_bytes(_pack_header(MAGIC_RANGE, image.sensor)
                           + np.ascontiguousarray(image.ranges, dtype="<f4").tobytes())


def read_range_image(path):
    sensor, body = _unpack(path, MAGIC_RANGE)
    ranges = _payload(path, body, "<f4", sensor.rows * sensor.cols).reshape(sensor.shape)
    return RangeImage(sensor, ranges.astype(np.float32))


def write_label_map(path, sensor, labels):
    labels = np.asarray(labels)
    if labels.shape != sensor.shape:
        raise ConfigurationError(f"label map {labels.shape} does not match sensor {sensor.shape}")
    Path(path).write_bytes(_pack_header(MAGIC_LABEL, sensor) + labels.astype(np.uint8).tobytes())


def read_label_map(path):
    sensor, body = _unpack(path, MAGIC_LABEL)
    return sensor, _payload(path, body, np.uint8, sensor.rows * sensor.cols).reshape(sensor.shape)


def write_velocity_map(path, sensor, velocity):
    velocity = np.asarray(velocity)
    if velocity.shape != sensor.shape + (2,):
        raise ConfigurationError(f"velocity map {velocity.shape} does not match sensor {sensor.shape}")
    Path(path).write_bytes(_pack_header(MAGIC_VELOCITY, sensor)
                           + np.ascontiguousarray(velocity, dtype="<f4").tobytes())


def read_velocity_map(path):
    sensor, body = _unpack(path, MAGIC_VELOCITY)
    vel = _payload(path, body, "<f4", sensor.rows * sensor.cols * 2)
    return sensor, vel.reshape(sensor.shape + (2,)).astype(np.float32)
