"""Procedural dynamic LiDAR sequences with per-pixel class and velocity truth.

A scene is a closed box room with static boxes (fixed obstacles plus random
human-sized pillars) and capsule "humans" walking in straight lines that
reflect off the walls.  The sensor translates at constant world velocity
while yawing at a constant rate.  Each frame is ray cast from the sensor,
then degraded with i.i.d. pixel dropout.

Velocities are planar and expressed in the current sensor frame (x forward):
a background pixel carries ``-v_sensor`` and a human pixel carries
``v_actor - v_sensor``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, FormatError
from .projection import (
    DEFECT, LABEL_BACKGROUND, LABEL_DEFECT, LABEL_HUMAN, RangeImage, SensorModel,
    read_label_map, read_range_image, read_velocity_map,
    write_label_map, write_range_image, write_velocity_map,
)

log = logging.getLogger(__name__)

_PATH_MARGIN = 1.0     # sensor keeps this far from walls and fixed obstacles
_HUMAN_CLEARANCE = 0.5  # humans never come closer than radius + this to the sensor


def _range_field(default):
    return field(default_factory=lambda: tuple(default))


@dataclass
class SceneConfig:
    sensor: SensorModel = field(default_factory=SensorModel)
    room_half_extents: tuple = (12.0, 12.0)
    room_height: float = 3.0
    sensor_height: float = 1.0
    obstacles: list = field(default_factory=list)   # [xmin, ymin, zmin, xmax, ymax, zmax] rows
    clutter_count: tuple = _range_field((4, 10))     # random human-sized pillars per sequence
    clutter_footprint: tuple = _range_field((0.3, 0.7))
    clutter_height: tuple = _range_field((1.2, 2.2))
    human_count: tuple = _range_field((1, 4))
    human_speed: tuple = _range_field((0.5, 1.8))
    human_radius: tuple = _range_field((0.2, 0.3))
    human_height: tuple = _range_field((1.5, 1.9))
    sensor_speed: tuple = _range_field((0.0, 1.0))
    sensor_angular_speed: tuple = _range_field((0.0, 0.2))  # magnitude, random sign
    sensor_direction: tuple = _range_field((-math.pi, math.pi))
    sensor_yaw: tuple = _range_field((-math.pi, math.pi))
    frames: int = 32
    frame_interval: float = 0.1
    dropout: float = 0.02
    seed: int = 0

    _MAGNITUDES = ("clutter_count", "clutter_footprint", "clutter_height", "human_count",
                   "human_speed", "human_radius", "human_height", "sensor_speed",
                   "sensor_angular_speed")

    def __post_init__(self):
        if isinstance(self.sensor, dict):
            self.sensor = SensorModel(**self.sensor)
        for name in self._MAGNITUDES + ("sensor_direction", "sensor_yaw"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name}: empty range ({lo}, {hi})")
            if name in self._MAGNITUDES and lo < 0:
                raise ConfigurationError(f"{name}: range must be nonnegative, got ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        self.room_half_extents = tuple(float(v) for v in self.room_half_extents)
        if len(self.room_half_extents) != 2 or min(self.room_half_extents) <= 0:
            raise ConfigurationError(f"room_half_extents must be two positive numbers, got {self.room_half_extents}")
        if self.frames < 1:
            raise ConfigurationError(f"frames must be >= 1, got {self.frames}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.human_radius[1] * 2 > self.human_height[0]:
            raise ConfigurationError("human height must be at least twice the radius")
        self.obstacles = [tuple(float(v) for v in b) for b in self.obstacles]
        for b in self.obstacles:
            if len(b) != 6 or not (b[0] < b[3] and b[1] < b[4] and b[2] < b[5]):
                raise ConfigurationError(f"obstacle box {b} is not [xmin, ymin, zmin, xmax, ymax, zmax]")

    def to_dict(self):
        d = asdict(self)
        d["sensor"] = asdict(self.sensor)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ActorState:
    x: float
    y: float
    radius: float
    height: float
    vx: float
    vy: float

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)


@dataclass
class SensorPose:
    x: float
    y: float
    z: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class SceneState:
    room: np.ndarray        # [xmin, ymin, zmin, xmax, ymax, zmax]
    boxes: np.ndarray       # (nb, 6)
    actors: list


@dataclass
class Frame:
    image: RangeImage
    labels: np.ndarray      # (h, w) uint8
    velocity: np.ndarray    # (h, w, 2) float32


@dataclass
class SequenceSample:
    sensor: SensorModel
    ranges: np.ndarray          # (T, h, w) float32
    labels: np.ndarray          # (T, h, w) uint8
    velocity: np.ndarray        # (T, h, w, 2) float32
    poses: np.ndarray           # (T, 3): x, y, yaw
    sensor_velocity: np.ndarray  # (T, 2) world frame
    seed: int = 0
    config: dict = None

    def __len__(self):
        return self.ranges.shape[0]

    @property
    def frames(self):
        return [self.frame(t) for t in range(len(self))]

    def frame(self, t):
        return Frame(RangeImage(self.sensor, self.ranges[t]), self.labels[t], self.velocity[t])

    def window(self, end, n):
        """Normalised network input for frames ``end-n+1 .. end``, shape (n, h, w)."""
        if end - n + 1 < 0 or end >= len(self):
            raise ConfigurationError(f"window of {n} ending at {end} outside a {len(self)}-frame sequence")
        return (self.ranges[end - n + 1:end + 1] / np.float32(self.sensor.max_range)).astype(np.float32)


def rotate_to_sensor(vec, yaw):
    """Express world-frame planar vectors in a sensor frame with heading ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    vec = np.asarray(vec, dtype=np.float64)
    return np.stack([c * vec[..., 0] + s * vec[..., 1], -s * vec[..., 0] + c * vec[..., 1]], axis=-1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def ray_capsule_intersect(origin, direction, capsule):
    """Smallest positive hit distance of a ray on ``[cx, cy, radius, height]``, else None."""
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    t = kernels.capsule_hits_np(np.asarray(origin, dtype=np.float64), d, *map(float, capsule))[0]
    return float(t) if np.isfinite(t) else None


def render_frame(scene, pose, sensor):
    """Ray cast one scan.  Returns a :class:`Frame` (no dropout applied)."""
    local = sensor.ray_grid().reshape(-1, 3)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dirs = np.empty_like(local)
    dirs[:, 0] = c * local[:, 0] - s * local[:, 1]
    dirs[:, 1] = s * local[:, 0] + c * local[:, 1]
    dirs[:, 2] = local[:, 2]
    capsules = np.array([[a.x, a.y, a.radius, a.height] for a in scene.actors], dtype=np.float64).reshape(-1, 4)
    dist, hit = kernels.cast_rays(np.array([pose.x, pose.y, pose.z]), dirs, scene.room, scene.boxes, capsules)

    d32 = dist.astype(np.float32)
    valid = np.isfinite(dist) & (d32 <= np.float32(sensor.max_range)) & (d32 > 0)
    ranges = np.where(valid, d32, np.float32(DEFECT)).reshape(sensor.shape)

    human = valid & (hit >= kernels.HIT_CAPSULE0)
    labels = np.where(valid, np.where(human, LABEL_HUMAN, LABEL_BACKGROUND), LABEL_DEFECT).astype(np.uint8)

    sensor_v = np.array([pose.vx, pose.vy])
    table = [rotate_to_sensor(-sensor_v, pose.yaw)]
    table += [rotate_to_sensor(np.array([a.vx, a.vy]) - sensor_v, pose.yaw) for a in scene.actors]
    table = np.asarray(table, dtype=np.float32).reshape(-1, 2)
    which = np.where(human, hit - kernels.HIT_CAPSULE0 + 1, 0)
    velocity = np.where(valid[:, None], table[which], np.float32(0)).astype(np.float32)
    return Frame(RangeImage(sensor, ranges), labels.reshape(sensor.shape), velocity.reshape(sensor.shape + (2,)))


def apply_dropout(frame, p, rng):
    """Turn each valid pixel defected with probability ``p``."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    drop = rng.random(frame.labels.shape) < p
    if p == 0:
        return frame
    drop &= ~frame.image.defect_mask
    ranges = np.where(drop, np.float32(DEFECT), frame.image.ranges)
    labels = np.where(drop, np.uint8(LABEL_DEFECT), frame.labels)
    velocity = np.where(drop[..., None], np.float32(0), frame.velocity)
    return Frame(RangeImage(frame.image.sensor, ranges), labels, velocity)


# ---------------------------------------------------------------------------
# scene sampling and simulation
# ---------------------------------------------------------------------------

def _uniform(rng, bounds):
    lo, hi = bounds
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _integer(rng, bounds):
    lo, hi = int(bounds[0]), int(bounds[1])
    return lo if lo == hi else int(rng.integers(lo, hi + 1))


def _segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def _box_distance_2d(p, box):
    dx = max(box[0] - p[0], 0.0, p[0] - box[3])
    dy = max(box[1] - p[1], 0.0, p[1] - box[4])
    return math.hypot(dx, dy)


def _sample_sensor_path(config, rng):
    hx, hy = config.room_half_extents
    duration = config.frame_interval * (config.frames - 1)
    speed = _uniform(rng, config.sensor_speed)
    heading = _uniform(rng, config.sensor_direction)
    v = np.array([speed * math.cos(heading), speed * math.sin(heading)])
    travel = v * duration
    lo = np.array([-hx + _PATH_MARGIN, -hy + _PATH_MARGIN]) - np.minimum(travel, 0)
    hi = np.array([hx - _PATH_MARGIN, hy - _PATH_MARGIN]) - np.maximum(travel, 0)
    if np.any(lo > hi):
        raise ConfigurationError("sensor path does not fit inside the room; reduce sensor speed or frames")
    for _ in range(1000):
        start = np.array([_uniform(rng, (lo[0], hi[0])), _uniform(rng, (lo[1], hi[1]))])
        end = start + travel
        if all(_path_clear(start, end, b, _PATH_MARGIN) for b in config.obstacles):
            break
    else:
        raise ConfigurationError("could not place the sensor path clear of the obstacles")
    yaw0 = _uniform(rng, config.sensor_yaw)
    omega = _uniform(rng, config.sensor_angular_speed)
    if omega != 0 and rng.random() < 0.5:
        omega = -omega
    return start, v, yaw0, omega


def _path_clear(a, b, box, margin):
    for s in np.linspace(0.0, 1.0, 21):
        if _box_distance_2d(a + s * (b - a), box) < margin:
            return False
    return True


def _sample_clutter(config, rng, start, end):
    hx, hy = config.room_half_extents
    boxes = []
    for _ in range(_integer(rng, config.clutter_count)):
        for _ in range(100):
            fx = _uniform(rng, config.clutter_footprint)
            fy = _uniform(rng, config.clutter_footprint)
            height = min(_uniform(rng, config.clutter_height), config.room_height)
            cx = _uniform(rng, (-hx + fx, hx - fx))
            cy = _uniform(rng, (-hy + fy, hy - fy))
            box = (cx - fx / 2, cy - fy / 2, 0.0, cx + fx / 2, cy + fy / 2, height)
            if _path_clear(start, end, box, _PATH_MARGIN):
                boxes.append(box)
                break
    return boxes


def _step_actor(actor, dt, hx, hy):
    x, y = actor.x + actor.vx * dt, actor.y + actor.vy * dt
    vx, vy = actor.vx, actor.vy
    lim_x, lim_y = hx - actor.radius, hy - actor.radius
    if x > lim_x:
        x, vx = 2 * lim_x - x, -vx
    elif x < -lim_x:
        x, vx = -2 * lim_x - x, -vx
    if y > lim_y:
        y, vy = 2 * lim_y - y, -vy
    elif y < -lim_y:
        y, vy = -2 * lim_y - y, -vy
    return replace(actor, x=x, y=y, vx=vx, vy=vy)


def _simulate_actor(actor, config):
    hx, hy = config.room_half_extents
    track = [actor]
    for _ in range(config.frames - 1):
        track.append(_step_actor(track[-1], config.frame_interval, hx, hy))
    return track


def _sample_actors(config, rng, sensor_xy, boxes):
    hx, hy = config.room_half_extents
    tracks = []
    for _ in range(_integer(rng, config.human_count)):
        for _ in range(200):
            radius = _uniform(rng, config.human_radius)
            height = min(_uniform(rng, config.human_height), config.room_height)
            speed = _uniform(rng, config.human_speed)
            heading = float(rng.uniform(-math.pi, math.pi))
            x = _uniform(rng, (-hx + radius, hx - radius))
            y = _uniform(rng, (-hy + radius, hy - radius))
            actor = ActorState(x, y, radius, height, speed * math.cos(heading), speed * math.sin(heading))
            if any(_box_distance_2d((x, y), b) < radius for b in boxes):
                continue
            track = _simulate_actor(actor, config)
            gaps = [math.hypot(a.x - p[0], a.y - p[1]) for a, p in zip(track, sensor_xy)]
            if min(gaps) >= radius + _HUMAN_CLEARANCE:
                tracks.append(track)
                break
    return tracks


def generate_sequence(config, seed=None):
    """Deterministic sequence for ``(config, seed)``; ``seed`` defaults to ``config.seed``."""
    seed = config.seed if seed is None else int(seed)
    scene_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(scene_ss)
    drop_rng = np.random.default_rng(drop_ss)

    sensor = config.sensor
    hx, hy = config.room_half_extents
    room = np.array([-hx, -hy, 0.0, hx, hy, config.room_height])
    start, v_s, yaw0, omega = _sample_sensor_path(config, rng)
    times = np.arange(config.frames) * config.frame_interval
    sensor_xy = start[None, :] + times[:, None] * v_s[None, :]
    yaws = yaw0 + omega * times
    boxes = list(config.obstacles) + _sample_clutter(config, rng, sensor_xy[0], sensor_xy[-1])
    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 6)
    tracks = _sample_actors(config, rng, sensor_xy, boxes)

    T, (h, w) = config.frames, sensor.shape
    out = SequenceSample(
        sensor=sensor,
        ranges=np.zeros((T, h, w), np.float32),
        labels=np.zeros((T, h, w), np.uint8),
        velocity=np.zeros((T, h, w, 2), np.float32),
        poses=np.column_stack([sensor_xy, yaws]),
        sensor_velocity=np.tile(v_s, (T, 1)),
        seed=seed,
        config=config.to_dict(),
    )
    for t in range(T):
        scene = SceneState(room, box_arr, [track[t] for track in tracks])
        pose = SensorPose(sensor_xy[t, 0], sensor_xy[t, 1], config.sensor_height, yaws[t], v_s[0], v_s[1])
        frame = apply_dropout(render_frame(scene, pose, sensor), config.dropout, drop_rng)
        out.ranges[t] = frame.image.ranges
        out.labels[t] = frame.labels
        out.velocity[t] = frame.velocity
    return out


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
# 900 / 100 / 108 sequences in the original split
DEFAULT_SPLIT = (900 / 1108, 100 / 1108)


def write_sequence(directory, sample):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for t in range(len(sample)):
        stem = directory / f"frame_{t:04d}"
        write_range_image(stem.with_suffix(".rimg"), RangeImage(sample.sensor, sample.ranges[t]))
        write_label_map(stem.with_suffix(".rlbl"), sample.sensor, sample.labels[t])
        write_velocity_map(stem.with_suffix(".rvel"), sample.sensor, sample.velocity[t])
        x, y, yaw = (float(v) for v in sample.poses[t])
        vx, vy = (float(v) for v in sample.sensor_velocity[t])
        frames.append({"index": t, "pose": [x, y, yaw], "velocity": [vx, vy]})
    manifest = {"seed": sample.seed, "config": sample.config, "frames": frames}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))


def read_sequence(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{directory}: missing {MANIFEST}") from None
    ranges, labels, velocity = [], [], []
    sensor = None
    for entry in manifest["frames"]:
        stem = directory / f"frame_{entry['index']:04d}"
        image = read_range_image(stem.with_suffix(".rimg"))
        sensor = image.sensor
        ranges.append(image.ranges)
        labels.append(read_label_map(stem.with_suffix(".rlbl"))[1])
        velocity.append(read_velocity_map(stem.with_suffix(".rvel"))[1])
    poses = np.array([e["pose"] for e in manifest["frames"]], dtype=np.float64).reshape(-1, 3)
    sv = np.array([e["velocity"] for e in manifest["frames"]], dtype=np.float64).reshape(-1, 2)
    return SequenceSample(sensor, np.stack(ranges), np.stack(labels), np.stack(velocity), poses, sv,
                          seed=manifest.get("seed", 0), config=manifest.get("config"))


def split_counts(count, fractions=DEFAULT_SPLIT):
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    n_train = min(n_train, count)
    n_val = min(n_val, count - n_train)
    return n_train, n_val, count - n_train - n_val


def sequence_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def generate_dataset(config, out_dir, count, seed=0, counts=None):
    """Write ``count`` sequences plus a top-level manifest with train/val/test splits.

    ``counts`` overrides the split sizes as ``(train, val, test)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = split_counts(count) if counts is None else tuple(counts)
    if sum(counts) != count:
        raise ConfigurationError(f"split sizes {counts} do not add up to {count}")
    names = [f"seq_{i:05d}" for i in range(count)]
    seeds = sequence_seeds(seed, count)
    for name, s in zip(names, seeds):
        write_sequence(out_dir / name, generate_sequence(config, s))
        log.info("wrote %s (seed %d)", name, s)
    n_train, n_val, _ = counts
    manifest = {
        "seed": seed,
        "config": config.to_dict(),
        "splits": {
            "train": names[:n_train],
            "val": names[n_train:n_train + n_val],
            "test": names[n_train + n_val:],
        },
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(root, splits=("train", "val", "test")):
    """Read a dataset directory into ``{split: [SequenceSample, ...]}``."""
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: missing {MANIFEST}") from None
    return {s: [read_sequence(root / name) for name in manifest["splits"].get(s, [])] for s in splits}


def generate_split(config, count, seed):
    """In-memory list of ``count`` sequences, seeded like :func:`generate_dataset`."""
    return [generate_sequence(config, s) for s in sequence_seeds(seed, count)]
