"""Two-branch spatio-temporal network.

Segmentation branch: an hourglass over the newest frame that only pools
horizontally.  Channel widths follow C/8 -> C/4 -> C through three
contraction stages, a C-wide bottleneck at w/8, and a mirrored expansion
with additive skips.

Velocity branch: every frame of the window goes through one shared encoder
(four conv+pool stages down to w/16 x C/8); the per-frame maps are stacked
along channels into temporal features.  Those are upsampled and concatenated
into each expansion stage (temporal propagation), and, at full resolution
together with the predicted label probabilities (label feedback), decoded by
three 3x3 convs and a linear 1x1 head into a 2-D velocity per pixel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, UsageError
from .projection import RangeImage

FRAME_CHOICES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class NetworkConfig:
    frames: int = 4
    height: int = 32
    width: int = 128
    channels: int = 64
    classes: int = 2
    velocity_dims: int = 2
    velocity_head_enabled: bool = True
    temporal_propagation_enabled: bool = True
    label_feedback_enabled: bool = True

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigurationError(f"frames must be >= 1, got {self.frames}")
        if self.width % 16:
            raise ConfigurationError(f"width must be divisible by 16, got {self.width}")
        if self.channels % 8 or self.channels < 8:
            raise ConfigurationError(f"channels must be a positive multiple of 8, got {self.channels}")
        if self.height < 1 or self.classes < 2 or self.velocity_dims < 1:
            raise ConfigurationError("height >= 1, classes >= 2 and velocity_dims >= 1 required")

    # n = 1 has no velocity branch at all
    @property
    def has_encoder(self):
        return self.frames > 1

    @property
    def has_decoder(self):
        return self.frames > 1 and self.velocity_head_enabled

    @property
    def propagates(self):
        return self.frames > 1 and self.temporal_propagation_enabled

    @property
    def feeds_back(self):
        return self.has_decoder and self.label_feedback_enabled

    @property
    def temporal_width(self):
        return self.frames * self.channels // 8

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_table(config):
    """Ordered ``(name, kernel_size, c_in, c_out, activation)`` for every layer."""
    C = config.channels
    c8, c4 = C // 8, C // 4
    tw = config.temporal_width if config.propagates else 0
    rows = [
        ("seg.down1.conv1", 3, 1, c8, "relu"),
        ("seg.down1.conv2", 3, c8, c8, "relu"),
        ("seg.down2.conv1", 3, c8, c4, "relu"),
        ("seg.down2.conv2", 3, c4, c4, "relu"),
        ("seg.down3.conv1", 3, c4, C, "relu"),
        ("seg.down3.conv2", 3, C, C, "relu"),
        ("seg.bottleneck.conv1", 3, C, C, "relu"),
        ("seg.bottleneck.conv2", 3, C, C, "relu"),
        ("seg.up1.conv1", 3, C + tw, c4, "relu"),
        ("seg.up1.conv2", 3, c4, c4, "relu"),
        ("seg.up2.conv1", 3, c4 + tw, c8, "relu"),
        ("seg.up2.conv2", 3, c8, c8, "relu"),
        ("seg.up3.conv1", 3, c8 + tw, c8, "relu"),
        ("seg.up3.conv2", 3, c8, c8, "relu"),
        ("seg.head", 3, c8, config.classes, "softmax"),
    ]
    if config.has_encoder:
        rows += [(f"vel.enc.stage{i}", 3, 1 if i == 1 else c8, c8, "relu") for i in range(1, 5)]
    if config.has_decoder:
        cin = config.temporal_width + (config.classes if config.feeds_back else 0)
        rows += [
            ("vel.dec.conv1", 3, cin, c8, "relu"),
            ("vel.dec.conv2", 3, c8, c8, "relu"),
            ("vel.dec.conv3", 3, c8, c8, "relu"),
            ("vel.head", 1, c8, config.velocity_dims, "linear"),
        ]
    return rows


def param_count(config):
    return sum(k * k * cin * cout + cout for _, k, cin, cout, _ in layer_table(config))


class ModelParams(dict):
    """``{"<layer>.weight" | "<layer>.bias": Tensor}`` in layer-table order."""

    def num_scalars(self):
        return sum(t.data.size for t in self.values())

    def layers(self):
        return sorted({name.rsplit(".", 1)[0] for name in self})

    def astype(self, dtype):
        return ModelParams((k, tc.Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.items())

    def copy(self):
        return ModelParams((k, tc.Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    def arrays(self):
        return {k: v.data for k, v in self.items()}

    def zero_grad(self):
        for t in self.values():
            t.grad = None


def build(config, seed=0, dtype=np.float32):
    """Fan-in scaled uniform weights, zero biases; deterministic in ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, k, cin, cout, act in layer_table(config):
        fan_in = k * k * cin
        bound = np.sqrt((6.0 if act == "relu" else 3.0) / fan_in)
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype)
        params[f"{name}.weight"] = tc.Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = tc.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return params


def _conv(params, name, x, act="relu"):
    y = tc.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])
    return tc.relu(y) if act == "relu" else y


def encode_frame(enc, frame):
    """Shared per-frame encoder: h x w x 1 -> h x w/16 x C/8."""
    x = frame
    for i in range(1, 5):
        x = _conv(enc, f"vel.enc.stage{i}", x)
        x, _ = tc.maxpool_w(x)
    return x


def _as_window(config, window):
    if isinstance(window, (list, tuple)) and window and isinstance(window[0], RangeImage):
        window = np.stack([img.normalized() for img in window])
    window = np.asarray(window)
    if window.ndim != 3 or window.shape[0] != config.frames:
        raise UsageError(f"window must hold {config.frames} frames of shape (h, w), got {window.shape}")
    if window.shape[1:] != (config.height, config.width):
        raise UsageError(f"frames are {window.shape[1:]}, network expects {(config.height, config.width)}")
    return window


def forward(params, config, window, untied_encoders=None):
    """Label probabilities (h, w, classes) and velocity map (h, w, m) or None.

    ``window`` holds frames ``t-n+1 .. t`` (normalised ranges, oldest first).
    ``untied_encoders`` optionally supplies one encoder parameter dict per
    frame in place of the shared one (used to verify weight tying).
    """
    window = _as_window(config, window)
    dtype = params["seg.head.weight"].dtype
    frames = [tc.Tensor(f[..., None].astype(dtype)) for f in window]

    temporal = None
    if config.has_encoder:
        feats = []
        for k, f in enumerate(frames):
            enc = params if untied_encoders is None else untied_encoders[k]
            feats.append(encode_frame(enc, f))
        temporal = tc.concat_channels(feats)

    x = frames[-1]
    skips = []
    for stage in (1, 2, 3):
        x = _conv(params, f"seg.down{stage}.conv1", x)
        x = _conv(params, f"seg.down{stage}.conv2", x)
        skips.append(x)
        x, _ = tc.maxpool_w(x)
    x = _conv(params, "seg.bottleneck.conv1", x)
    x = _conv(params, "seg.bottleneck.conv2", x)
    for stage, skip, factor in zip((1, 2, 3), reversed(skips), (4, 8, 16)):
        x = tc.add(tc.upsample_w(x, 2), skip)
        if config.propagates:
            x = tc.concat_channels([x, tc.upsample_w(temporal, factor)])
        x = _conv(params, f"seg.up{stage}.conv1", x)
        x = _conv(params, f"seg.up{stage}.conv2", x)
    probs = tc.softmax_pixels(_conv(params, "seg.head", x, act=None))

    velocity = None
    if config.has_decoder:
        v = tc.upsample_w(temporal, 16)
        if config.feeds_back:
            v = tc.concat_channels([v, probs])
        for i in (1, 2, 3):
            v = _conv(params, f"vel.dec.conv{i}", v)
        velocity = _conv(params, "vel.head", v, act=None)
    return probs, velocity


def predict(params, config, window):
    """Inference-only forward returning numpy arrays."""
    with tc.no_grad():
        probs, vel = forward(params, config, window)
    return probs.data, (None if vel is None else vel.data)
