"""Joint optimisation of both branches.

The loss per supervised frame is

    lambda_c / N_c * sum_valid CE  +  lambda_h / N_h * sum_human |v_hat - v|^2
                                   +  lambda_b / N_b * sum_bg    |v_hat - v|^2

with defected pixels excluded everywhere and any term whose pixel count is
zero dropped.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network
from . import tensorcore as tc
from .errors import ConfigurationError, FormatError, TrainingError
from .projection import LABEL_BACKGROUND, LABEL_DEFECT, LABEL_HUMAN

log = logging.getLogger(__name__)

CE_FLOOR = 1e-12
METRICS_HEADER = "epoch,step,lr,loss_total,loss_ce,loss_vh,loss_vb,train_iou"


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1e5
    lambda_h: float = 1.0
    lambda_b: float = 1001.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_h, self.lambda_b) < 0:
            raise ConfigurationError(f"loss weights must be nonnegative: {self}")

    def swapped(self):
        """Exchange the human and background velocity weights."""
        return replace(self, lambda_h=self.lambda_b, lambda_b=self.lambda_h)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    decay: float = 3e-5
    batch_size: int = 1
    steps_per_epoch: int = 250
    epochs: int = 30
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    swap_velocity_weights: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0   # epochs; 0 keeps only the final checkpoint

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.learning_rate <= 0 or self.decay < 0:
            raise ConfigurationError("learning_rate must be positive and decay nonnegative")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size and steps_per_epoch must be >= 1, epochs >= 0")

    @property
    def loss_weights(self):
        return self.weights.swapped() if self.swap_velocity_weights else self.weights

    def lr_at(self, step):
        """Inverse-time decay: lr0 / (1 + decay * step)."""
        return self.learning_rate / (1.0 + self.decay * step)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FrameTruth:
    labels: np.ndarray      # (h, w) uint8: 0 background, 1 human, 255 defected
    velocity: np.ndarray    # (h, w, 2)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def total_loss(pred_labels, pred_vel, truth, weights=LossWeights()):
    """Scalar loss tensor plus a breakdown dict.

    The breakdown holds the weighted ``total`` and the unweighted per-pixel
    means ``ce``, ``vh`` and ``vb`` (NaN where a term has no pixels).
    """
    labels = np.asarray(truth.labels)
    pl = tc._as_tensor(pred_labels)
    if pl.shape[:2] != labels.shape or pl.data.ndim != 3:
        raise ConfigurationError(f"label probabilities {pl.shape} do not match truth {labels.shape}")
    if np.isnan(pl.data).any():
        raise TrainingError("NaN in pred_labels")
    pv = None
    if pred_vel is not None:
        pv = tc._as_tensor(pred_vel)
        if pv.shape != labels.shape + (2,):
            raise ConfigurationError(f"velocity map {pv.shape} does not match truth {labels.shape}")
        if np.isnan(pv.data).any():
            raise TrainingError("NaN in pred_vel")
    true_v = np.asarray(truth.velocity, dtype=np.float64)
    if np.isnan(true_v[labels != LABEL_DEFECT]).any():
        raise TrainingError("NaN in truth velocity")

    valid = labels != LABEL_DEFECT
    human = labels == LABEL_HUMAN
    bg = labels == LABEL_BACKGROUND
    n_c, n_h, n_b = int(valid.sum()), int(human.sum()), int(bg.sum())

    probs = pl.data.astype(np.float64)
    cls = np.where(valid, labels, 0).astype(np.int64)
    p_true = np.take_along_axis(probs, cls[..., None], axis=-1)[..., 0]
    clamped = np.maximum(p_true, CE_FLOOR)

    total = 0.0
    parts = {"ce": float("nan"), "vh": float("nan"), "vb": float("nan")}
    g_probs = np.zeros_like(probs)
    if n_c:
        ce = -np.log(clamped[valid]).sum()
        parts["ce"] = ce / n_c
        total += weights.lambda_c * ce / n_c
        scale = weights.lambda_c / n_c
        g = np.where(valid & (p_true > CE_FLOOR), -scale / clamped, 0.0)
        np.put_along_axis(g_probs, cls[..., None], g[..., None], axis=-1)

    g_vel = None
    if pv is not None:
        diff = pv.data.astype(np.float64) - true_v
        sq = (diff * diff).sum(axis=-1)
        g_vel = np.zeros_like(diff)
        for key, mask, count, lam in (("vh", human, n_h, weights.lambda_h), ("vb", bg, n_b, weights.lambda_b)):
            if not count:
                continue
            s = sq[mask].sum()
            parts[key] = s / count
            total += lam * s / count
            g_vel[mask] = 2.0 * lam / count * diff[mask]

    parents = (pl,) if pv is None else (pl, pv)
    dtype = pl.data.dtype

    def backward(gout):
        gs = float(gout)
        if pl.requires_grad:
            pl._accumulate((gs * g_probs).astype(dtype))
        if pv is not None and pv.requires_grad:
            pv._accumulate((gs * g_vel).astype(pv.data.dtype))

    out = tc._result(np.asarray(total, dtype=dtype), parents, backward)
    parts["total"] = float(total)
    return out, parts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def adam_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".adam" + path.suffix)


def config_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".json")


def save_checkpoint(params, state, path, net_config=None):
    """Write parameters (and, if given, Adam state to the sibling ``.adam`` file)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tc.write_records(path, [(name, t.data) for name, t in params.items()])
    if state is not None:
        records = [
            ("adam.step", tc.pack_f64(state.step)),
            ("adam.lr", tc.pack_f64(state.lr)),
            ("adam.beta1", tc.pack_f64(state.beta1)),
            ("adam.beta2", tc.pack_f64(state.beta2)),
            ("adam.eps", tc.pack_f64(state.eps)),
        ]
        records += [(f"m/{name}", state.m[name]) for name in params]
        records += [(f"v/{name}", state.v[name]) for name in params]
        tc.write_records(adam_path(path), records)
    if net_config is not None:
        config_path(path).write_text(json.dumps(net_config.to_dict(), indent=1))


def load_checkpoint(path, with_state=True):
    """Return ``(params, adam_state_or_None, net_config_or_None)``."""
    path = Path(path)
    records = tc.read_records(path)
    params = network.ModelParams(
        (name, tc.Tensor(arr, requires_grad=True, name=name)) for name, arr in records.items())
    state = None
    apath = adam_path(path)
    if with_state and apath.exists():
        raw = tc.read_records(apath)
        try:
            state = tc.AdamState(
                lr=tc.unpack_f64(raw["adam.lr"]), beta1=tc.unpack_f64(raw["adam.beta1"]),
                beta2=tc.unpack_f64(raw["adam.beta2"]), eps=tc.unpack_f64(raw["adam.eps"]),
                step=int(tc.unpack_f64(raw["adam.step"])))
            for name in params:
                state.m[name] = raw[f"m/{name}"]
                state.v[name] = raw[f"v/{name}"]
        except KeyError as exc:
            raise FormatError(f"{apath}: missing record {exc}") from None
    cpath = config_path(path)
    net_config = network.NetworkConfig.from_dict(json.loads(cpath.read_text())) if cpath.exists() else None
    return params, state, net_config


def check_compatible(params, net_config):
    """Raise :class:`FormatError` unless ``params`` matches ``net_config``'s layer table."""
    want = {}
    for name, k, cin, cout, _ in network.layer_table(net_config):
        want[f"{name}.weight"] = (k, k, cin, cout)
        want[f"{name}.bias"] = (cout,)
    missing = sorted(set(want) - set(params))
    extra = sorted(set(params) - set(want))
    wrong = sorted(n for n in set(want) & set(params) if tuple(params[n].shape) != want[n])
    if missing or extra or wrong:
        raise FormatError(f"checkpoint incompatible with network config: missing={missing} "
                          f"extra={extra} wrong_shape={wrong}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: network.ModelParams
    state: tc.AdamState
    metrics: list
    skipped: int = 0
    best_val_iou: float = None
    best_epoch: int = None


def _usable(dataset, n):
    return [s for s in dataset if len(s) >= n]


def sample_window(dataset, n, seed, step):
    """Uniform (sequence, end frame) choice, a pure function of ``(seed, step)``."""
    rng = np.random.default_rng([seed, step])
    seq = dataset[int(rng.integers(len(dataset)))]
    end = int(rng.integers(n - 1, len(seq)))
    return seq, end


def train_step(params, net_config, train_config, state, windows):
    """One optimiser step over ``windows`` (list of ``(sequence, end)``)."""
    weights = train_config.loss_weights
    params.zero_grad()
    parts_sum = {"total": 0.0, "ce": [], "vh": [], "vb": []}
    counts = np.zeros(3, dtype=np.int64)
    for seq, end in windows:
        probs, vel = network.forward(params, net_config, seq.window(end, net_config.frames))
        truth = FrameTruth(seq.labels[end], seq.velocity[end])
        loss, parts = total_loss(probs, vel, truth, weights)
        if not np.isfinite(parts["total"]):
            raise TrainingError(f"non-finite loss at step {state.step}")
        loss.backward()
        parts_sum["total"] += parts["total"]
        for k in ("ce", "vh", "vb"):
            if not np.isnan(parts[k]):
                parts_sum[k].append(parts[k])
        counts += _confusion(probs.data, truth.labels)
    scale = 1.0 / len(windows)
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        grads[name] = g * np.asarray(scale, dtype=g.dtype) if len(windows) > 1 else g
    lr = train_config.lr_at(state.step)
    tc.adam_step(params, grads, state, lr=lr)
    params.zero_grad()
    return parts_sum, counts, lr


def _confusion(probs, labels):
    valid = labels != LABEL_DEFECT
    pred = probs.argmax(axis=-1) == LABEL_HUMAN
    truth = labels == LABEL_HUMAN
    return np.array([(pred & truth & valid).sum(), (pred & ~truth & valid).sum(),
                     (~pred & truth & valid).sum()], dtype=np.int64)


def _iou(counts):
    denom = int(counts.sum())
    return float("nan") if denom == 0 else counts[0] / denom


def train(dataset, net_config, train_config, out_dir=None, val_dataset=None, resume=None,
          init_params=None, eval_fn=None):
    """Optimise a fresh (or resumed) model on ``dataset``.

    Writes ``checkpoint.lsqw`` (+ ``.adam``), ``metrics.csv`` and, with
    ``checkpoint_every``, periodic ``epoch_XXXX.lsqw`` files into ``out_dir``.
    When ``val_dataset`` is given the periodic checkpoint with the best
    validation IoU is also kept as ``best.lsqw``.
    """
    n = net_config.frames
    usable = _usable(dataset, n)
    skipped = len(dataset) - len(usable)
    if skipped:
        log.warning("skipping %d sequence(s) shorter than %d frames", skipped, n)
    if not usable:
        raise TrainingError(f"no sequence has at least {n} frames")

    if resume is not None:
        params, state, _ = load_checkpoint(resume)
        if state is None:
            raise FormatError(f"{resume}: no Adam state next to the checkpoint, cannot resume")
        check_compatible(params, net_config)
    else:
        params = init_params.copy() if init_params is not None else network.build(net_config, train_config.seed)
        state = tc.AdamState.for_params(params, lr=train_config.learning_rate, beta1=train_config.beta1,
                                        beta2=train_config.beta2, eps=train_config.eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.csv"
        fresh = resume is None or not mpath.exists()
        metrics_file = open(mpath, "w" if fresh else "a")
        if fresh:
            metrics_file.write(METRICS_HEADER + "\n")
        metrics_file.write(f"# skipped_short_sequences={skipped}\n")

    metrics = []
    best_iou, best_epoch = None, None
    spe = train_config.steps_per_epoch
    total_steps = train_config.epochs * spe
    try:
        while state.step < total_steps:
            epoch = state.step // spe
            acc = {"total": 0.0, "ce": [], "vh": [], "vb": []}
            counts = np.zeros(3, dtype=np.int64)
            lr = train_config.lr_at(state.step)
            while state.step < (epoch + 1) * spe:
                windows = [sample_window(usable, n, train_config.seed, state.step * train_config.batch_size + b)
                           for b in range(train_config.batch_size)]
                parts, c, lr = train_step(params, net_config, train_config, state, windows)
                acc["total"] += parts["total"]
                for k in ("ce", "vh", "vb"):
                    acc[k] += parts[k]
                counts += c
            steps_done = spe * train_config.batch_size
            row = {
                "epoch": epoch + 1, "step": state.step, "lr": lr,
                "loss_total": acc["total"] / steps_done,
                "loss_ce": float(np.mean(acc["ce"])) if acc["ce"] else float("nan"),
                "loss_vh": float(np.mean(acc["vh"])) if acc["vh"] else float("nan"),
                "loss_vb": float(np.mean(acc["vb"])) if acc["vb"] else float("nan"),
                "train_iou": _iou(counts),
            }
            metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(",".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k])
                                            for k in METRICS_HEADER.split(",")) + "\n")
                metrics_file.flush()
            log.info("epoch %d step %d loss %.5g ce %.4g iou %.4f", row["epoch"], row["step"],
                     row["loss_total"], row["loss_ce"], row["train_iou"])
            every = train_config.checkpoint_every
            if out_dir is not None and every and (epoch + 1) % every == 0:
                save_checkpoint(params, state, out_dir / f"epoch_{epoch + 1:04d}.lsqw", net_config)
                if val_dataset and eval_fn is not None:
                    val_iou = eval_fn(params, net_config, val_dataset)
                    if val_iou == val_iou and (best_iou is None or val_iou > best_iou):
                        best_iou, best_epoch = val_iou, epoch + 1
                        save_checkpoint(params, state, out_dir / "best.lsqw", net_config)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(params, state, out_dir / "checkpoint.lsqw", net_config)
    return TrainResult(params, state, metrics, skipped, best_iou, best_epoch)


def load_json_config(path, cls):
    return cls.from_dict(json.loads(Path(path).read_text()))
