"""Range-bucketed human IoU, ablation sweeps, runtime and prediction export.

IoU is pooled: confusion counts are summed over every evaluated frame first
and divided once.  A pixel takes part in a bucket when it is not defected
and its ground-truth range lies in ``[lower, upper)``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network, training
from .errors import UsageError
from .projection import (
    LABEL_DEFECT, LABEL_HUMAN, RangeImage, backproject, write_label_map, write_velocity_map,
)

log = logging.getLogger(__name__)

# error-category image codes
ERR_TP, ERR_TN, ERR_FP, ERR_FN = 0, 1, 2, 3
ERR_COLORS = {ERR_TP: (255, 255, 255), ERR_TN: (0, 0, 0), ERR_FP: (255, 0, 0), ERR_FN: (255, 255, 0)}


@dataclass(frozen=True)
class RangeBucket:
    lower: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise UsageError(f"empty range bucket [{self.lower}, {self.upper})")

    @property
    def label(self):
        up = "inf" if math.isinf(self.upper) else f"{self.upper:g}"
        return f"{self.lower:g}-{up}"

    def contains(self, ranges):
        return (ranges >= self.lower) & (ranges < self.upper)


DEFAULT_BUCKETS = (RangeBucket(0, math.inf), RangeBucket(0, 4), RangeBucket(4, 8), RangeBucket(8, math.inf))


def parse_buckets(text):
    """``"0:4,4:8,8:inf"`` -> buckets; the 0-inf bucket is always included first."""
    out = [RangeBucket(0, math.inf)]
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, hi = part.split(":")
        b = RangeBucket(float(lo), math.inf if hi.strip().lower() in ("inf", "") else float(hi))
        if b not in out:
            out.append(b)
    return tuple(out)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @property
    def iou(self):
        """TP / (TP + FP + FN), or None when the denominator is zero."""
        denom = self.tp + self.fp + self.fn
        return None if denom == 0 else self.tp / denom


def predicted_labels(pred):
    pred = np.asarray(pred)
    return pred.argmax(axis=-1) if pred.ndim == 3 else pred


def iou(pred, truth, bucket, ranges):
    """Human IoU of one frame restricted to ``bucket``.

    ``pred`` is either (h, w, k) probabilities or an (h, w) label map;
    ``truth`` has a ``labels`` attribute or is the label map itself;
    ``ranges`` is the ground-truth :class:`RangeImage` or range array.
    """
    labels = np.asarray(getattr(truth, "labels", truth))
    rng = np.asarray(ranges.ranges if isinstance(ranges, RangeImage) else ranges)
    pl = predicted_labels(pred)
    if pl.shape != labels.shape or rng.shape != labels.shape:
        raise UsageError(f"shape mismatch: prediction {pl.shape}, truth {labels.shape}, ranges {rng.shape}")
    part = (labels != LABEL_DEFECT) & bucket.contains(rng)
    p = pl == LABEL_HUMAN
    t = labels == LABEL_HUMAN
    counts = ConfusionCounts(int((p & t & part).sum()), int((p & ~t & part).sum()),
                             int((~p & t & part).sum()), int((~p & ~t & part).sum()))
    return counts.iou, counts


@dataclass
class EvalReport:
    buckets: tuple
    counts: dict                      # bucket label -> ConfusionCounts
    velocity_error_human: float = None
    velocity_error_background: float = None
    zero_velocity_error_human: float = None
    zero_velocity_error_background: float = None
    windows: int = 0
    seconds_per_window: float = None  # wall clock, excluded from rows()

    def iou(self, bucket=None):
        label = (bucket or self.buckets[0]).label if not isinstance(bucket, str) else bucket
        return self.counts[label].iou

    @property
    def overall_iou(self):
        return self.iou(RangeBucket(0, math.inf))

    def rows(self):
        out = []
        for b in self.buckets:
            c = self.counts[b.label]
            out.append({"bucket": b.label, "iou": _fmt(c.iou), "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn})
        return out

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["bucket", "iou", "tp", "fp", "fn", "tn"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        for key in ("velocity_error_human", "velocity_error_background",
                    "zero_velocity_error_human", "zero_velocity_error_background"):
            buf.write(f"# {key},{_fmt(getattr(self, key))}\n")
        buf.write(f"# windows,{self.windows}\n")
        return buf.getvalue()


def _fmt(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.6f}"


def evaluation_windows(dataset, n, first_target=None):
    """``(sequence, end)`` pairs supervising every frame from ``first_target`` on."""
    start = n - 1 if first_target is None else max(first_target, n - 1)
    return [(seq, end) for seq in dataset for end in range(start, len(seq))]


def evaluate(params, net_config, dataset, buckets=DEFAULT_BUCKETS, first_target=None, predictor=None):
    """Pooled IoU per bucket and mean velocity errors over a dataset split.

    ``predictor(seq, end) -> (probs_or_labels, velocity_or_None)`` replaces the
    network (baselines, ground-truth checks); otherwise ``params`` must match
    ``net_config``.
    """
    if predictor is None:
        training.check_compatible(params, net_config)

        def predictor(seq, end):
            return network.predict(params, net_config, seq.window(end, net_config.frames))

    if RangeBucket(0, math.inf) not in buckets:
        buckets = (RangeBucket(0, math.inf),) + tuple(buckets)
    counts = {b.label: ConfusionCounts() for b in buckets}
    verr = {"h": [0.0, 0], "b": [0.0, 0], "zh": [0.0, 0], "zb": [0.0, 0]}
    has_velocity = False
    elapsed = 0.0
    windows = evaluation_windows(dataset, net_config.frames, first_target)
    for seq, end in windows:
        t0 = time.perf_counter()
        pred, vel = predictor(seq, end)
        elapsed += time.perf_counter() - t0
        labels = seq.labels[end]
        for b in buckets:
            counts[b.label] += iou(pred, labels, b, seq.ranges[end])[1]
        truth_v = seq.velocity[end].astype(np.float64)
        for key, mask in (("h", labels == LABEL_HUMAN), ("b", labels == 0)):
            if not mask.any():
                continue
            verr["z" + key][0] += float(np.linalg.norm(truth_v[mask], axis=-1).sum())
            verr["z" + key][1] += int(mask.sum())
            if vel is not None:
                has_velocity = True
                verr[key][0] += float(np.linalg.norm(vel.astype(np.float64)[mask] - truth_v[mask], axis=-1).sum())
                verr[key][1] += int(mask.sum())

    def mean(key):
        s, c = verr[key]
        return s / c if c else None

    return EvalReport(
        buckets=tuple(buckets), counts=counts,
        velocity_error_human=mean("h") if has_velocity else None,
        velocity_error_background=mean("b") if has_velocity else None,
        zero_velocity_error_human=mean("zh"), zero_velocity_error_background=mean("zb"),
        windows=len(windows), seconds_per_window=elapsed / len(windows) if windows else None,
    )


def pooled_iou(params, net_config, dataset, first_target=None):
    """Overall IoU only (validation-based checkpoint selection); NaN when undefined."""
    report = evaluate(params, net_config, dataset, (RangeBucket(0, math.inf),), first_target)
    value = report.overall_iou
    return float("nan") if value is None else value


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# component grid columns: (name, velocity head, temporal propagation)
COMPONENT_VARIANTS = (
    ("no-velocity", False, True),
    ("no-propagation", True, False),
    ("full", True, True),
)
FRAME_SWEEP = (1, 2, 4, 8, 16)


@dataclass
class CellResult:
    column: str
    seed: int
    report: EvalReport


@dataclass
class AblationTable:
    title: str
    columns: list
    buckets: tuple
    cells: list = field(default_factory=list)

    def values(self, column, bucket_label):
        out = []
        for c in self.cells:
            if c.column == column:
                v = c.report.iou(bucket_label)
                out.append(float("nan") if v is None else v)
        return np.array(out, dtype=np.float64)

    def mean(self, column, bucket_label=None):
        v = self.values(column, bucket_label or self.buckets[0].label)
        v = v[~np.isnan(v)]
        return float(v.mean()) if v.size else float("nan")

    def spread(self, column, bucket_label=None):
        v = self.values(column, bucket_label or self.buckets[0].label)
        v = v[~np.isnan(v)]
        return float((v.max() - v.min()) / 2) if v.size else float("nan")

    def velocity_ratio(self, column):
        """Mean over seeds of (model human velocity error / zero predictor error)."""
        r = [c.report.velocity_error_human / c.report.zero_velocity_error_human
             for c in self.cells if c.column == column and c.report.velocity_error_human is not None
             and c.report.zero_velocity_error_human]
        return float(np.mean(r)) if r else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# {self.title}\n")
        buf.write("range," + ",".join(self.columns) + "\n")
        for b in self.buckets:
            cells = []
            for col in self.columns:
                m, s = self.mean(col, b.label), self.spread(col, b.label)
                cells.append("n/a" if math.isnan(m) else f"{100 * m:.2f}+-{100 * s:.2f}")
            buf.write(b.label + "," + ",".join(cells) + "\n")
        buf.write("# per-seed overall IoU\n")
        for c in self.cells:
            buf.write(f"# {c.column},seed={c.seed},{_fmt(c.report.overall_iou)}\n")
        return buf.getvalue()


def _run_cell(train_set, test_set, net_config, train_config, seed, buckets, first_target):
    tcfg = replace(train_config, seed=seed)
    result = training.train(train_set, net_config, tcfg)
    return evaluate(result.params, net_config, test_set, buckets, first_target)


def ablate(train_set, test_set, base_net, train_config, seeds=(0, 1, 2), buckets=DEFAULT_BUCKETS,
           frame_sweep=FRAME_SWEEP, component_frames=4, tables=("components", "frames"), cache=None):
    """Train and evaluate the component grid and the frame-count sweep.

    Returns ``{"components": AblationTable, "frames": AblationTable}``.  Every
    cell evaluates the same target frames (those reachable by the longest
    window in the sweep) so columns are comparable.  ``cache`` maps
    ``(NetworkConfig, seed)`` to reports and lets the two tables share runs.
    """
    cache = {} if cache is None else cache
    longest = max([component_frames] + list(frame_sweep))
    first_target = longest - 1

    def run(ncfg, seed):
        key = (ncfg, seed)
        if key not in cache:
            log.info("ablation cell frames=%d vel=%s prop=%s seed=%d", ncfg.frames,
                     ncfg.velocity_head_enabled, ncfg.temporal_propagation_enabled, seed)
            cache[key] = _run_cell(train_set, test_set, ncfg, train_config, seed, buckets, first_target)
        return cache[key]

    out = {}
    if "components" in tables:
        table = AblationTable(f"human IoU (%) by component, frames={component_frames}",
                              [name for name, _, _ in COMPONENT_VARIANTS], tuple(buckets))
        for name, vel, prop in COMPONENT_VARIANTS:
            ncfg = replace(base_net, frames=component_frames, velocity_head_enabled=vel,
                           temporal_propagation_enabled=prop)
            for seed in seeds:
                table.cells.append(CellResult(name, seed, run(ncfg, seed)))
        out["components"] = table
    if "frames" in tables:
        table = AblationTable("human IoU (%) by number of input frames", [str(n) for n in frame_sweep],
                              tuple(buckets))
        for n in frame_sweep:
            ncfg = replace(base_net, frames=n, velocity_head_enabled=True, temporal_propagation_enabled=True)
            for seed in seeds:
                table.cells.append(CellResult(str(n), seed, run(ncfg, seed)))
        out["frames"] = table
    return out


def plot_frame_sweep(table, path):
    """IoU-vs-frames line plot (needs matplotlib)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frames = [int(c) for c in table.columns]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for b in table.buckets:
        means = [100 * table.mean(c, b.label) for c in table.columns]
        spreads = [100 * table.spread(c, b.label) for c in table.columns]
        ax.errorbar(frames, means, yerr=spreads, marker="o", capsize=3, label=b.label + " m")
    ax.set_xscale("log", base=2)
    ax.set_xticks(frames, [str(f) for f in frames])
    ax.set_xlabel("input frames")
    ax.set_ylabel("human IoU (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# runtime and export
# ---------------------------------------------------------------------------

WARMUP_RUNS = 3


def measure_runtime(params, net_config, repetitions=50, window=None, seed=0):
    """Median and p90 wall-clock milliseconds per window (warm-up excluded)."""
    if repetitions < 10:
        raise UsageError(f"repetitions must be >= 10, got {repetitions}")
    if window is None:
        rng = np.random.default_rng(seed)
        window = rng.uniform(0.0, 0.2, size=(net_config.frames, net_config.height, net_config.width))
        window = window.astype(np.float32)
    for _ in range(WARMUP_RUNS):
        network.predict(params, net_config, window)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        network.predict(params, net_config, window)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    return {"median_ms": float(np.median(times)), "p90_ms": float(np.percentile(times, 90)),
            "runs": len(times), "warmup": WARMUP_RUNS}


def error_categories(pred_labels, truth_labels):
    """TP/TN/FP/FN codes per pixel; defected pixels get the defect code."""
    p = pred_labels == LABEL_HUMAN
    t = truth_labels == LABEL_HUMAN
    out = np.where(p & t, ERR_TP, np.where(~p & ~t, ERR_TN, np.where(p, ERR_FP, ERR_FN)))
    return np.where(truth_labels == LABEL_DEFECT, LABEL_DEFECT, out).astype(np.uint8)


def export_prediction(params, net_config, seq, end, out_dir):
    """Write predicted label/velocity maps, a labelled point list and error categories.

    Files: ``pred.rlbl``, ``pred.rvel`` (only with a velocity head),
    ``points.txt`` (``x y z label`` per valid pixel), ``errors.rlbl`` and
    ``errors.png`` (when matplotlib is available).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sensor = seq.sensor
    probs, vel = network.predict(params, net_config, seq.window(end, net_config.frames))
    image = RangeImage(sensor, seq.ranges[end])
    defect = image.defect_mask
    pred = np.where(defect, LABEL_DEFECT, predicted_labels(probs)).astype(np.uint8)
    written = {}
    write_label_map(out_dir / "pred.rlbl", sensor, pred)
    written["labels"] = out_dir / "pred.rlbl"
    if vel is not None:
        write_velocity_map(out_dir / "pred.rvel", sensor, np.where(defect[..., None], 0, vel))
        written["velocity"] = out_dir / "pred.rvel"
    pts, rows, cols = backproject(image, with_pixels=True)
    with open(out_dir / "points.txt", "w") as fh:
        fh.write("# x y z label\n")
        for (x, y, z), r, c in zip(pts, rows, cols):
            fh.write(f"{x:.4f} {y:.4f} {z:.4f} {pred[r, c]}\n")
    written["points"] = out_dir / "points.txt"
    cats = error_categories(pred, seq.labels[end])
    write_label_map(out_dir / "errors.rlbl", sensor, cats)
    written["errors"] = out_dir / "errors.rlbl"
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return written
    rgb = np.full(cats.shape + (3,), 128, dtype=np.uint8)
    for code, color in ERR_COLORS.items():
        rgb[cats == code] = color
    plt.imsave(out_dir / "errors.png", np.repeat(rgb, 4, axis=0))
    written["errors_png"] = out_dir / "errors.png"
    return written
