import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarseq import datagen as dg, evalharness as ev, network as nw, projection as pj
from lidarseq.errors import FormatError, UsageError

import oracles

SENSOR = pj.SensorModel(rows=8, cols=32, max_range=16)
NET = nw.NetworkConfig(frames=2, height=8, width=32, channels=8)


@pytest.fixture(scope="module")
def data():
    cfg = dg.SceneConfig(sensor=SENSOR, room_half_extents=(6, 6), frames=4, human_count=(2, 4))
    return dg.generate_split(cfg, 3, 9)


def random_frame(rng, h=6, w=10):
    labels = rng.choice([0, 1, 255], p=[0.6, 0.3, 0.1], size=(h, w)).astype(np.uint8)
    ranges = rng.uniform(0.5, 12, size=(h, w)).astype(np.float32)
    pred = rng.choice([0, 1], size=(h, w))
    return pred, labels, ranges


def test_hand_case_is_one_half():
    # 5 TP, 3 FP, 2 FN, 2 TN laid out in a row
    pred = np.array([[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0]])
    truth = np.array([[1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0]], np.uint8)
    value, counts = ev.iou(pred, truth, ev.RangeBucket(), np.ones((1, 12)))
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (5, 3, 2, 2)
    assert value == 0.5


def test_perfect_and_empty_cases():
    truth = np.array([[1, 0], [255, 1]], np.uint8)
    assert ev.iou(truth, truth, ev.RangeBucket(), np.ones((2, 2)))[0] == 1.0
    assert ev.iou(np.zeros((2, 2)), np.zeros((2, 2), np.uint8), ev.RangeBucket(), np.ones((2, 2)))[0] is None


def test_probability_maps_are_argmaxed():
    probs = np.array([[[0.2, 0.8], [0.9, 0.1]]])
    truth = np.array([[1, 0]], np.uint8)
    assert ev.iou(probs, truth, ev.RangeBucket(), np.ones((1, 2)))[0] == 1.0


def test_shape_mismatch():
    with pytest.raises(UsageError):
        ev.iou(np.zeros((2, 2)), np.zeros((2, 3), np.uint8), ev.RangeBucket(), np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_iou_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, labels, ranges = random_frame(rng)
    for bucket in ev.DEFAULT_BUCKETS:
        _, c = ev.iou(pred, labels, bucket, ranges)
        assert (c.tp, c.fp, c.fn, c.tn) == oracles.count_confusion(pred, labels, ranges, bucket.lower, bucket.upper)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cut=st.floats(0.1, 20))
def test_bucket_additivity_and_bounds(seed, cut):
    pred, labels, ranges = random_frame(np.random.default_rng(seed))
    whole = ev.iou(pred, labels, ev.RangeBucket(), ranges)[1]
    lo = ev.iou(pred, labels, ev.RangeBucket(0, cut), ranges)[1]
    hi = ev.iou(pred, labels, ev.RangeBucket(cut, math.inf), ranges)[1]
    assert lo + hi == whole
    for c in (whole, lo, hi):
        assert c.iou is None or 0.0 <= c.iou <= 1.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100))
def test_argmax_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    _, labels, ranges = random_frame(rng)
    probs = rng.dirichlet([1, 1], size=labels.shape)
    a = ev.iou(probs, labels, ev.RangeBucket(), ranges)[1]
    b = ev.iou(probs * scale, labels, ev.RangeBucket(), ranges)[1]
    assert a == b


def test_bucket_parsing_and_labels():
    buckets = ev.parse_buckets("0:4,4:8,8:inf")
    assert [b.label for b in buckets] == ["0-inf", "0-4", "4-8", "8-inf"]
    assert buckets == ev.DEFAULT_BUCKETS
    with pytest.raises(UsageError):
        ev.RangeBucket(4, 4)


def test_ground_truth_predictor_scores_one(data):
    report = ev.evaluate(None, NET, data, predictor=lambda s, e: (s.labels[e], s.velocity[e]))
    for b in report.buckets:
        assert report.iou(b) in (1.0, None)
    assert report.overall_iou == 1.0
    assert report.velocity_error_human == 0.0 and report.velocity_error_background == 0.0


def test_background_predictor_scores_zero(data):
    report = ev.evaluate(None, NET, data, predictor=lambda s, e: (np.zeros_like(s.labels[e]), None))
    assert report.overall_iou == 0.0
    assert report.velocity_error_human is None
    assert report.zero_velocity_error_human > 0


def test_evaluate_pools_and_adds_up(data):
    params = nw.build(NET, 1)
    buckets = (ev.RangeBucket(), ev.RangeBucket(0, 4), ev.RangeBucket(4, math.inf))
    report = ev.evaluate(params, NET, data, buckets)
    assert report.counts["0-4"] + report.counts["4-inf"] == report.counts["0-inf"]
    assert report.windows == sum(len(s) - 1 for s in data)
    manual = ev.ConfusionCounts()
    for seq in data:
        for end in range(1, len(seq)):
            probs, _ = nw.predict(params, NET, seq.window(end, 2))
            manual += ev.iou(probs, seq.labels[end], ev.RangeBucket(), seq.ranges[end])[1]
    assert manual == report.counts["0-inf"]
    assert ev.evaluate(params, NET, data, buckets).rows() == report.rows()


def test_evaluate_rejects_incompatible_params(data):
    with pytest.raises(FormatError):
        ev.evaluate(nw.build(nw.NetworkConfig(frames=1, height=8, width=32, channels=8)), NET, data)


def test_report_csv_marks_undefined():
    report = ev.EvalReport(buckets=(ev.RangeBucket(),), counts={"0-inf": ev.ConfusionCounts(tn=4)})
    text = report.to_csv()
    assert text.splitlines()[0] == "bucket,iou,tp,fp,fn,tn"
    assert text.splitlines()[1] == "0-inf,n/a,0,0,0,4"


def test_first_target_aligns_windows(data):
    assert len(ev.evaluation_windows(data, 2, first_target=3)) == len(data)
    assert len(ev.evaluation_windows(data, 1)) == sum(len(s) for s in data)


def test_ablation_shapes_with_zero_epochs(data):
    from lidarseq.training import TrainConfig
    tables = ev.ablate(data, data, NET, TrainConfig(epochs=0), seeds=(0, 1), frame_sweep=(1, 2, 4),
                       component_frames=2)
    comp, frames = tables["components"], tables["frames"]
    assert comp.columns == ["no-velocity", "no-propagation", "full"]
    assert len(comp.buckets) == 4 and len(comp.cells) == 6
    assert frames.columns == ["1", "2", "4"]
    lines = comp.to_csv().splitlines()
    assert lines[1] == "range,no-velocity,no-propagation,full"
    assert len([l for l in lines if not l.startswith("#")]) == 5
    # untrained networks hover near the human-pixel prior or below
    for col in frames.columns:
        assert frames.mean(col) <= 0.5 or math.isnan(frames.mean(col))


def test_default_sweep_header():
    assert [str(n) for n in ev.FRAME_SWEEP] == ["1", "2", "4", "8", "16"]


def test_spread_is_half_range():
    table = ev.AblationTable("t", ["a"], (ev.RangeBucket(),))
    for seed, tp in enumerate([1, 3]):
        counts = {"0-inf": ev.ConfusionCounts(tp=tp, fp=4 - tp)}
        table.cells.append(ev.CellResult("a", seed, ev.EvalReport((ev.RangeBucket(),), counts)))
    assert table.mean("a") == pytest.approx(0.5)
    assert table.spread("a") == pytest.approx(0.25)


def test_plot_frame_sweep(tmp_path):
    pytest.importorskip("matplotlib")
    table = ev.AblationTable("t", ["1", "2"], (ev.RangeBucket(),))
    for col in ("1", "2"):
        table.cells.append(ev.CellResult(col, 0, ev.EvalReport((ev.RangeBucket(),),
                                                                {"0-inf": ev.ConfusionCounts(tp=1, fp=1)})))
    ev.plot_frame_sweep(table, tmp_path / "p.png")
    assert (tmp_path / "p.png").stat().st_size > 0


def test_measure_runtime_contract():
    params = nw.build(NET)
    out = ev.measure_runtime(params, NET, repetitions=10)
    assert out["runs"] == 10 and out["warmup"] == 3
    assert 0 < out["median_ms"] <= out["p90_ms"]
    with pytest.raises(UsageError):
        ev.measure_runtime(params, NET, repetitions=9)


def test_export_prediction(tmp_path, data):
    params = nw.build(NET, 2)
    seq = data[0]
    files = ev.export_prediction(params, NET, seq, 3, tmp_path)
    sensor, pred = pj.read_label_map(files["labels"])
    assert sensor == seq.sensor
    defect = seq.labels[3] == pj.LABEL_DEFECT
    assert (pred[defect] == pj.LABEL_DEFECT).all()
    _, cats = pj.read_label_map(files["errors"])
    assert (cats[defect] == pj.LABEL_DEFECT).all()
    _, counts = ev.iou(nw.predict(params, NET, seq.window(3, 2))[0], seq.labels[3], ev.RangeBucket(), seq.ranges[3])
    assert [(cats == k).sum() for k in (ev.ERR_TP, ev.ERR_FP, ev.ERR_FN, ev.ERR_TN)] == \
        [counts.tp, counts.fp, counts.fn, counts.tn]
    rows = np.loadtxt(files["points"])
    assert rows.shape == ((~defect).sum(), 4)
    _, vel = pj.read_velocity_map(files["velocity"])
    assert not vel[defect].any()
