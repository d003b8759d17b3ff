"""Command line entry point: ``lidarseq {generate,train,eval,ablate,predict,bench}``.

Configuration files are JSON objects whose keys are the fields of
SceneConfig, NetworkConfig or TrainConfig; missing keys keep their defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, evalharness, network, training
from .errors import ConfigurationError, LidarSeqError, UsageError

log = logging.getLogger("lidarseq")


def _load_json(path, cls):
    if path is None:
        return cls()
    try:
        return training.load_json_config(path, cls)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _load_model(ckpt, net_path=None):
    params, _, net = training.load_checkpoint(ckpt, with_state=False)
    if net_path is not None:
        net = _load_json(net_path, network.NetworkConfig)
    if net is None:
        raise UsageError(f"{ckpt}: no network config next to the checkpoint; pass --net")
    training.check_compatible(params, net)
    return params, net


def _split(data, name):
    if not data.get(name):
        raise UsageError(f"dataset has no sequences in split {name!r}")
    return data[name]


# --- subcommands -------------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_json(args.config, datagen.SceneConfig)
    counts = None
    if args.split:
        counts = tuple(int(v) for v in args.split.split(","))
    manifest = datagen.generate_dataset(cfg, args.out, args.count, seed=args.seed, counts=counts)
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.count} sequences to {args.out} ({sizes})")


def cmd_train(args):
    net = _load_json(args.net, network.NetworkConfig)
    tcfg = _load_json(args.train, training.TrainConfig)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    data = datagen.load_dataset(args.data)
    val = data.get("val") or None
    result = training.train(_split(data, "train"), net, tcfg, out_dir=args.out, val_dataset=val,
                            resume=args.resume, eval_fn=evalharness.pooled_iou)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"epoch {last['epoch']} step {last['step']} loss {last['loss_total']:.5g} "
              f"train IoU {last['train_iou']:.4f}")
    if result.best_epoch is not None:
        print(f"best validation IoU {result.best_val_iou:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.lsqw'}")


def cmd_eval(args):
    params, net = _load_model(args.ckpt, args.net)
    data = datagen.load_dataset(args.data)
    buckets = evalharness.parse_buckets(args.buckets)
    report = evalharness.evaluate(params, net, _split(data, args.split), buckets)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_ablate(args):
    net = _load_json(args.net, network.NetworkConfig)
    tcfg = _load_json(args.train, training.TrainConfig)
    data = datagen.load_dataset(args.data)
    frames = tuple(int(v) for v in args.frames.split(","))
    tables = evalharness.ablate(_split(data, "train"), _split(data, "test"), net, tcfg,
                                seeds=tuple(range(args.seeds)), buckets=evalharness.parse_buckets(args.buckets),
                                frame_sweep=frames, component_frames=args.component_frames)
    text = tables["components"].to_csv() + "\n" + tables["frames"].to_csv()
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.plot:
        evalharness.plot_frame_sweep(tables["frames"], args.plot)
        print(f"plot: {args.plot}")


def cmd_predict(args):
    params, net = _load_model(args.ckpt, args.net)
    seq = datagen.read_sequence(args.window)
    end = len(seq) - 1 if args.end is None else args.end
    if end < net.frames - 1 or end >= len(seq):
        raise UsageError(f"frame {end} cannot end a {net.frames}-frame window in a {len(seq)}-frame sequence")
    files = evalharness.export_prediction(params, net, seq, end, args.out)
    for kind, path in files.items():
        print(f"{kind}: {path}")


def cmd_bench(args):
    params, net = _load_model(args.ckpt, args.net)
    res = evalharness.measure_runtime(params, net, args.reps)
    print(f"frames={net.frames} size={net.height}x{net.width} C={net.channels}: "
          f"median {res['median_ms']:.2f} ms, p90 {res['p90_ms']:.2f} ms over {res['runs']} runs")
    # ordering checks on freshly initialised networks of the same size
    timings = {}
    for n in (1, 8):
        cfg = replace(net, frames=n)
        timings[n] = evalharness.measure_runtime(network.build(cfg, 0), cfg, args.reps)["median_ms"]
    ok = timings[8] >= timings[1]
    print(f"check frames=8 ({timings[8]:.2f} ms) >= frames=1 ({timings[1]:.2f} ms): {'ok' if ok else 'VIOLATED'}")
    return 0 if ok else 1


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lidarseq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="SceneConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", help="explicit train,val,test sizes (default scales 900/100/108)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on the dataset's train split")
    t.add_argument("--data", required=True)
    t.add_argument("--net", help="NetworkConfig JSON")
    t.add_argument("--train", help="TrainConfig JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from (needs its .adam sibling)")
    t.add_argument("--epochs", type=int, help="override the epoch count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="range-bucketed human IoU on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--buckets", default="0:4,4:8,8:inf")
    e.add_argument("--split", default="test")
    e.add_argument("--net", help="NetworkConfig JSON when the checkpoint has no sidecar")
    e.add_argument("--out", help="also write the CSV here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="component grid and frame sweep over several seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--out", required=True)
    a.add_argument("--net", help="base NetworkConfig JSON")
    a.add_argument("--train", help="TrainConfig JSON")
    a.add_argument("--frames", default=",".join(map(str, evalharness.FRAME_SWEEP)))
    a.add_argument("--component-frames", type=int, default=4)
    a.add_argument("--buckets", default="0:4,4:8,8:inf")
    a.add_argument("--plot", help="write an IoU-vs-frames PNG here")
    a.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("predict", help="export predictions for one window of a sequence directory")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--window", required=True, help="sequence directory")
    pr.add_argument("--out", required=True)
    pr.add_argument("--end", type=int, help="last frame of the window (default: last frame)")
    pr.add_argument("--net")
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="per-window inference time")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--reps", type=int, default=50)
    b.add_argument("--net")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LidarSeqError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
