"""Numba kernels against their numpy twins, plus one end-to-end training step.

    python benchmarks/bench_kernels.py [--reps 20]

Both variants are called directly, so the env switch does not matter here.
"""
import argparse
import time

import numpy as np

from lidarseq import backend, datagen, kernels, network, training
from lidarseq import tensorcore as tc
from lidarseq.projection import SensorModel


def timeit(fn, reps):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def scene_rays(sensor):
    rng = np.random.default_rng(0)
    room = np.array([-10, -10, 0, 10, 10, 3.0])
    boxes = np.array([[x, y, 0, x + 0.5, y + 0.5, 2.0] for x, y in rng.uniform(-8, 8, (10, 2))])
    caps = np.column_stack([rng.uniform(-8, 8, (6, 2)), np.full(6, 0.25), np.full(6, 1.7)])
    return np.array([0.1, 0.2, 1.0]), sensor.ray_grid().reshape(-1, 3), room, boxes, caps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    x = np.random.default_rng(1).normal(size=(32, 128, 64)).astype(np.float32)
    cols = kernels.im2col3_np(x)
    args_ray = scene_rays(SensorModel())
    pix = np.random.default_rng(2).integers(0, 4096, 20000)
    rr = np.random.default_rng(3).uniform(0, 50, 20000)

    rows = [
        ("im2col 32x128x64", lambda: kernels.im2col3_np(x), lambda: kernels.im2col3_nb(x)),
        ("col2im 32x128x64", lambda: kernels.col2im3_np(cols, 32, 128, 64), lambda: kernels.col2im3_nb(cols, 32, 128, 64)),
        ("cast_rays 32x128", lambda: kernels.cast_rays_np(*args_ray), lambda: kernels.cast_rays_nb(*args_ray)),
        ("zbuffer 20k pts", lambda: kernels.zbuffer_np(pix, rr, 4096), lambda: kernels.zbuffer_nb(pix, rr, 4096)),
    ]
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in rows:
        a, b = timeit(f_np, args.reps), timeit(f_nb, args.reps)
        print(f"{name:<20}{a:>10.3f}{b:>10.3f}{a / b:>9.2f}")

    # whole training step for context: dominated by the GEMMs either way
    cfg = datagen.SceneConfig(frames=4)
    seq = datagen.generate_sequence(cfg, 0)
    net = network.NetworkConfig(frames=4)
    params = network.build(net)
    tcfg = training.TrainConfig(learning_rate=1e-3)
    state = tc.AdamState.for_params(params, lr=tcfg.learning_rate)
    step = lambda: training.train_step(params, net, tcfg, state, [(seq, 3)])  # noqa: E731
    print(f"train step n=4 C=64 32x128 ({backend()} backend): {timeit(step, max(3, args.reps // 4)):.1f} ms")


if __name__ == "__main__":
    main()
