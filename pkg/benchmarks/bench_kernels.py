"""Compare the numba kernels with their pure-numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeats 5] [--threads 1]

Each row times one kernel family on the same inputs and checks that both
paths agree before reporting the speedup.
"""

import argparse
import time

import numpy as np

from gsn import _raster_numba, _raster_numpy, losses
from gsn._accel import set_threads
from gsn.data import SyntheticObjectSpec, generate_object, input_camera
from gsn.render import rasterize, rasterize_backward
from gsn.train import adam_update, AdamState


def best_ms(fn, repeats):
    fn()  # warm up (and JIT compile)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return 1000.0 * min(ts)


def bench_render(repeats, res):
    S = generate_object(SyntheticObjectSpec(seed=0, gaussians_per_part=200))
    cam = input_camera(resolution=res)
    args = (S.mu, S.scale, S.rot, S.color, S.opacity, cam, (1.0, 1.0, 1.0))
    rows = []
    for label, k in (("numba", _raster_numba), ("numpy", _raster_numpy)):
        img, ctx = rasterize(*args, kernels=k)
        g = np.ones_like(img)
        fwd = best_ms(lambda: rasterize(*args, kernels=k), repeats)
        bwd = best_ms(lambda: rasterize_backward(ctx, g), repeats)
        rows.append((label, img, fwd, bwd))
    err = np.abs(rows[0][1] - rows[1][1]).max()
    print(f"render N={len(S.mu)} {res}x{res}  max |numba - numpy| = {err:.2e}")
    for label, _, fwd, bwd in rows:
        print(f"  {label:6s} forward {fwd:9.2f} ms   backward {bwd:9.2f} ms")
    print(f"  speedup forward x{rows[1][2] / rows[0][2]:.1f}, backward x{rows[1][3] / rows[0][3]:.1f}")


def bench_nn(repeats, n):
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.5, 0.5, (n, 3))
    b = rng.uniform(-0.5, 0.5, (n, 3))
    from gsn import _nn_numba

    i1, _ = _nn_numba.nearest(a, b)
    i2, _ = losses.nearest_bruteforce(a, b)
    t_nb = best_ms(lambda: _nn_numba.nearest(a, b), repeats)
    t_np = best_ms(lambda: losses.nearest_bruteforce(a, b), repeats)
    print(f"nearest neighbour N={n}  index-identical: {bool(np.array_equal(i1, i2))}")
    print(f"  numba grid {t_nb:9.2f} ms   numpy brute force {t_np:9.2f} ms   speedup x{t_np / t_nb:.1f}")


def bench_adam(repeats, n):
    rng = np.random.default_rng(0)
    g = {"w": rng.normal(size=n).astype(np.float32)}
    out = {}
    for label, flag in (("numba", True), ("numpy", False)):
        p = {"w": np.zeros(n, np.float32)}
        st = AdamState()
        adam_update(p, g, st, 1e-3, use_numba=flag)
        out[label] = (p["w"].copy(), best_ms(lambda: adam_update(p, g, st, 1e-3, use_numba=flag), repeats))
    same = np.array_equal(out["numba"][0], out["numpy"][0])
    print(f"adam update {n} params  first step bit-identical: {same}")
    print(f"  numba {out['numba'][1]:9.2f} ms   numpy {out['numpy'][1]:9.2f} ms   "
          f"speedup x{out['numpy'][1] / out['numba'][1]:.1f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--nn-points", type=int, default=4096)
    p.add_argument("--adam-params", type=int, default=4_000_000)
    args = p.parse_args()
    set_threads(args.threads)
    bench_render(args.repeats, args.res)
    bench_nn(args.repeats, args.nn_points)
    bench_adam(args.repeats, args.adam_params)


if __name__ == "__main__":
    main()
