"""Compare the compiled rendering kernels against the numpy fallback.

Run: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from boostdream import kernels
from boostdream.cameras import CameraPose, generate_rays
from boostdream.field import init_field


def best_of(fn, repeats=5):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    if not kernels.compiled_available():
        print("compiled kernels are not built; nothing to compare")
        return

    field = init_field(32, seed=0)
    results = []
    for size in (64, 128):
        pose = CameraPose(
            position=np.array([3.0, 1.0, 0.8]), target=np.zeros(3),
            up=np.array([0.0, 0.0, 1.0]), fov_deg=50.0, image_size=size,
        )
        origins, dirs = generate_rays(pose)
        bg = np.ones(3)
        dl_color = np.random.default_rng(0).standard_normal((size * size, 3))

        cases = {
            f"render {size}x{size}x64": lambda b: _with_backend(
                b, lambda: kernels.render_rays(
                    field.density_raw, field.color_raw, field.bbox,
                    origins, dirs, 64, bg, want_normal=True)),
            f"backward {size}x{size}x64": lambda b: _with_backend(
                b, lambda: kernels.render_backward(
                    field.density_raw, field.color_raw, field.bbox,
                    origins, dirs, 64, bg, dl_color)),
            f"orientation {size}x{size}x64": lambda b: _with_backend(
                b, lambda: kernels.orientation_loss_grad(
                    field.density_raw, field.bbox, origins, dirs, 64)),
        }
        for name, runner in cases.items():
            t_compiled = best_of(lambda: runner("compiled"))
            t_numpy = best_of(lambda: runner("numpy"), repeats=3)
            results.append((name, t_compiled, t_numpy))

    print(f"{'kernel':<28} {'compiled':>10} {'numpy':>10} {'speedup':>8}")
    for name, tc, tn in results:
        print(f"{name:<28} {tc * 1e3:>8.2f}ms {tn * 1e3:>8.2f}ms {tn / tc:>7.1f}x")


def _with_backend(name, fn):
    kernels.set_backend(name)
    try:
        return fn()
    finally:
        kernels.set_backend("auto")


if __name__ == "__main__":
    main()
