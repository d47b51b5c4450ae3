"""Compare the compiled and numpy kernel backends.

Kernel inputs are recorded from real reconstructions of simulated
frames, then replayed against each backend. A second table times whole
frames with each backend switched in.

    python3 benchmarks/bench_kernels.py [--frames N] [--views N] [--sigma PX]
"""
import argparse
import copy
import time
from collections import defaultdict

from toolpose3d import kernels
from toolpose3d.pipeline import reconstruct_frame
from toolpose3d.simulator import NoiseModel, RigSpec, make_rig, simulate
from toolpose3d.streams import DetectionFrame


class Recorder:
    """Stands in for a backend and logs every kernel call."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = defaultdict(list)

    def __getattr__(self, name):
        fn = getattr(self.inner, name)
        if not callable(fn):
            return fn

        def wrapped(*args):
            # callers may reuse their arrays after the call
            self.calls[name].append(copy.deepcopy(args))
            return fn(*args)
        return wrapped


def best_of(fn, repeat=5):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--views", type=int, default=10, help="cameras, in rings of five")
    ap.add_argument("--sigma", type=float, default=1.0)
    args = ap.parse_args()

    per_ring = 5 if args.views % 5 == 0 else args.views
    rig = make_rig(RigSpec(arrays=args.views // per_ring, cameras_per_array=per_ring))
    frames = [DetectionFrame.of(f.frame_index, f.all_detections())
              for f in simulate(rig, args.frames, NoiseModel(sigma_px=args.sigma, seed=1))]
    names = sorted(kernels.BACKENDS)
    print(f"{len(rig)} views, {len(frames)} frames, sigma {args.sigma} px; backends: {', '.join(names)}")

    saved = kernels.backend
    rec = Recorder(kernels.get_backend("numpy"))
    kernels.backend = rec
    try:
        for f in frames:
            reconstruct_frame(f.frame_index, f.batch, rig)
    finally:
        kernels.backend = saved

    print(f"\n{'kernel':<22}{'calls':>7}" + "".join(f"{n + ' us/call':>18}" for n in names) + f"{'speedup':>10}")
    for kernel in sorted(rec.calls):
        calls = rec.calls[kernel]
        us = {}
        for n in names:
            fn = getattr(kernels.get_backend(n), kernel)
            us[n] = best_of(lambda: [fn(*a) for a in calls]) / len(calls) * 1e6
        ratio = us["numpy"] / us["cython"] if "cython" in us else float("nan")
        print(f"{kernel:<22}{len(calls):>7}" + "".join(f"{us[n]:>18.2f}" for n in names) + f"{ratio:>9.1f}x")

    print(f"\n{'backend':<22}{'ms/frame':>10}")
    for n in names:
        kernels.backend = kernels.get_backend(n)
        try:
            t = best_of(lambda: [reconstruct_frame(f.frame_index, f.batch, rig) for f in frames], repeat=3)
        finally:
            kernels.backend = saved
        print(f"{n:<22}{t / len(frames) * 1e3:>10.3f}")


if __name__ == "__main__":
    main()
