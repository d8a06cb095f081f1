"""Time the numba and numpy backends of the hot kernels and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sequences 60]
"""

import argparse
import time

import numpy as np

from cmkn import _accel
from cmkn.kernel import KernelParams, default_beta, gram, motif_function_eval
from cmkn.network import ModelConfig, TrainConfig, train
from cmkn.nystroem import kmeans_pp
from cmkn.seqdata import SyntheticConfig, generate_synthetic


def best_of(fn, repeat):
    out = None
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(args):
    ds = generate_synthetic(SyntheticConfig(num_sequences=args.sequences, seed=1))
    params = KernelParams(k=5, alpha=1.0, beta=default_beta(100), sigma=4.0)
    rng = np.random.default_rng(0)
    points = rng.random((3000, 22))
    chis = np.abs(rng.normal(size=(2000, 20)))
    ts = rng.normal(size=(2000, 2))
    small = ds.subset(np.arange(min(len(ds), 200)))
    train_cfg = TrainConfig(epochs=3, loss="bce_logits", batch_size=100)
    model_cfg = ModelConfig(num_anchors=50, k=5, beta=1000.0, sigma=4.0, hidden=())
    return {
        f"gram {len(ds)}x{len(ds)} (L=100, k=5)": lambda: gram(ds, params),
        "motif function, 2000 points": lambda: motif_function_eval(ds[0], chis, ts, params),
        "k-means++ 3000 x 22 -> 50": lambda: kmeans_pp(points, 50, np.random.default_rng(0)).centers,
        "train 3 epochs, 200 seqs": lambda: train(small, model_cfg, train_cfg)[0].anchors.motifs,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--sequences", type=int, default=60)
    args = parser.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'case':40s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup   max|diff|")
    for name, fn in cases(args).items():
        timings, results = [], []
        for b in backends:
            _accel.set_backend(b)
            fn()  # warm-up: numba compilation, caches
            t, out = best_of(fn, args.repeat)
            timings.append(t)
            results.append(np.asarray(out))
        diff = float(np.max(np.abs(results[0] - results[-1]))) if len(results) > 1 else 0.0
        speed = timings[0] / timings[-1]
        print(f"{name:40s} " + " ".join(f"{t:9.4f}s" for t in timings) + f"   {speed:6.1f}x   {diff:.2e}")


if __name__ == "__main__":
    main()
