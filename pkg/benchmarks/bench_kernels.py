"""Time the numba and numpy kernel paths on the same inputs.

    python3 benchmarks/bench_kernels.py [--groups 20000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from dali import kernels


def make_inputs(groups, seed=0):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(2, 9, size=groups)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    logits = rng.normal(size=offsets[-1])
    weights = kernels.segment_softmax_np(logits, offsets)
    truth = rng.normal(size=groups)
    negs = rng.normal(size=(groups, 100))
    return logits, weights, offsets, truth, negs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--groups", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    logits, weights, offsets, truth, negs = make_inputs(args.groups)

    cases = {
        "segment_softmax": ((logits, offsets), kernels.segment_softmax_np, kernels.segment_softmax_nb),
        "segment_features": ((weights, offsets), kernels.segment_features_np, kernels.segment_features_nb),
        "truth_ranks": ((truth, negs), kernels.truth_ranks_np, kernels.truth_ranks_nb),
    }
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for name, (inputs, f_np, f_nb) in cases.items():
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat)) * 1e3
        if f_nb is None:
            print(f"{name:<18}{t_np:>10.2f}{'n/a':>10}")
            continue
        f_nb(*inputs)  # compile outside the timed region
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat)) * 1e3
        diff = np.max(np.abs(np.asarray(f_np(*inputs), float) - np.asarray(f_nb(*inputs), float)))
        print(f"{name:<18}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
