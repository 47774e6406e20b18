"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from filterprune.kernels import available_backends, get_backend


def cases(rng):
    big_bank = rng.normal(size=(256, 3 * 3 * 128))
    small_bank = rng.normal(size=(12, 36))
    x = rng.normal(size=(32, 8, 14, 14))
    w = rng.normal(size=(8, 8, 3, 3))
    b = rng.normal(size=8)
    dy = rng.normal(size=(32, 8, 12, 12))
    return {
        "fpgm 256x1152": lambda k: k.fpgm_scores(big_bank),
        "fpgm 12x36": lambda k: k.fpgm_scores(small_bank),
        "l1 256x1152": lambda k: k.l1_scores(big_bank),
        "conv fwd 32x8x14x14": lambda k: k.conv2d_forward(x, w, b),
        "conv bwd 32x8x14x14": lambda k: k.conv2d_backward(x, w, dy),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {name: get_backend(name) for name in available_backends()}
    names = list(backends)
    print(f"{'case':<22}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for name, mod in backends.items():
            number = 3
            best = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat))
            times[name] = best / number * 1e3
        line = f"{label:<22}" + "".join(f"{times[n]:>12.3f}" for n in names)
        if "cython" in times:
            line += f"{times['python'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
