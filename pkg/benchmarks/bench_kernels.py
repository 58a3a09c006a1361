"""Time the compiled verification kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from trdm import _kernels_py

try:
    from trdm import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng: np.random.Generator):
    members = np.ascontiguousarray(rng.gamma(0.5, 4.0, size=(4, 256 * 256)))
    obs = rng.gamma(0.5, 4.0, size=256 * 256)
    field = (rng.random((256, 256)) > 0.7).astype(np.float64)
    f = rng.gamma(0.5, 4.0, size=(256, 256))
    o = rng.gamma(0.5, 4.0, size=(256, 256))
    return {
        "crps_pixels 4x65536": lambda k: k.crps_pixels(members, obs),
        "box_mean 256x256 w=9": lambda k: k.box_mean(field, 9),
        "contingency 256x256": lambda k: k.contingency(f.ravel(), o.ravel(), 0.06),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {}
        for b, mod in backends.items():
            fn(mod)
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<24}" + "".join(f"{times[b]:>10.3f}ms" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
