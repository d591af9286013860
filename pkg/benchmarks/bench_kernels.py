"""Compare the compiled and pure-numpy kernel backends.

Run ``python3 benchmarks/bench_kernels.py [--repeat K]``. Prints the median
time per call for each kernel at desk (24x24) and full (60x60) sizes and
checks that the two backends agree.
"""

import argparse

import numpy as np

from nmrom import _kernels
from nmrom.autoencoder import init_autoencoder
from nmrom.fom import GridSpec, stencil_table
from nmrom.metrics import timing


def cases(n, latent_dim=5, seed=0):
    grid = GridSpec(n, n)
    rng = np.random.default_rng(seed)
    table = stencil_table(grid)
    ext = np.append(rng.uniform(0, 1, grid.n_state), 0.0)
    model = init_autoencoder(grid.n_state, latent_dim, 8, 5 * grid.n_state, 10, seed)
    z = rng.standard_normal(latent_dim)
    coef = rng.standard_normal((grid.n_state, 7))
    mat = rng.standard_normal((grid.n_state + 1, latent_dim))
    dec = (model.dec_w1, model.dec_b1, model.dec_w2, model.mask_cols, model.dec_b2)
    return {
        "stencil_eval": lambda k: k.stencil_eval(ext, table, grid.hx, grid.hy, 1e-4),
        "masked_decode": lambda k: k.masked_decode(z, *dec),
        "masked_decode+jac": lambda k: k.masked_decode(z, *dec, True),
        "gather_rows": lambda k: k.gather_rows(coef, table, mat),
    }


def as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    backends = _kernels.backends()
    names = sorted(backends)
    print(f"backends: {', '.join(names)} (default {_kernels.BACKEND})")
    print(f"{'grid':>6} {'kernel':>18} " + " ".join(f"{n + ' [ms]':>14}" for n in names) + "   ratio")
    for n in (24, 60):
        for name, fn in cases(n).items():
            outs = {b: as_tuple(fn(backends[b])) for b in names}
            for b in names[1:]:
                for a, c in zip(outs[names[0]], outs[b]):
                    if a is not None and not np.allclose(a, c, rtol=1e-13, atol=1e-13):
                        raise SystemExit(f"{name}: backends disagree")
            times = {b: timing(lambda b=b: fn(backends[b]), args.repeat) * 1e3 for b in names}
            ratio = times.get("python", np.nan) / times.get("cython", np.nan)
            print(f"{n:>4}^2 {name:>18} " + " ".join(f"{times[b]:14.4f}" for b in names) + f"  {ratio:6.1f}x")


if __name__ == "__main__":
    main()
