"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--rows 4096] [--width 32]

Shapes default to one training mini-batch of the default policy (16 rows of
up to 64 positions over a 32-token vocabulary, d_model 32). Each backend is
also checked for agreement with the fallback before it is timed.
"""

import argparse
import timeit

import numpy as np

from psftlab.kernels import available_backends


def cases(rows, width, rng):
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    gamma, beta = rng.normal(size=width), rng.normal(size=width)
    probs = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
    u = rng.random(rows)
    params = [rng.normal(size=(width, 4 * width)) for _ in range(3)]

    def adam(k):
        p, gr, m, v = (a.ravel().copy() for a in params[:1] * 4)
        v = v * v  # second moments are nonnegative
        return lambda: k.adam_update(p, gr, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 10)

    def ln_bwd(k):
        _, xhat, rstd = k.layer_norm(x, gamma, beta, 1e-5)
        return lambda: k.layer_norm_backward(g, xhat, rstd, gamma)

    flat, gflat = x.ravel(), g.ravel()

    def gelu_bwd(k):
        _, t = k.gelu(flat)
        return lambda: k.gelu_backward(flat, t, gflat)

    return {
        "log_softmax": lambda k: (lambda: k.log_softmax(x)),
        "log_softmax_backward": lambda k: (lambda: k.log_softmax_backward(k.log_softmax(x), g)),
        "softmax": lambda k: (lambda: k.softmax(x)),
        "row_entropy": lambda k: (lambda: k.row_entropy(k.log_softmax(x))),
        "layer_norm": lambda k: (lambda: k.layer_norm(x, gamma, beta, 1e-5)),
        "layer_norm_backward": ln_bwd,
        "gelu": lambda k: (lambda: k.gelu(flat)),
        "gelu_backward": gelu_bwd,
        "categorical": lambda k: (lambda: k.categorical(probs, u)),
        "adam_update": adam,
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if a is None:
        return b is None
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--rows", type=int, default=16 * 64)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    table = cases(args.rows, args.width, np.random.default_rng(args.seed))
    names = list(backends)
    print(f"rows={args.rows} width={args.width} repeat={args.repeat} (microseconds per call)")
    print(f"{'kernel':24s}" + "".join(f"{n:>12s}" for n in names) + "   speedup")
    for kernel, make in table.items():
        ref = make(backends["python"])()
        times = []
        for n in names:
            fn = make(backends[n])
            if n != "python" and not _same(fn(), ref):
                raise SystemExit(f"{kernel}: {n} disagrees with the numpy fallback")
            best = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat
            times.append(best * 1e6)
        speed = f"{times[0] / times[-1]:9.2f}x" if len(times) > 1 else ""
        print(f"{kernel:24s}" + "".join(f"{t:12.1f}" for t in times) + speed)


if __name__ == "__main__":
    main()
