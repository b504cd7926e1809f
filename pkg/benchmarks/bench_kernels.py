"""Compare the compiled and pure-Python kernel backends.

Times the three matmul kernels at the shapes a training step uses, then a
full forward+backward pass per document. Run with ``python3 benchmarks/bench_kernels.py``.
"""
import argparse
import timeit

import numpy as np

from caml import numerics
from caml.model import ModelKind, backward, forward, init_params
from caml.numerics import make_rng


def kernel_cases(N, d_e, d_c, k, L):
    rng = make_rng(0, "bench")
    P = rng.normal(size=(N, k * d_e))  # unfolded document
    W = rng.normal(size=(k * d_e, d_c))
    H = rng.normal(size=(d_c, N))
    U = rng.normal(size=(L, d_c))
    A = rng.normal(size=(L, N))
    return {
        "conv   P@W": (numerics.matmul, P, W),
        "attn   U@H": (numerics.matmul, U, H),
        "pool   A@H^T": (numerics.matmul_nt, A, H),
        "grad   P^T@dZ": (numerics.matmul_tn, P, rng.normal(size=(N, d_c))),
    }


def doc_step(N, d_e, d_c, k, L, kind):
    rng = make_rng(1, "bench")
    params = init_params(rng.normal(size=(500, d_e)), L, d_c, k, rng)
    ids = rng.integers(1, 500, N)
    y = (rng.random(L) < 0.1).astype(float)
    return lambda: backward(forward(params, ids, kind), params, y)


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=500)
    ap.add_argument("--d-e", type=int, default=100)
    ap.add_argument("--d-c", type=int, default=50)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--labels", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    shape = (args.tokens, args.d_e, args.d_c, args.k, args.labels)
    backends = numerics.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the python backend is available")
    print(f"N={args.tokens} d_e={args.d_e} d_c={args.d_c} k={args.k} |L|={args.labels}")
    print(f"{'case':<22}" + "".join(f"{b:>14}" for b in backends) + ("       speedup" if len(backends) > 1 else ""))

    rows = [(name, lambda f=f, a=a, b=b: f(a, b)) for name, (f, a, b) in kernel_cases(*shape).items()]
    rows += [(f"step   {kind.value}", doc_step(*shape, kind)) for kind in ModelKind]
    previous = numerics.backend_name()
    results = {}
    for name, fn in rows:
        for backend in backends:
            numerics.set_backend(backend)
            results[name, backend] = best_of(fn, args.repeat)
    numerics.set_backend(previous)

    # the backends must agree bit for bit before their timings mean anything
    for name, (f, a, b) in kernel_cases(*shape).items():
        outs = []
        for backend in backends:
            numerics.set_backend(backend)
            outs.append(f(a, b))
        numerics.set_backend(previous)
        assert all(np.array_equal(outs[0], o) for o in outs[1:]), f"{name}: backends disagree"

    for name, _ in rows:
        line = f"{name:<22}" + "".join(f"{results[name, b] * 1e3:>11.3f} ms" for b in backends)
        if len(backends) > 1:
            line += f"{results[name, 'python'] / results[name, 'compiled']:>13.1f}x"
        print(line)


if __name__ == "__main__":
    main()
