"""Time the numpy and compiled kernel backends on the standard problem size.

    python benchmarks/bench_kernels.py [--repeat 50] [--batch 16]

Reports per-kernel medians and one full mini-batch gradient step per backend.
"""
import argparse
import statistics
import time

import numpy as np

from sthl import _kernels
from sthl.construction import candidate_table, incidence_matrix
from sthl.model import ModelConfig, init_model, loss_and_grad


def _median_ms(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(rng, B, N=10, d=16, K=2):
    k = d // K
    proj = rng.standard_normal((B, N, d))
    coef = rng.standard_normal((N, N - 1))
    cand = candidate_table(N)
    feats = rng.standard_normal((B, N, d))
    H = incidence_matrix(rng.standard_normal((N, N - 1)), rng.standard_normal((N, N)))
    nodes = rng.standard_normal((B, 2 * N, d))
    q, ks, kt = (rng.standard_normal((B, N, K, k)) for _ in range(3))
    ts, tt = rng.standard_normal((K, k, k)), rng.standard_normal((K, k, k))
    scale = 1.0 / np.sqrt(d)

    def cases(impl):
        resid, norm = impl.reconstruct_forward(proj, coef, cand, feats)
        emb, denom = impl.aggregate_forward(H, nodes)
        w, mixed = impl.attend_forward(q, ks, kt, ts, tt, scale)
        return {
            "reconstruct_forward": lambda: impl.reconstruct_forward(proj, coef, cand, feats),
            "reconstruct_backward": lambda: impl.reconstruct_backward(norm, resid, norm, coef,
                                                                      cand, feats),
            "aggregate_forward": lambda: impl.aggregate_forward(H, nodes),
            "aggregate_backward": lambda: impl.aggregate_backward(emb, H, nodes, emb, denom),
            "attend_forward": lambda: impl.attend_forward(q, ks, kt, ts, tt, scale),
            "attend_backward": lambda: impl.attend_backward(mixed, q, ks, kt, ts, tt, w, scale),
        }
    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()

    backends = _kernels.available_backends()
    if "compiled" not in backends:
        print("compiled core not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng, args.batch)
    results = {b: {n: _median_ms(fn, args.repeat) for n, fn in cases(_kernels.kernels(b)).items()}
               for b in backends}

    model = init_model(ModelConfig(N=10, d=16, C=5))
    cur = rng.standard_normal((args.batch, 10, 16))
    prev = rng.standard_normal((args.batch, 10, 16))
    labels = rng.integers(0, 5, args.batch)
    previous = _kernels.BACKEND
    for b in backends:
        _kernels.use_backend(b)

        def step():
            model.store.zero_grad()
            loss_and_grad(model, cur, prev, labels)

        results[b]["full gradient step"] = _median_ms(step, args.repeat)
    _kernels.use_backend(previous)

    names = list(results[backends[0]])
    head = f"{'kernel (B=%d, N=10, d=16)' % args.batch:<28}" + "".join(
        f"{b + ' ms':>14}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}"
    print(head)
    for n in names:
        line = f"{n:<28}" + "".join(f"{results[b][n]:14.4f}" for b in backends)
        if len(backends) == 2:
            line += f"{results['python'][n] / results['compiled'][n]:10.2f}x"
        print(line)


if __name__ == "__main__":
    main()
