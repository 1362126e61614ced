"""Compare the compiled kernel backend against the pure-Python fallback.

Times representative kernels and one end-to-end forward+backward of a small
model under each backend, printing a speedup table:

    python benchmarks/bench_backends.py [--repeats 20]
"""

import argparse
import random
import time

from metroflow import autodiff as ad
from metroflow import backend
from metroflow.model import ForecastModel, ModelConfig
from metroflow.training import loss_mae_masked


def timed(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def rand_buffer(rng, n):
    buf = backend.alloc_raw(n)
    for i in range(n):
        buf[i] = rng.uniform(-1.0, 1.0)
    return buf


def kernel_cases(rng):
    m = k = n = 64
    a = rand_buffer(rng, m * k)
    b = rand_buffer(rng, k * n)
    out = backend.alloc_raw(m * n)
    rows, cols = 128, 64
    x = rand_buffer(rng, rows * cols)
    soft = backend.alloc_raw(rows * cols)
    gain = rand_buffer(rng, cols)
    bias = rand_buffer(rng, cols)
    mean = backend.alloc_raw(rows)
    rstd = backend.alloc_raw(rows)
    theta = rand_buffer(rng, 8 * 66 * 64)
    feats = rand_buffer(rng, 16 * 8 * 66)
    node_out = backend.alloc_raw(16 * 8 * 64)
    p = rand_buffer(rng, 10000)
    g = rand_buffer(rng, 10000)
    mom = backend.alloc(10000)
    vel = backend.alloc(10000)

    return {
        "matmul 64x64x64": lambda K: K.matmul(a, b, out, m, k, n, False, False, False),
        "softmax 128x64": lambda K: K.softmax(x, soft, rows, cols),
        "layer_norm 128x64": lambda K: K.layer_norm(
            x, gain, bias, soft, mean, rstd, rows, cols, 1e-5
        ),
        "sigmoid 8192": lambda K: K.sigmoid(x, soft, rows * cols),
        "node_linear B16 N8 66->64": lambda K: K.node_linear(
            theta, feats, node_out, 16, 8, 66, 64, False, False
        ),
        "adam_step 10k": lambda K: K.adam_step(
            p, g, mom, vel, 10000, 1e-3, 0.9, 0.999, 1e-8, 0.9, 0.999
        ),
    }


def end_to_end(seed):
    rng = random.Random(seed)
    model = ForecastModel(
        ModelConfig(
            n_stations=4,
            input_steps=6,
            output_steps=4,
            embed_dim=2,
            pool_dim=2,
            hidden_dim=8,
            attn_dim=8,
            attn_heads=2,
            ffn_dim=16,
            seed=seed,
        )
    )
    x = ad.uniform((4, 6, 4, 2), -1.0, 1.0, rng)
    target = ad.uniform((4, 4, 4, 2), -1.0, 1.0, rng)
    mask = ad.ones(target.shape)

    def run():
        with ad.Tape():
            loss = loss_mae_masked(model.forward(x), target, mask)
            ad.backward(loss)
        ad.zero_grads(model.parameters().values())

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    names = backend.available()
    if "compiled" not in names:
        print("compiled backend not built; run `pip install -e .` first")
        return 1

    rng = random.Random(0)
    cases = kernel_cases(rng)
    results = {}
    for case, fn in cases.items():
        row = {}
        for name in ("compiled", "pure"):
            kernels = backend.select(name)
            row[name] = timed(lambda: fn(kernels), args.repeats)
        results[case] = row

    for name in ("compiled", "pure"):
        backend.select(name)
        runner = end_to_end(seed=3)
        reps = args.repeats if name == "compiled" else max(1, args.repeats // 10)
        results[f"model fwd+bwd (B4 tiny)"] = results.get("model fwd+bwd (B4 tiny)", {})
        results["model fwd+bwd (B4 tiny)"][name] = timed(runner, reps)
    backend.select("auto")

    width = max(len(k) for k in results) + 2
    print(f"{'case'.ljust(width)}{'compiled':>12}{'pure':>12}{'speedup':>10}")
    for case, row in results.items():
        speedup = row["pure"] / row["compiled"]
        print(
            f"{case.ljust(width)}{row['compiled'] * 1e3:>10.3f}ms"
            f"{row['pure'] * 1e3:>10.3f}ms{speedup:>9.1f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
