"""Compare the compiled kernels against the numpy fallback.

Times each elementwise kernel on shapes taken from the attention benchmark,
then a full SimA / MSA / XCA block forward under each backend.

    python3 benchmarks/compare_backends.py [--repeats 200] [--precision 32]
"""
import argparse
import timeit

import numpy as np

from sima import kernels
from sima.attention import AttentionConfig, AttentionWeights, attention_forward
from sima.tensor import Rng, precision


def best_ms(fn, repeats):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=max(3, repeats // number), number=number)) / number * 1e3


def kernel_cases(rng):
    scores = rng.normal((8, 1024, 1024))
    small = rng.normal((8, 64, 64))
    tall = rng.normal((1024, 128))
    qkv = rng.normal((64, 3 * 512))  # strided query/key slice, as in a real forward
    heads = rng.normal((8, 1024, 8))
    return [
        ("softmax_rows 8x1024x1024", lambda: kernels.softmax_rows(scores)),
        ("softmax_rows 8x64x64", lambda: kernels.softmax_rows(small)),
        ("l1_columns 1024x128", lambda: kernels.l1_normalize_columns(tall, 1e-6)),
        ("l1_columns qkv[:, :2D] 64x1024", lambda: kernels.l1_normalize_columns(qkv[:, :1024], 1e-6)),
        ("elu_feature 8x1024x8", lambda: kernels.elu_feature(heads)),
    ]


def block_cases(rng):
    cases = []
    for variant, n, d in [("sima", 1024, 64), ("msa", 1024, 64), ("sima", 64, 512), ("xca", 64, 512)]:
        cfg = AttentionConfig(d, 8, variant, "tokens_first" if n > d else "channels_first")
        w = AttentionWeights.init(cfg, rng.child(n, d))
        x = rng.child(d, n).normal((n, d))
        cases.append((f"{variant} block N={n} D={d} H=8", lambda x=x, cfg=cfg, w=w: attention_forward(x, cfg, w)))
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--precision", type=int, choices=(32, 64), default=32)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available")
    with precision(args.precision):
        rng = Rng(0)
        cases = kernel_cases(rng) + block_cases(rng)
        results = {}
        for backend in backends:
            with kernels.use_backend(backend):
                for name, fn in cases:
                    results[name, backend] = best_ms(fn, args.repeats)
    header = f"{'case':<36}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(f"precision={args.precision}")
    print(header)
    for name, _ in cases:
        row = f"{name:<36}" + "".join(f"{results[name, b]:>12.4f}" for b in backends)
        if len(backends) > 1:
            row += f"{results[name, 'python'] / results[name, 'cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    np.seterr(over="ignore")
    main()
