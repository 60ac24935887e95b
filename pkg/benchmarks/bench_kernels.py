"""Compare the compiled kernels with the numpy fallback.

Runs each kernel on model-sized inputs under both backends and then times
one training epoch end to end in a subprocess per backend.

    python benchmarks/bench_kernels.py [--repeat 200] [--samples 64]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from evigrid._kernels import _pykernels

try:
    from evigrid._kernels import _ckernels
except ImportError:
    _ckernels = None


def kernel_cases(L=44, C=32, heads=2, T=20, seed=0):
    rng = np.random.default_rng(seed)
    qkv = rng.standard_normal((L, 3 * C))
    x = rng.standard_normal((L, C))
    g = rng.standard_normal((L, C))
    gain, bias = rng.standard_normal((1, C)), rng.standard_normal((1, C))
    logits = rng.standard_normal((L, 64))
    glog = rng.standard_normal((L, 64))
    sims = rng.uniform(size=(4, T))
    targets = (rng.uniform(size=(4, T)) > 0.5) * 1.0
    ious = rng.uniform(size=(3, 3))

    def cases(k):
        _, probs = k.attention_forward(qkv, heads)
        _, xhat, rstd = k.layer_norm_forward(x, gain, bias, 1e-5)
        _, th = k.gelu_forward(x)
        lsm = k.log_softmax_forward(logits)
        return {
            "attention_forward": lambda: k.attention_forward(qkv, heads),
            "attention_backward": lambda: k.attention_backward(g, qkv, probs, heads),
            "layer_norm_forward": lambda: k.layer_norm_forward(x, gain, bias, 1e-5),
            "layer_norm_backward": lambda: k.layer_norm_backward(g, xhat, rstd, gain),
            "gelu_forward": lambda: k.gelu_forward(x),
            "gelu_backward": lambda: k.gelu_backward(g, x, th),
            "log_softmax_forward": lambda: k.log_softmax_forward(logits),
            "log_softmax_backward": lambda: k.log_softmax_backward(glog, lsm),
            "bernoulli_loglik": lambda: k.bernoulli_loglik(sims, targets, 1e-6),
            "best_interval": lambda: k.best_interval(sims[0], 1e-6),
            "greedy_match": lambda: k.greedy_match(ious, 0.3),
        }

    return cases


EPOCH_SCRIPT = """
import time
from evigrid import _kernels
from evigrid.model import GeneratorConfig, ModelConfig, TrainConfig, init_model, make_toy_dataset, train
data = make_toy_dataset({n}, GeneratorConfig(), seed=1)
cfg = ModelConfig()
store = init_model(cfg, 0)
t0 = time.perf_counter()
train(store, cfg, data, TrainConfig(epochs=1))
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def epoch_time(backend, n):
    env = dict(os.environ, EVIGRID_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--samples", type=int, default=64, help="training samples for the epoch timing")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    cases = kernel_cases()
    py, cy = cases(_pykernels), cases(_ckernels)
    print(f"{'kernel':<22} {'python_us':>10} {'compiled_us':>12} {'speedup':>8}")
    for name in py:
        tp = min(timeit.repeat(py[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
        tc = min(timeit.repeat(cy[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<22} {tp:>10.1f} {tc:>12.1f} {tp / tc:>8.2f}")
    _, tp = epoch_time("python", args.samples)
    _, tc = epoch_time("compiled", args.samples)
    print(f"{'train epoch (' + str(args.samples) + ')':<22} {tp * 1e6:>10.0f} {tc * 1e6:>12.0f} {tp / tc:>8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
