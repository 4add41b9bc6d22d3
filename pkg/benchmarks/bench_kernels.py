"""Compare the numba kernels with their numpy twins, alone and inside a training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 20]
"""

import argparse
import timeit

import numpy as np

from m3s import kernels as K
from m3s.data import Corpus, build_vocab, corpus_texts, synth_corpus
from m3s.experiments import OVERFIT_SYNTH, OVERFIT_TRAIN, micro_model
from m3s.training import cross_pairs, new_state, train_step


def kernel_cases(rng):
    x = rng.normal(size=(8 * 12, 64)).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    y = K.softmax_fwd_np(x)
    ly = K.log_softmax_fwd_np(x)
    _, xhat, rstd = K.layernorm_fwd_np(x, gamma, beta, np.float32(1e-5))
    ids = rng.integers(0, 40, size=x.shape[0])
    a, b = rng.integers(0, 30, size=60), rng.integers(0, 30, size=60)
    return {
        "softmax_fwd": lambda s: getattr(K, f"softmax_fwd_{s}")(x),
        "softmax_bwd": lambda s: getattr(K, f"softmax_bwd_{s}")(y, g),
        "log_softmax_fwd": lambda s: getattr(K, f"log_softmax_fwd_{s}")(x),
        "log_softmax_bwd": lambda s: getattr(K, f"log_softmax_bwd_{s}")(ly, g),
        "layernorm_fwd": lambda s: getattr(K, f"layernorm_fwd_{s}")(x, gamma, beta, np.float32(1e-5)),
        "layernorm_bwd": lambda s: getattr(K, f"layernorm_bwd_{s}")(g, xhat, rstd, gamma),
        "gelu_fwd": lambda s: getattr(K, f"gelu_fwd_{s}")(x),
        "gelu_bwd": lambda s: getattr(K, f"gelu_bwd_{s}")(x, g),
        "scatter_rows": lambda s: getattr(K, f"scatter_rows_{s}")(ids, g, 40),
        "lcs_length": lambda s: getattr(K, f"lcs_length_{s}")(a, b),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def train_step_time(backend, steps):
    K.use_backend(backend)
    records, _, vision = synth_corpus(OVERFIT_SYNTH)
    vocab = build_vocab(corpus_texts(records), list(OVERFIT_SYNTH.langs))
    corpus = Corpus(records)
    state = new_state(micro_model(len(vocab)), OVERFIT_TRAIN, vocab)
    rng = np.random.default_rng(0)
    pairs = cross_pairs(vocab.langs)
    train_step(state, corpus, vision, pairs, rng)  # warm up (and compile)
    t = timeit.timeit(lambda: train_step(state, corpus, vision, pairs, rng), number=steps)
    return t / steps


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--number", type=int, default=50)
    p.add_argument("--steps", type=int, default=20)
    args = p.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':18s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        fn("nb")  # compile
        t_np = best_of(lambda: fn("np"), args.repeat, args.number)
        t_nb = best_of(lambda: fn("nb"), args.repeat, args.number)
        print(f"{name:18s} {1e6 * t_np:10.1f} {1e6 * t_nb:10.1f} {t_np / t_nb:8.2f}")
    before = K.backend()
    try:
        step_np = train_step_time("numpy", args.steps)
        step_nb = train_step_time("numba", args.steps)
    finally:
        K.use_backend(before)
    print(f"{'train_step':18s} {1e3 * step_np:9.1f}ms {1e3 * step_nb:9.1f}ms {step_np / step_nb:8.2f}")


if __name__ == "__main__":
    main()
