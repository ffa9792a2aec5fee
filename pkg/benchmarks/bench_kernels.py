"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once before timing so numba compilation is excluded.
The end-to-end row trains one epoch in a subprocess per backend, since the
backend is fixed at import time by VKD_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vkd import _kernels as K

EPOCH_SNIPPET = """
import time
from vkd.data import GenSpec, generate, split
from vkd.model import ModelConfig, init_params
from vkd.trainer import TrainConfig, Trainer
tr, va, _ = split(generate(GenSpec()), (4000 / 6000, 1000 / 6000, 1000 / 6000), 0)
trainer = Trainer(init_params(ModelConfig(), 0), tr, va, TrainConfig(max_epochs=2))
trainer.run_epoch()
start = time.perf_counter()
trainer.run_epoch()
print(time.perf_counter() - start)
"""


def cases(rng):
    table = rng.standard_normal((256, 32))
    tokens = rng.integers(0, 256, size=(64, 32))
    tokens[:, 20:] = 0
    grad = rng.standard_normal((64, 32))
    counts = (tokens != 0).sum(axis=1).astype(np.float64)
    logits = rng.standard_normal((64, 6)) * 3
    targets = rng.integers(0, 2, size=(64, 6)).astype(np.float64)
    scores = np.round(rng.random(1000), 3)
    labels = rng.integers(0, 2, 1000)
    return [
        ("embed_mean forward", K.embed_mean_forward_np, K.embed_mean_forward_nb, (table, tokens)),
        ("embed_mean backward", K.embed_mean_backward_np, K.embed_mean_backward_nb, (grad, tokens, counts, 256)),
        ("bce_with_logits", K.bce_logits_np, K.bce_logits_nb, (logits, targets)),
        ("mann_whitney_auc n=1000", K.mann_whitney_auc_np, K.mann_whitney_auc_nb, (scores, labels)),
    ]


def best_of(fn, args, repeat):
    fn(*args)
    number = 200
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def epoch_seconds(disable):
    env = dict(os.environ, VKD_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-epoch", action="store_true", help="kernels only")
    args = parser.parse_args()
    if not K.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<26}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, np_fn, nb_fn, fn_args in cases(np.random.default_rng(0)):
        t_np = best_of(np_fn, fn_args, args.repeat) * 1e6
        t_nb = best_of(nb_fn, fn_args, args.repeat) * 1e6
        print(f"{name:<26}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")
    if not args.skip_epoch:
        t_np, t_nb = epoch_seconds(True), epoch_seconds(False)
        print(f"{'train epoch (s)':<26}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
