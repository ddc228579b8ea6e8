"""Time the numba kernels against their numpy fallbacks.

Kernel rows call both implementations directly in this process. The
end-to-end rows (one training iteration, full test-split evaluation) run in
a subprocess per backend, because the backend is fixed at import time by
CROSSMATCH_NO_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from crossmatch import kernels

if kernels.numba is None:
    sys.exit("numba is not installed; nothing to compare")


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    B, H = 64, 512
    z = rng.standard_normal((B, 4 * H))
    h, c = rng.standard_normal((B, H)), rng.standard_normal((B, H))
    mask = (rng.random(B) < 0.8).astype(np.float64)
    _, _, acts, tanh_c = kernels.lstm_cell_forward_np(z, h, c, mask)
    dh, dc = rng.standard_normal((B, H)), rng.standard_normal((B, H))
    M, N = 256, 256
    scores = rng.standard_normal((M, N))
    pl, gl = rng.integers(0, 32, M), rng.integers(0, 32, N)
    cases = [
        ("lstm_cell_forward B=64 H=512", kernels.lstm_cell_forward_np, kernels.lstm_cell_forward_nb, (z, h, c, mask)),
        ("lstm_cell_backward B=64 H=512", kernels.lstm_cell_backward_np, kernels.lstm_cell_backward_nb,
         (dh, dc, acts, tanh_c, c, mask)),
        ("first_hit_positions 256x256", kernels.first_hit_positions_np, kernels.first_hit_positions_nb, (scores, pl, gl)),
        ("topk_correct_counts 256x256 k=50", kernels.topk_correct_counts_np, kernels.topk_correct_counts_nb,
         (scores, pl, gl, 50)),
    ]
    rows = []
    for name, f_np, f_nb, a in cases:
        t_np = best_of(lambda: f_np(*a), repeat)
        t_nb = best_of(lambda: f_nb(*a), repeat)
        rows.append((name, t_np, t_nb))
    return rows


END_TO_END = r"""
import json, time
import numpy as np
from crossmatch import data, trainer
from crossmatch.retrieval import evaluate
ds = data.generate(data.SyntheticSpec(seed=0))
cfg = trainer.TrainConfig(seed=0)
model = trainer.Model(trainer.dims_for(ds, cfg), seed=0)
tr = trainer.Trainer(model, cfg)
batch = next(data.batches(ds, 64, [0, 0, 0]))
dpair = next(data.batches(ds, 64, [0, 0, 1], paired=False))
tr.train_step(batch, [dpair])
t_step = []
for _ in range(REPEAT):
    t0 = time.perf_counter(); tr.train_step(batch, [dpair]); t_step.append(time.perf_counter() - t0)
phi, tau, y = tr.embed(ds, "test")
evaluate(tau, phi, y, y)
t_eval = []
for _ in range(REPEAT):
    t0 = time.perf_counter(); evaluate(tau, phi, y, y); t_eval.append(time.perf_counter() - t0)
print(json.dumps({"step": min(t_step), "eval": min(t_eval)}))
"""


def end_to_end(no_numba, repeat):
    env = dict(os.environ, CROSSMATCH_NO_NUMBA="1" if no_numba else "0", OMP_NUM_THREADS="1",
               OPENBLAS_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", END_TO_END.replace("REPEAT", str(repeat))],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()
    rows = kernel_rows(args.repeat)
    if not args.skip_end_to_end:
        e_np, e_nb = end_to_end(True, max(3, args.repeat // 4)), end_to_end(False, max(3, args.repeat // 4))
        rows.append(("train iteration (D-step + G-step, B=64)", e_np["step"], e_nb["step"]))
        rows.append(("evaluate t2i, 128x128", e_np["eval"], e_nb["eval"]))
    print(f"{'case':44s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows:
        print(f"{name:44s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
