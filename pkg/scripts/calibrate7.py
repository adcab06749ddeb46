"""Calibration sweep for the physics-vs-baseline modeling comparison."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from koopmhe.config import load_config
from koopmhe.experiments import benchmark_dataset, child_seed, train_benchmark_models
from koopmhe.training import evaluate_prediction

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 200
PRE = int(sys.argv[2]) if len(sys.argv) > 2 else 80
SEEDS = [int(s) for s in sys.argv[3].split(",")] if len(sys.argv) > 3 else [101, 102, 103]

cfg = load_config(text=f"""
[train]
epochs = {EPOCHS}
pretrain_epochs = {PRE}
track_test_mse = true
""")

results = []
for seed in SEEDS:
    t0 = time.time()
    train_ds = benchmark_dataset(cfg, seed, "train")
    test_ds = benchmark_dataset(cfg, seed, "test")
    Xt, Ut = test_ds.windows()
    m_pi, _, rep_pi = train_benchmark_models(cfg, seed, train_ds, True, (Xt, Ut))
    m_da, _, rep_da = train_benchmark_models(cfg, seed, train_ds, False, (Xt, Ut))
    mse_pi = evaluate_prediction(m_pi, Xt, Ut)[0]
    mse_da = evaluate_prediction(m_da, Xt, Ut)[0]
    impr = 1 - mse_pi / mse_da
    results.append((seed, mse_pi, mse_da, impr))
    print(f"seed {seed}: pi {mse_pi:.5f} data {mse_da:.5f} improvement {impr:+.1%}"
          f"  ({time.time()-t0:.0f}s)", flush=True)
    tr = rep_pi.epochs
    print("  pi test trace:", [f"{r['test_mse']:.4f}" for r in tr[:: max(1, len(tr)//8)]], flush=True)
    tr = rep_da.epochs
    print("  da test trace:", [f"{r['test_mse']:.4f}" for r in tr[:: max(1, len(tr)//8)]], flush=True)

imps = [r[3] for r in results]
print("median improvement:", np.median(imps), "mean pi:", np.mean([r[1] for r in results]),
      "mean data:", np.mean([r[2] for r in results]))
