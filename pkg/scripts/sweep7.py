"""Sweep static weights / beta / noise level for the PI-vs-baseline gap."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from koopmhe.config import load_config
from koopmhe.experiments import benchmark_dataset, train_benchmark_models
from koopmhe.training import evaluate_prediction

label = sys.argv[1]
static = sys.argv[2]                 # e.g. "10,10,0.1,100"
beta = float(sys.argv[3])
noise_scale = float(sys.argv[4])
epochs = int(sys.argv[5])
pre = int(sys.argv[6])
seeds = [int(s) for s in sys.argv[7].split(",")]
mu_mode = sys.argv[8] if len(sys.argv) > 8 else "sample"
lr_decay = float(sys.argv[9]) if len(sys.argv) > 9 else 1.0

sig = noise_scale * np.array([1e-3, 1e-3, 0.1] * 3)
bound = noise_scale * np.array([5e-3, 5e-3, 0.5] * 3)

cfg = load_config(text=f"""
[train]
epochs = {epochs}
pretrain_epochs = {pre}
static_scale = {static}
beta = {beta}
mu_mode = {mu_mode}
lr_decay = {lr_decay}
[disturbance]
sigma = {','.join(str(v) for v in sig)}
bound = {','.join(str(v) for v in bound)}
""")

imps = []
for seed in seeds:
    t0 = time.time()
    train_ds = benchmark_dataset(cfg, seed, "train")
    test_ds = benchmark_dataset(cfg, seed, "test")
    Xt, Ut = test_ds.windows()
    m_pi, _, _ = train_benchmark_models(cfg, seed, train_ds, True)
    m_da, _, _ = train_benchmark_models(cfg, seed, train_ds, False)
    mse_pi = evaluate_prediction(m_pi, Xt, Ut)[0]
    mse_da = evaluate_prediction(m_da, Xt, Ut)[0]
    impr = 1 - mse_pi / mse_da
    imps.append(impr)
    print(f"[{label}] seed {seed}: pi {mse_pi:.5f} data {mse_da:.5f} "
          f"improvement {impr:+.1%} ({time.time()-t0:.0f}s)", flush=True)

print(f"[{label}] median improvement {np.median(imps):+.1%}  "
      f"all {[f'{i:+.1%}' for i in imps]}", flush=True)
