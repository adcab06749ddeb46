"""Instrumented training diagnostics: term magnitudes, nu trajectory, mu impact."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from dataclasses import replace

from koopmhe.config import load_config
from koopmhe.experiments import benchmark_dataset, child_seed
from koopmhe.nn import adam_init, adam_step
from koopmhe.physics import TemperaturePhysics
from koopmhe.rng import substream
from koopmhe.training import (
    LossWeights,
    _apply_param_grads,
    _data_val_loss,
    _model_params,
    evaluate_prediction,
    make_batch,
    pretrain_noise_net,
    sample_window_noise,
    total_loss_and_grads,
)

SEED = int(sys.argv[1])
EPOCHS = int(sys.argv[2])
USE_MU = sys.argv[3] == "mu"
SSCALE = tuple(float(v) for v in sys.argv[4].split(","))
PHYSICS = sys.argv[5] == "pi" if len(sys.argv) > 5 else True

cfg = load_config(text="""
[train]
pretrain_epochs = 80
""")
train_ds = benchmark_dataset(cfg, SEED, "train")
test_ds = benchmark_dataset(cfg, SEED, "test")
Xt, Ut = test_ds.windows()
tcfg = replace(cfg.train, seed=child_seed(SEED, "training"))

t0 = time.time()
model, _ = pretrain_noise_net(train_ds, tcfg)
print(f"pretrain done {time.time()-t0:.0f}s", flush=True)

X, U = train_ds.train_windows()
Xv, Uv = train_ds.val_windows()
train = make_batch(model.scaler, X, U)
val = make_batch(model.scaler, Xv, Uv)
weights = LossWeights(static_scale=np.array(SSCALE))
fp = TemperaturePhysics(cfg.process_params, train_ds.dt) if PHYSICS else None
params = _model_params(model)
opt = adam_init(params, learning_rate=tcfg.lr)
opt_nu = adam_init([weights.rho], learning_rate=tcfg.lr_nu)
brng = substream(tcfg.seed, "batches")
mrng = substream(tcfg.seed, "mu")

best = (np.inf, None)
for epoch in range(EPOCHS):
    perm = brng.permutation(train.n)
    rho_g = np.zeros(4)
    nb = 0
    for s in range(0, train.n, tcfg.batch_size):
        idx = perm[s: s + tcfg.batch_size]
        sub = train.subset(idx)
        mu = None
        if USE_MU:
            z0 = model.lift(sub.X[:, 0], already_scaled=True)
            mu = sample_window_noise(model, z0, mrng)
        total, parts, grads = total_loss_and_grads(model, sub, weights, fp, mu,
                                                   PHYSICS)
        adam_step(params, _apply_param_grads(model, grads), opt)
        rho_g += grads["rho"]
        nb += 1
    nact = 4 if PHYSICS else 2
    rho_g[nact:] = 0.0
    adam_step([weights.rho], [rho_g / nb], opt_nu)
    v = _data_val_loss(model, val, weights.static_scale)
    if v < best[0]:
        best = (v, model.copy())
    if epoch % 10 == 0 or epoch == EPOCHS - 1:
        mse = evaluate_prediction(model, Xt, Ut)[0]
        nu = weights.nu
        eff = weights.effective()
        print(f"ep {epoch:3d}: val {v:8.3f} test {mse:8.4f} "
              f"Lx {parts['loss_x']:.4f} Lz {parts['loss_z']:.4f} "
              f"Lpx {parts['loss_px']:.5f} Lpz {parts['loss_pz']:.5f} "
              f"nu {np.array2string(nu, precision=2)} "
              f"eff {np.array2string(eff, precision=2)}", flush=True)

mse_final = evaluate_prediction(model, Xt, Ut)[0]
mse_best = evaluate_prediction(best[1], Xt, Ut)[0]
print(f"final test {mse_final:.5f}  best-val test {mse_best:.5f}")
