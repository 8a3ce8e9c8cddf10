"""Simulating the learned dynamics backwards through time.

A forward neural SDE cannot simply be integrated backwards: the noise term
inflates variance in both directions.  A learned correction drift fixes
this; it is fitted with the forward weights frozen, by matching the earlier
snapshots under reverse simulation.  Expects a forward checkpoint from
demos/03 or trains a short one itself.
"""

import os

import numpy as np

from bridgeforge import datasets, ot, training
from bridgeforge.ot import SinkhornConfig
from bridgeforge.training import Checkpoint, TrainConfig

FORWARD_CKPT = "ou_forward.json"
FORWARD_EPOCHS = 60
REVERSE_EPOCHS = 80

ou = datasets.OuConfig(seed=0)
grid = list(ou.grid)
data = datasets.generate_ou(ou)

if os.path.exists(FORWARD_CKPT):
    ckpt = Checkpoint.load(FORWARD_CKPT)
    print(f"loaded forward checkpoint {FORWARD_CKPT}")
else:
    config = TrainConfig(grid=tuple(grid),
                         lambda_e=(0.3, 0.1, 0.01, 0.01),
                         lambda_h=(0.2, 0.01, 0.0001, 0.0001),
                         batch_size=256, max_epochs=FORWARD_EPOCHS, patience=20,
                         seed=0, diff_scale=2.0,
                         sinkhorn=SinkhornConfig(train_iters=50))
    print("training forward model ...")
    ckpt, _ = training.train(data, config, quiet=False)
    ckpt.save(FORWARD_CKPT)

print("\nnaive reverse run (no correction): integrate the forward drift")
print("backwards and keep injecting noise")
rev0 = Checkpoint(config=ckpt.config, potential=dict(ckpt.potential),
                  diffusion=dict(ckpt.diffusion),
                  corrector={k: np.zeros_like(v) for k, v in ckpt.potential.items()})
times_back = [3.0, 2.0, 1.0, 0.0]
truth = {t: datasets.ou_paths(ou, 1000, seed=40 + i, at_times=[t])[0][:, None]
         for i, t in enumerate(times_back)}

def backward_mdd(model):
    sim = training.reverse_simulator(model)
    start = datasets.ou_paths(ou, 1000, seed=99, at_times=[4.0])[0][:, None]
    clouds = sim(start, times_back, stream=("rev-demo",))
    return {t: ot.mdd(truth[t], clouds[i]) for i, t in enumerate(times_back)}

naive = backward_mdd(rev0)
print("  t      naive reverse MDD")
for t in times_back:
    print(f"  {t:3.0f}    {naive[t]:.4f}")

print(f"\ntraining the correction drift ({REVERSE_EPOCHS} epochs, forward "
      "weights frozen) ...")
rev, _ = training.train_reverse_corrector(ckpt, data, max_epochs=REVERSE_EPOCHS,
                                          lr=3e-3, quiet=False)
corrected = backward_mdd(rev)
print("\n  t      naive        corrected")
for t in times_back:
    print(f"  {t:3.0f}    {naive[t]:8.4f}    {corrected[t]:8.4f}")
print("\nThe corrected reverse marginals track the data all the way back to")
print("the initial population.")
