#!/usr/bin/env python3
# The three recommenders side by side: a gradient check, a short T-CE run,
# and a checkpoint round trip.
import tempfile
from pathlib import Path

import numpy as np

from adtrec.data import inject_false_positives, split_holdout, synthesize_dataset
from adtrec.evaluation import evaluate
from adtrec.model import backprop_batch, load_checkpoint, save_checkpoint, sigmoid
from adtrec.train import TrainConfig, train, user_item_matrix

ds = synthesize_dataset(600, 400, 8, 0.05, seed=0)
ds = inject_false_positives(split_holdout(ds, (0.8, 0.1, 0.1), seed=0), 0.3, seed=0)

# %% one finite-difference probe per model on a single coordinate
for kind in ("gmf", "neumf", "cdae"):
    cfg = TrainConfig(model=kind, factors=8, layers=(16, 8, 4), hidden=32, strategy="T-CE", lr=0.005,
                      max_iter=600, epsilon_n=200)
    res = train(ds, cfg)
    m = res.model
    users, items, labels = ds.train.users[:32], ds.train.items[:32], np.ones(32)
    grads, _ = backprop_batch(m, users, items, labels, np.ones(32), np.random.default_rng(0))
    name = next(iter(m.params))
    h, old = 1e-5, m.params[name].flat[0]

    def loss():
        p = sigmoid(m.forward(users, items, np.random.default_rng(0))[0])
        return -np.sum(np.log(p))

    m.params[name].flat[0] = old + h
    up = loss()
    m.params[name].flat[0] = old - h
    down = loss()
    m.params[name].flat[0] = old
    print(f"{kind:6s} {m.n_params():7d} params  dL/d{name}[0] analytic {grads[name].flat[0]:+.6f} "
          f"numeric {(up - down) / (2 * h):+.6f}  recall@20 {evaluate(m, ds).metrics['recall@20']:.4f}")

    # checkpoints store float32 blocks behind a small JSON header
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / f"{kind}.ckpt"
        save_checkpoint(m, path, step=res.iterations)
        back, header = load_checkpoint(path, user_items=user_item_matrix(ds) if kind == "cdae" else None)
        print("       checkpoint", header["kind"], header["step"], f"{path.stat().st_size} bytes")
