#!/usr/bin/env python3
# Truncated and reweighted CE on the same noisy set, plus a look at which
# interactions truncation throws away.
import numpy as np

from adtrec.data import inject_false_positives, split_holdout, synthesize_dataset
from adtrec.denoise import DropRateSchedule, batch_weights
from adtrec.evaluation import denoise_precision_recall, evaluate
from adtrec.train import TrainConfig, train

# %% the weights on a toy batch: 4 positives then 4 negatives
y_hat = np.array([0.9, 0.05, 0.6, 0.2, 0.1, 0.7, 0.3, 0.5])
y_bar = np.array([1, 1, 1, 1, 0, 0, 0, 0])
sched = DropRateSchedule.from_epsilon_n(0.2, 600)
print("drop rate at T=0, 300, 600, 5000:", [round(sched(T), 3) for T in (0, 300, 600, 5000)])
print("T-CE weights at T=600:", batch_weights("T-CE", y_hat, y_bar, T=600, schedule=sched))
print("R-CE weights, beta=1:  ", np.round(batch_weights("R-CE", y_hat, y_bar, beta=1.0), 3))

# %% train the three strategies
ds = synthesize_dataset(2000, 1000, 16, 0.02, seed=0)
ds = inject_false_positives(split_holdout(ds, (0.8, 0.1, 0.1), seed=0), 0.3, seed=0)
runs = {}
for strategy in ("CE", "T-CE", "R-CE"):
    cfg = TrainConfig(strategy=strategy, lr=0.005, max_iter=3000, epsilon_max=0.2, epsilon_n=600, beta=1.0)
    runs[strategy] = train(ds, cfg)
    print(f"{strategy:5s} recall@20 {evaluate(runs[strategy].model, ds).metrics['recall@20']:.4f}")

# %% what truncation dropped, per epoch
rows = denoise_precision_recall(runs["T-CE"].drop_log, ds)
for r in rows[:3] + rows[-3:]:
    print(f"epoch {r['epoch']:3d}  eps {r['epsilon']:.3f}  recall {r['recall']:.3f}  "
          f"precision {r['precision']:.3f}  (FP share {r['baseline_precision']:.3f})")

# %% under T-CE the false positives stay hard instead of being memorized
for name in ("CE", "T-CE"):
    log = runs[name].log
    print(f"{name:5s} final FP loss {log.column('fp_mean')[-1]:.3f}, TP loss {log.column('tp_mean')[-1]:.3f}")
