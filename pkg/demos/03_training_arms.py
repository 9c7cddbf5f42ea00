# %% [markdown]
# # Training with and without the penalty
#
# Three seeds for each arm. We watch the child prototypes pull apart and
# measure child-adult verification on identities never seen in training.

# %%
import numpy as np

from interproto.config import ExperimentConfig
from interproto.experiments import datasets_for, evaluate, run_arm

cfg = ExperimentConfig()
train_ds, test_ds = datasets_for(cfg)

results = {}
for arm in ("baseline", "ip", "ip_full", "reweight", "margin_up", "oversample"):
    for seed in cfg.seeds:
        params, head, ledger = run_arm(cfg, arm, seed, train_ds)
        m = evaluate(params, head, test_ds, cfg.gaps, cfg.pair_count, seed)
        results[arm, seed] = m

# %%
print(f"{'arm':11s} {'child |C|':>10s} {'verif>20':>9s} {'verif>30':>9s}")
for arm in dict.fromkeys(a for a, _ in results):
    rows = [results[arm, s] for s in cfg.seeds]
    cos = np.mean([r["child_mean_abs_cos"] for r in rows])
    v20 = np.mean([r["verification"]["20"] for r in rows])
    v30 = np.mean([r["verification"]["30"] for r in rows])
    print(f"{arm:11s} {cos:10.4f} {v20:9.4f} {v30:9.4f}")

# %% [markdown]
# One training curve, epoch by epoch.

# %%
_, _, ledger = run_arm(cfg, "ip", 0, train_ds)
for r in ledger.records[::5]:
    print(f"epoch {r['epoch']:2d} lr {r['lr']:.3g} loss {r['loss']:.3f} "
          f"ip {r['ip_loss']:.4f} child |C| {r['child_mean_abs_cos']:.4f}")
