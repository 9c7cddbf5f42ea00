# %% [markdown]
# # Heatmaps and a 2-D view of the prototypes
#
# Writes CSV and PGM heatmaps into ``demo_output/`` for a baseline run and a
# penalized run, plus a PCA projection of the prototypes.

# %%
from pathlib import Path

from interproto.config import ExperimentConfig
from interproto.evaluation import project_prototypes_2d
from interproto.experiments import analysis_files, datasets_for, run_arm

cfg = ExperimentConfig()
train_ds, _ = datasets_for(cfg)
out = Path("demo_output")

# %%
for arm in ("baseline", "ip"):
    params, head, _ = run_arm(cfg, arm, 0, train_ds)
    files, info = analysis_files(params, head, train_ds)
    target = out / arm
    target.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (target / name).write_bytes(data)
    print(arm, {k: round(v, 4) if isinstance(v, float) else v for k, v in info.items()})

# %% [markdown]
# Child prototypes (flagged ``True``) spread around the origin once the
# penalty is on; without it they bunch together.

# %%
coords, is_child = project_prototypes_2d(head)
for i, ((x, y), c) in enumerate(zip(coords, is_child)):
    if i < 8:
        print(f"{i:2d} {'child' if c else 'adult':5s} {x:+.3f} {y:+.3f}")
