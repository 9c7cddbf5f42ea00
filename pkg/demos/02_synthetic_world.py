# %% [markdown]
# # The synthetic child/adult world
#
# Child samples of every identity share a common direction, so raw child
# features of different people look alike. Adult samples are spread out.

# %%
import numpy as np

from interproto.data import SyntheticSpec, generate_synthetic
from interproto.evaluation import build_verification_pairs, inter_class_similarity

ds = generate_synthetic(SyntheticSpec())
print(ds.summary())

# %%
child_ids = ds.child_ids()
X = ds.inputs
_, cc, _ = inter_class_similarity(X, ds.identities, ds.age_groups, "child", subjects=child_ids)
_, aa, _ = inter_class_similarity(X, ds.identities, ds.age_groups, "adult", subjects=child_ids)
off = ~np.eye(len(child_ids), dtype=bool)
print(f"raw input similarity between identities: child {cc[off].mean():.3f}, adult {aa[off].mean():.3f}")

# %% [markdown]
# Verification pairs always put one child sample against one adult sample
# with an age gap strictly larger than the requested one.

# %%
pairs = build_verification_pairs(ds, 20, count=5, seed=0)
print(pairs.to_csv_text(ds))
