# %% [markdown]
# # Checking the loss gradients
#
# Every loss returns its own gradient with respect to the features and the
# prototypes. Here we compare those against central differences.

# %%
import numpy as np

from interproto.core_math import finite_diff_grad, max_relative_error
from interproto.losses import MarginConfig, inter_prototype_loss, total_loss, total_loss_values

rng = np.random.default_rng(0)
X = rng.normal(size=(8, 4))     # four samples, one per column
W = rng.normal(size=(8, 6))     # six identity prototypes
labels = np.array([0, 2, 3, 5])
child = [1, 3, 4]

# %%
for kind in ("softmax", "cosface", "arcface"):
    cfg = MarginConfig(kind=kind, scale=64.0, margin=0.0 if kind == "softmax" else 0.5, lambda_ip=1.0)
    res = total_loss(X, W, labels, child, cfg)
    # one call scores every perturbed copy of W (or X)
    num_w = finite_diff_grad(lambda S: total_loss_values(X, S, labels, child, cfg), W, batched=True)
    num_x = finite_diff_grad(lambda S: total_loss_values(S, W, labels, child, cfg), X, batched=True)
    print(f"{kind:8s} loss {res.loss:9.4f}  "
          f"err(W) {max_relative_error(res.grad_prototypes, num_w):.1e}  "
          f"err(X) {max_relative_error(res.grad_features, num_x):.1e}")

# %% [markdown]
# The penalty vanishes for orthogonal child prototypes, whatever their
# lengths, and equals 2 when two child prototypes point the same way
# (each ordered pair contributes one).

# %%
q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
print(inter_prototype_loss(q * [0.5, 2.0, 7.0], [0, 1, 2]).loss)
print(inter_prototype_loss(np.array([[1.0, 3.0], [2.0, 6.0]]), [0, 1]).loss)
