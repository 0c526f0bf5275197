# %% [markdown]
# # Anatomy of the contrastive objective
#
# A student embedding is pulled toward the teacher embedding of the same
# input and pushed away from teacher embeddings of other inputs. Scores go
# through the critic f(u, v) = exp(u.v / tau) / (exp(u.v / tau) + N / N_d),
# where N is the number of negatives and N_d the dataset size.

# %%
import math

import numpy as np

from cktf import CriticParams, critic_f, nce_loss

params = CriticParams(tau=0.1, num_negatives=4, dataset_size=4)

# %% [markdown]
# With N = N_d the critic at zero similarity is exactly one half, and it
# saturates quickly as the similarity grows because of the small temperature.

# %%
e = np.eye(3)
for s in (-1.0, 0.0, 0.1, 0.5, 1.0):
    u = np.array([1.0, 0.0, 0.0])
    v = np.array([s, math.sqrt(1 - s * s), 0.0])
    print(f"u.v = {s:+.1f}  f = {critic_f(u, v, params):.6f}")

# %% [markdown]
# When every pair scores the same, the loss cannot tell the positive apart
# and equals log(N + 1). Aligned positives with antipodal negatives drive it
# toward zero.

# %%
rng = np.random.default_rng(0)
anchor = rng.normal(size=(3, 8))
anchor /= np.linalg.norm(anchor, axis=1, keepdims=True)
same = np.repeat(anchor[:, None, :], 4, axis=1)
print("uniform scores:", nce_loss(anchor, anchor, same, params).item(), "vs log 5 =", math.log(5))
print("antipodal negatives:", nce_loss(anchor, anchor, -same, params).item())

# %% [markdown]
# ## Why the projection heads centre their inputs
#
# Pooled ReLU features are nonnegative, so an affine head maps every sample
# into a narrow cone. All pairwise similarities then sit near 1, the critic
# saturates, and the loss is stuck at log(N + 1) with almost no gradient.
# Subtracting the batch mean before each affine map spreads the embeddings
# over the sphere.

# %%
from cktf import make_heads
from cktf import tensor as T

feats = T.Tensor(rng.random((16, 32)))   # nonnegative, like pooled activations
for centred in (False, True):
    heads = make_heads([32], [32], d=16, seed=0, batch_center=centred)
    z = heads.modules[0].student(feats).data
    sims = z @ z.T
    off = sims[~np.eye(16, dtype=bool)]
    print(f"batch_center={centred}: mean off-diagonal cosine {off.mean():+.3f}")

# %% [markdown]
# The oracle suite checks the module and penultimate losses against a
# direct, loop-by-loop summation for 50 random instances.

# %%
from cktf.suites import oracle_suite

for r in oracle_suite():
    print(r.line())
