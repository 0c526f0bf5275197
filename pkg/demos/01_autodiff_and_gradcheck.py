# %% [markdown]
# # The tensor engine
#
# Everything in cktf runs on a small reverse-mode autodiff engine over
# float64 numpy arrays. This walkthrough builds a tiny conv net by hand,
# backpropagates through it, and checks the result against central
# finite differences.

# %%
import numpy as np

from cktf import Tensor, finite_diff_check
from cktf import tensor as T

rng = np.random.default_rng(0)

# %% [markdown]
# A tensor records the operation that produced it. Calling `backward` on a
# scalar walks that graph in reverse and fills `.grad` on every leaf that
# asked for one.

# %%
x = Tensor(rng.normal(size=(2, 1, 6, 6)))
w = Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

h = T.relu(T.conv2d(x, w, b, stride=1, padding=1))
pooled = T.global_avg_pool(h).reshape(2, 3)
loss = T.log_softmax(pooled).mean() * -1.0
loss.backward()
print("loss", loss.item())
print("dL/dw shape", w.grad.shape, "dL/db", b.grad)

# %% [markdown]
# `finite_diff_check` perturbs each input entry by +-h and compares the
# slope with the analytic gradient. Relative errors around 1e-9 are typical
# in float64; the acceptance bar is 1e-5.

# %%
def net(weight):
    return T.log_softmax(T.global_avg_pool(T.relu(T.conv2d(x, weight, b, padding=1))).reshape(2, 3)).mean() * -1.0

print("conv weight rel err", finite_diff_check(net, w.data))
print("l2_normalize rel err", finite_diff_check(lambda v: (T.l2_normalize(v) * Tensor(rng.normal(size=(4, 5)))).sum(),
                                                rng.normal(size=(4, 5))))

# %% [markdown]
# The packaged suite covers every differentiable op plus the full composite
# objective. The same thing runs from the shell as `cktf gradcheck`.

# %%
from cktf.suites import gradcheck_suite

for r in gradcheck_suite():
    print(r.line())
