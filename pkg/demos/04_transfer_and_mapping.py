# %% [markdown]
# # Transfer to a new domain, and choosing which teacher layers to tap
#
# A teacher trained on domain A distils into a student using only unlabeled
# images from domain B (the cross-entropy weight is zero). A linear probe on
# the frozen student then measures how useful the transferred features are,
# compared with a probe on a randomly initialised student.

# %%
from cktf import (CriticParams, LossConfig, MappingStrategy, ModelSpec, StageSpec, TrainingSchedule,
                  build_cnn, fit_linear, fit_supervised, make_synthetic, map_layers, run_distillation)

shape = (1, 8, 8)

def spec(*stages):
    return ModelSpec(stages=stages, num_classes=4, input_shape=shape)

a_train, a_test = make_synthetic(4, 100, shape, seed=1, pattern_seed=0), make_synthetic(4, 50, shape, seed=2, pattern_seed=0)
b_train, b_test = make_synthetic(4, 100, shape, seed=3, pattern_seed=7), make_synthetic(4, 50, shape, seed=4, pattern_seed=7)
schedule = TrainingSchedule.desk()

teacher = build_cnn(spec(StageSpec(16, 2), StageSpec(32, 2, True)), seed=0)
print("teacher on A:", fit_supervised(teacher, a_train, a_test, schedule).final_test_acc)
student_spec = spec(StageSpec(4, 1), StageSpec(8, 1, True))

# %% [markdown]
# Single runs are noisy at this scale (a seed can go either way), so five
# seeds are averaged. This cell takes about a minute.

# %%
import numpy as np

cfg = LossConfig(gamma=0, critic=CriticParams(0.1, 64, len(b_train)))
random_probe, transfer_probe = [], []
for s in range(5):
    random_probe.append(fit_linear(build_cnn(student_spec, 100 + s), b_train, b_test, schedule, seed=s).final_test_acc)
    student = run_distillation(teacher, build_cnn(student_spec, 100 + s), b_train.unlabeled(), None, cfg,
                               schedule, seed=s).model
    transfer_probe.append(fit_linear(student, b_train, b_test, schedule, seed=s).final_test_acc)
    print(f"seed {s}: random init {random_probe[-1]:.3f}, after transfer {transfer_probe[-1]:.3f}")
print(f"mean: random init {np.mean(random_probe):.3f}, after transfer {np.mean(transfer_probe):.3f}")

# %% [markdown]
# ## Layer mapping strategies
#
# The student always contributes the last layer of each module. On the
# teacher side a module can contribute its first, last, or a random layer,
# or the layer whose mean activation is most (or least) cosine-similar to
# the student's on a probe batch. The two cosine strategies share one
# score table and differ only in argmax versus argmin.

# %%
probe = b_train.images[:64]
fresh = build_cnn(student_spec, 100)
for name in ("teacher_first", "teacher_last", "teacher_random", "cosine_max", "cosine_min"):
    m = map_layers(MappingStrategy(name, seed=1), teacher, fresh, probe)
    print(f"{name:15s} pairs {m.pairs}")
print("cosine scores per module:", [[round(s, 3) for s in row] for row in m.scores])
