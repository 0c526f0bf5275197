# %% [markdown]
# # Compressing a wide teacher into a thin student
#
# A two-stage teacher is trained on a synthetic four-class task, then a
# much thinner student is trained twice from the same initialisation: once
# on labels alone, once with contrastive transfer from the teacher's
# intermediate and penultimate representations. One seed takes about 20 s.

# %%
import numpy as np

from cktf import (CKTWeights, CriticParams, LossConfig, ModelSpec, StageSpec, TrainingSchedule,
                  build_cnn, fit_supervised, make_synthetic, run_distillation)

shape = (1, 8, 8)
train = make_synthetic(4, 100, shape, seed=1, pattern_seed=0)
test = make_synthetic(4, 50, shape, seed=2, pattern_seed=0)
schedule = TrainingSchedule.desk()
print(len(train), "train /", len(test), "test images; lr drops at", schedule.decay_epochs)

def spec(*stages):
    return ModelSpec(stages=stages, num_classes=4, input_shape=shape)

teacher_spec = spec(StageSpec(16, 2), StageSpec(32, 2, downsample=True))
student_spec = spec(StageSpec(4, 1), StageSpec(8, 1, downsample=True))

# %%
teacher = build_cnn(teacher_spec, seed=0)
res = fit_supervised(teacher, train, test, schedule)
print(f"teacher: {teacher.num_parameters()} params, test acc {res.final_test_acc:.3f}")

# %% [markdown]
# The composite objective here is cross-entropy plus the contrastive term,
# weighted 0.8 on the module sites and 0.2 on the penultimate site.

# %%
seed = 0
baseline = fit_supervised(build_cnn(student_spec, 100 + seed), train, test, schedule, seed=seed)
cfg = LossConfig(gamma=1, critic=CriticParams(tau=0.1, num_negatives=64, dataset_size=len(train)),
                 ckt_weights=CKTWeights(0.8, 0.2))
distilled = run_distillation(teacher, build_cnn(student_spec, 100 + seed), train, test, cfg, schedule, seed=seed)
print(f"student: {distilled.model.num_parameters()} params")
print(f"  labels only      {baseline.final_test_acc:.3f}")
print(f"  with transfer    {distilled.final_test_acc:.3f}")
print("  mapped (teacher, student) layers:", distilled.mapping.pairs)

# %% [markdown]
# Per-epoch loss components are kept on the result, one record per epoch.

# %%
for r in distilled.metrics[::5]:
    parts = "  ".join(f"{k} {v:.3f}" for k, v in r.losses.items())
    print(f"epoch {r.epoch:2d}  lr {r.lr:g}  {parts}  test {r.test_acc:.3f}")
