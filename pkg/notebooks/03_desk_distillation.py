# %% [markdown]
# # A desk-sized distillation run
#
# ResNet20 teaches ResNet8 on the synthetic cue task at 16x16, using the
# desk configuration with a single seed. It takes about four minutes on one
# CPU core.

# %%
import dataclasses
import tempfile
from pathlib import Path

import numpy as np
import torch

from afd import LinkKind, LinkStrategy, LossWeights, desk_config, export_attention
from afd.data import make_synthetic
from afd.models import load_checkpoint
from afd.train import pretrain_teacher, run_distillation

torch.set_num_threads(1)
torch.set_printoptions(precision=2, sci_mode=False)
out = Path(tempfile.mkdtemp(prefix="afd-desk-"))

cfg = desk_config()
print(cfg.teacher_arch.name, "->", cfg.student_arch.name, "beta =", cfg.weights.beta)

# %% [markdown]
# ## The data
#
# Every image has a few smooth blobs; one is textured and its colour is the
# label. The teacher sees all training images, the student only the first
# `student_subset` of them.

# %%
syn = cfg.synthetic
train, val = make_synthetic(syn.n_train, syn.n_val, syn.num_classes, syn.resolution,
                            seed=syn.seed, noise=syn.noise, distractors=syn.distractors)
print(train.images.shape, np.bincount(train.labels))

# %% [markdown]
# ## Teacher

# %%
ckpt, teacher_record = pretrain_teacher(cfg, out / "teacher", data=(train, val))
teacher, _ = load_checkpoint(ckpt)
print("teacher accuracy", teacher_record.final_accuracy)

# %% [markdown]
# ## Students
#
# No distillation, fixed level-matched links, and learned links.

# %%
variants = {
    "vanilla": dict(weights=LossWeights(beta=0.0, use_kd=False)),
    "ordered": dict(strategy=LinkStrategy(LinkKind.ORDERED)),
    "learned": dict(strategy=LinkStrategy(LinkKind.AFD_COTRAIN)),
}
traces = {}
for name, kw in variants.items():
    record, trace = run_distillation(dataclasses.replace(cfg, **kw), teacher=teacher,
                                     out_dir=out / name, data=(train, val))
    traces[name] = trace
    print(f"{name:8s} {record.final_accuracy:.3f}")

# %% [markdown]
# ## How the learned links evolve
#
# Rows are teacher candidates (shallow to deep), columns student candidates.
# Early on the rows are close to uniform; they sharpen as training goes on.

# %%
mats = traces["learned"].matrices
for epoch in (1, len(mats) // 2, len(mats)):
    print("epoch", epoch)
    print(mats[epoch - 1])

# %% [markdown]
# ## Export
#
# One CSV with every epoch and one heatmap per epoch (students on rows,
# teachers on columns).

# %%
files = export_attention(out / "learned" / "trace", out / "export")
print(len(files), files[0])
print(files[0].read_text().splitlines()[:4])
