# %% [markdown]
# # Link weights between teacher and student features
#
# The meta-network looks at globally pooled teacher and student feature maps
# and produces a T x S matrix whose rows are probability vectors. Row t says
# how strongly teacher candidate t should be imitated by each student candidate.

# %%
import numpy as np
import torch

from afd import init_meta, global_avg_pool
from afd.meta import attention_logits, compute_key, compute_query

torch.manual_seed(0)
torch.set_printoptions(precision=3, sci_mode=False)

# %% [markdown]
# Three teacher candidates and two student candidates with different channel
# counts and spatial sizes. Only the channel count matters to the meta-network
# because it pools the spatial dimensions away first.

# %%
teacher = [torch.rand(4, 16, 32, 32), torch.rand(4, 32, 16, 16), torch.rand(4, 64, 8, 8)]
student = [torch.rand(4, 16, 32, 32), torch.rand(4, 64, 8, 8)]

meta = init_meta(3, 2, [16, 32, 64], [16, 64], d_attn=32, seed=0)
print(meta.describe())

# %%
alpha = meta(teacher, student)
print(alpha.shape)          # (batch, T, S)
print(alpha[0])
print(alpha.sum(-1))        # every row sums to one

# %% [markdown]
# ## Pieces of the computation
#
# Queries are linear in the pooled teacher vector. Keys pass through a ReLU.
# Each logit combines a bilinear term with a dot product of learned
# positional vectors, scaled by 1/sqrt(d_attn).

# %%
x = teacher[0][0]
pooled = global_avg_pool(x)
q = compute_query(0, pooled, meta)
keys = [compute_key(s, global_avg_pool(f[0]), meta) for s, f in enumerate(student)]
print(q.shape, [k.shape for k in keys])
print((keys[0] >= 0).all())

logits = attention_logits(0, q, keys, meta)
print(logits, torch.softmax(logits, 0), alpha[0, 0])

# %% [markdown]
# ## Saturation
#
# A large gap between logits saturates the softmax without overflowing:
# the row max is subtracted before exponentiating.

# %%
big = torch.tensor([1000.0, 0.0, -1000.0])
print(torch.exp(big - big.max()) / torch.exp(big - big.max()).sum())

# %% [markdown]
# ## Positional vectors shift the whole row
#
# Adding the same offset to every logit of a row leaves the softmax
# unchanged, so only relative preferences between student candidates matter.

# %%
with torch.no_grad():
    before = meta(teacher, student)
    # push teacher 1's position toward student 0's
    meta.teacher_positions[1] += 5 * meta.student_positions[0]
    after = meta(teacher, student)
print(before[0, 1], after[0, 1])
print(np.allclose(before[0, 0], after[0, 0]))
