# %% [markdown]
# # Distances between attention maps
#
# Each feature map is collapsed across channels into a spatial map, flattened
# and scaled to unit length. The loss sums link-weighted distances between
# teacher maps and (resampled) student maps.

# %%
import torch

from afd import (
    DistanceMetric, LinkKind, LinkStrategy, PoolingMethod, afd_loss, build_fixed_links,
    channel_pool_normalize, resample_student,
)

torch.manual_seed(1)
torch.set_printoptions(precision=4, sci_mode=False)

# %% [markdown]
# ## Channel pooling
#
# A1 averages absolute values, A2 averages squares, MAX takes the largest
# magnitude. All three end up unit length, so overall scale is irrelevant.

# %%
f = torch.randn(8, 4, 4)
for method in PoolingMethod:
    v = channel_pool_normalize(f, method)
    print(method.value, v.shape, float(v.norm()))

print(torch.allclose(channel_pool_normalize(1000 * f), channel_pool_normalize(f)))

# a constant map becomes uniform
print(channel_pool_normalize(torch.full((3, 2, 2), 7.0)))

# %% [markdown]
# ## Resampling the student
#
# Student maps are brought to the teacher's spatial size before pooling.
# Shrinking averages blocks, growing repeats each pixel.

# %%
m = torch.arange(16.0).reshape(1, 4, 4)
print(resample_student(m, 2, 2))
print(resample_student(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]), 4, 4))

# %% [markdown]
# ## The loss
#
# With one-hot level-matched links (ORDERED), squared-average pooling and
# L2 distance, the loss is exactly the classic attention-transfer loss.

# %%
teacher = [torch.randn(16, 8, 8), torch.randn(32, 4, 4), torch.randn(64, 2, 2)]
student = [torch.randn(8, 8, 8), torch.randn(16, 4, 4), torch.randn(32, 2, 2)]

ordered = build_fixed_links(LinkStrategy(LinkKind.ORDERED), 3, 3)
print(ordered)
att = sum((channel_pool_normalize(t) - channel_pool_normalize(s)).norm()
          for t, s in zip(teacher, student))
print(float(afd_loss(ordered, teacher, student)), float(att))

# %% [markdown]
# Soft links spread each teacher map over several student maps. Any student
# map at a different size is resampled first.

# %%
soft = torch.softmax(torch.randn(3, 3), dim=1)
for metric in DistanceMetric:
    print(metric.value, float(afd_loss(soft, teacher, student, metric=metric)))

# %% [markdown]
# Random one-hot links, seeded, for the ablation baseline.

# %%
print(build_fixed_links(LinkStrategy(LinkKind.RANDOM_LINK), 3, 3, seed=4))
