"""Attention meta-network producing the teacher-to-student link matrix.

Each teacher candidate ``t`` is globally pooled and projected to a query, each
student candidate ``s`` to a (ReLU) key. Link logits are the bilinear form
``q_t^T B_s k_s`` plus the dot product of learned positional vectors, scaled by
``1/sqrt(d_attn)``; a row-wise softmax over students gives ``alpha[t, :]``.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from .errors import DegenerateInputError, NumericError, ShapeError


class MetaParams(nn.Module):
    """All learnable parameters of the attention meta-network.

    Attributes:
        query_weights: T matrices, ``d_attn x teacher_dims[t]``.
        key_weights: S matrices, ``d_attn x student_dims[s]``.
        bilinear_weights: S matrices, ``d_attn x d_attn``, one per student index.
        teacher_positions: ``T x d_attn`` positional vectors.
        student_positions: ``S x d_attn`` positional vectors.
    """

    def __init__(self, teacher_dims: Sequence[int], student_dims: Sequence[int],
                 d_attn: int = 128, dtype=None):
        super().__init__()
        if len(teacher_dims) < 1 or len(student_dims) < 1:
            raise ShapeError("need at least one teacher and one student candidate")
        self.d_attn = int(d_attn)
        self.teacher_dims = [int(c) for c in teacher_dims]
        self.student_dims = [int(c) for c in student_dims]
        kw = {"dtype": dtype}
        self.query_weights = nn.ParameterList(
            [nn.Parameter(torch.zeros(d_attn, c, **kw)) for c in self.teacher_dims])
        self.key_weights = nn.ParameterList(
            [nn.Parameter(torch.zeros(d_attn, c, **kw)) for c in self.student_dims])
        self.bilinear_weights = nn.ParameterList(
            [nn.Parameter(torch.zeros(d_attn, d_attn, **kw)) for _ in self.student_dims])
        self.teacher_positions = nn.Parameter(torch.zeros(len(self.teacher_dims), d_attn, **kw))
        self.student_positions = nn.Parameter(torch.zeros(len(self.student_dims), d_attn, **kw))

    @property
    def T(self) -> int:
        return len(self.teacher_dims)

    @property
    def S(self) -> int:
        return len(self.student_dims)

    def describe(self) -> dict:
        return {"teacher_dims": self.teacher_dims, "student_dims": self.student_dims,
                "d_attn": self.d_attn}

    def decay_groups(self):
        """Split parameters into (decayed, not decayed); positional vectors skip decay."""
        no_decay = [self.teacher_positions, self.student_positions]
        decay = [*self.query_weights, *self.key_weights, *self.bilinear_weights]
        return decay, no_decay

    def forward(self, teacher_feats: Sequence[torch.Tensor],
                student_feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """Link matrix from raw ``(N, C, H, W)`` candidate tensors, shape ``(N, T, S)``."""
        tp = [global_avg_pool(f) for f in teacher_feats]
        sp = [global_avg_pool(f) for f in student_feats]
        return attention_matrix(tp, sp, self)


def global_avg_pool(f: torch.Tensor) -> torch.Tensor:
    """Mean over the two trailing (spatial) axes of a ``(..., C, H, W)`` tensor."""
    if f.dim() < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {tuple(f.shape)}")
    if f.shape[-1] * f.shape[-2] == 0:
        raise DegenerateInputError("cannot average-pool a feature with H*W = 0")
    return f.mean(dim=(-2, -1))


def compute_query(t: int, pooled: torch.Tensor, params: MetaParams) -> torch.Tensor:
    w = params.query_weights[t]
    if pooled.shape[-1] != w.shape[1]:
        raise ShapeError(f"query {t}: pooled length {pooled.shape[-1]} != {w.shape[1]}")
    return pooled @ w.T


def compute_key(s: int, pooled: torch.Tensor, params: MetaParams) -> torch.Tensor:
    w = params.key_weights[s]
    if pooled.shape[-1] != w.shape[1]:
        raise ShapeError(f"key {s}: pooled length {pooled.shape[-1]} != {w.shape[1]}")
    return torch.relu(pooled @ w.T)


def attention_logits(t: int, query: torch.Tensor, keys: Sequence[torch.Tensor],
                     params: MetaParams) -> torch.Tensor:
    """Logits of teacher ``t`` against every student key, shape ``(..., S)``."""
    d = params.d_attn
    cols = []
    for s, k in enumerate(keys):
        if query.shape[-1] != d or k.shape[-1] != d:
            raise ShapeError(f"query/key length must be {d} (teacher {t}, student {s})")
        bilinear = (query * (k @ params.bilinear_weights[s].T)).sum(-1)
        cols.append(bilinear + params.teacher_positions[t] @ params.student_positions[s])
    return torch.stack(cols, dim=-1) / math.sqrt(d)


def _all_logits(teacher_pooled, student_pooled, params: MetaParams) -> torch.Tensor:
    if len(teacher_pooled) != params.T or len(student_pooled) != params.S:
        raise ShapeError(
            f"got {len(teacher_pooled)} teacher / {len(student_pooled)} student candidates, "
            f"meta-network expects {params.T} / {params.S}")
    q = torch.stack([compute_query(t, p, params) for t, p in enumerate(teacher_pooled)], -2)
    k = torch.stack([compute_key(s, p, params) for s, p in enumerate(student_pooled)], -2)
    b = torch.stack(list(params.bilinear_weights))                      # S, d, d
    bk = torch.einsum("sij,...sj->...si", b, k)                         # ..., S, d
    logits = q @ bk.transpose(-1, -2)                                   # ..., T, S
    logits = logits + params.teacher_positions @ params.student_positions.T
    return logits / math.sqrt(params.d_attn)


def attention_matrix(teacher_pooled: Sequence[torch.Tensor],
                     student_pooled: Sequence[torch.Tensor],
                     params: MetaParams) -> torch.Tensor:
    """Row-stochastic link matrix ``(..., T, S)`` from pooled descriptors."""
    logits = _all_logits(teacher_pooled, student_pooled, params)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits; the loss has diverged")
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = logits.exp()
    return e / e.sum(dim=-1, keepdim=True)


def _xavier_(t: torch.Tensor, fan_in: int, fan_out: int, gen: torch.Generator):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


def init_meta(T: int, S: int, teacher_dims: Sequence[int], student_dims: Sequence[int],
              d_attn: int = 128, seed: int = 0, dtype=None) -> MetaParams:
    """Xavier-uniform initialised meta-network; deterministic given ``seed``."""
    if T < 1 or S < 1:
        raise ShapeError("T and S must be >= 1")
    if len(teacher_dims) != T or len(student_dims) != S:
        raise ShapeError("channel-dimension lists must have lengths T and S")
    params = MetaParams(teacher_dims, student_dims, d_attn, dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    for w in [*params.query_weights, *params.key_weights, *params.bilinear_weights]:
        _xavier_(w, fan_in=w.shape[1], fan_out=w.shape[0], gen=gen)
    # each positional vector is treated as a 1 x d_attn matrix
    for pos in (params.teacher_positions, params.student_positions):
        _xavier_(pos, fan_in=d_attn, fan_out=1, gen=gen)
    return params


def meta_from_state(describe: dict, state: dict) -> MetaParams:
    """Inverse of checkpointing: rebuild a MetaParams from ``describe()`` + state dict."""
    any_tensor = next(iter(state.values()))
    params = MetaParams(describe["teacher_dims"], describe["student_dims"],
                        describe["d_attn"], dtype=any_tensor.dtype)
    params.load_state_dict(state)
    return params
