"""Feature-distillation losses: channel pooling, resampling, distances, AFD/KD losses.

Spatial maps are compared after collapsing channels (``A1``/``A2`` average of
``|h|^p`` or ``MAX`` of ``|h|``) and L2-normalising over the flattened H*W
positions. Student candidates are resampled to each teacher's spatial size
first.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError, ShapeError
from .models import CandidateSet


class PoolingMethod(str, enum.Enum):
    A1 = "A1"
    A2 = "A2"
    MAX = "MAX"

    @property
    def p(self) -> Optional[int]:
        return {"A1": 1, "A2": 2}.get(self.value)


class DistanceMetric(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    KL = "KL"
    COSINE = "COSINE"


class LinkKind(str, enum.Enum):
    AFD_COTRAIN = "AFD_COTRAIN"
    AFD_PRETRAINED = "AFD_PRETRAINED"
    ORDERED = "ORDERED"
    RANDOM_LINK = "RANDOM_LINK"


@dataclass
class LinkStrategy:
    kind: LinkKind = LinkKind.AFD_COTRAIN
    fixed_alpha: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.kind = LinkKind(self.kind)


@dataclass
class LossWeights:
    beta: float = 50.0
    kd_temperature: float = 4.0
    kd_weight: float = 0.9
    use_kd: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.kd_temperature <= 0:
            raise ConfigError(f"kd_temperature must be positive, got {self.kd_temperature}")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ConfigError(f"kd_weight must lie in [0, 1], got {self.kd_weight}")


def _as_tensors(cands) -> list[torch.Tensor]:
    if isinstance(cands, CandidateSet):
        return cands.tensors
    return [getattr(c, "tensor", c) for c in cands]


def channel_pool_normalize(f: torch.Tensor, method: PoolingMethod = PoolingMethod.A2):
    """Collapse channels of ``(..., C, H, W)`` and L2-normalise the ``H*W`` map.

    An all-zero map stays zero (rather than NaN); ``afd_loss`` drops such pairs.
    """
    method = PoolingMethod(method)
    if f.dim() < 3:
        raise ShapeError(f"expected (..., C, H, W), got shape {tuple(f.shape)}")
    if f.shape[-3] * f.shape[-2] * f.shape[-1] == 0:
        raise DegenerateInputError("empty feature map")
    a = f.abs()
    if method is PoolingMethod.MAX:
        m = a.amax(dim=-3)
    elif method is PoolingMethod.A2:
        m = f.pow(2).mean(dim=-3)
    else:
        m = a.mean(dim=-3)
    m = m.flatten(-2)
    norm = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    return m / torch.where(norm > 0, norm, torch.ones_like(norm))


def resample_student(f: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Average-pool down or nearest-neighbour replicate up to ``target_h x target_w``."""
    h, w = f.shape[-2:]
    if (h, w) == (target_h, target_w):
        return f
    for src, dst in ((h, target_h), (w, target_w)):
        if max(src, dst) % min(src, dst):
            raise ConfigError(f"cannot resample {src} -> {dst}: non-integral factor")
    out = f
    if h > target_h or w > target_w:
        kh, kw = max(h // target_h, 1), max(w // target_w, 1)
        out = F.avg_pool2d(out, kernel_size=(kh, kw), stride=(kh, kw))
    if target_h > h:
        out = out.repeat_interleave(target_h // h, dim=-2)
    if target_w > w:
        out = out.repeat_interleave(target_w // w, dim=-1)
    return out


def pairwise_distance(u: torch.Tensor, v: torch.Tensor,
                      metric: DistanceMetric = DistanceMetric.L2, squared: bool = False):
    """Distance along the last axis (broadcasting over leading axes).

    ``squared`` only affects L2. KL compares ``softmax(u)`` against ``softmax(v)``.
    A zero vector under COSINE yields distance 1.
    """
    metric = DistanceMetric(metric)
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"length mismatch {u.shape[-1]} vs {v.shape[-1]}")
    if metric is DistanceMetric.L1:
        return (u - v).abs().sum(-1)
    if metric is DistanceMetric.L2:
        if squared:
            return (u - v).pow(2).sum(-1)
        return torch.linalg.vector_norm(u - v, dim=-1)
    if metric is DistanceMetric.KL:
        log_p = torch.log_softmax(u, dim=-1)
        log_q = torch.log_softmax(v, dim=-1)
        return (log_p.exp() * (log_p - log_q)).sum(-1)
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    denom = nu * nv
    ok = denom > 0
    cos = (u * v).sum(-1) / torch.where(ok, denom, torch.ones_like(denom))
    return torch.where(ok, 1.0 - cos, torch.ones_like(cos))


def distance_matrix(teacher, student, pooling=PoolingMethod.A2,
                    metric=DistanceMetric.L2, squared: bool = False):
    """Distances for every (t, s) pair, shape ``(..., T, S)``, plus a validity mask.

    A pair is invalid when either pooled map is all zero.
    """
    t_feats, s_feats = _as_tensors(teacher), _as_tensors(student)
    cache = {}
    rows, masks = [], []
    for t, ft in enumerate(t_feats):
        t_map = channel_pool_normalize(ft, pooling)
        size = tuple(ft.shape[-2:])
        if size not in cache:
            maps = []
            for s, fs in enumerate(s_feats):
                try:
                    r = resample_student(fs, *size)
                except ConfigError as exc:
                    raise ShapeError(f"pair (t={t}, s={s}): {exc}") from exc
                maps.append(channel_pool_normalize(r, pooling))
            try:
                cache[size] = torch.stack(maps, dim=-2)                # ..., S, HW
            except RuntimeError as exc:
                raise ShapeError(f"teacher {t}: student batch shapes disagree") from exc
        s_maps = cache[size]
        if s_maps.shape[:-2] != t_map.shape[:-1]:
            raise ShapeError(f"pair (t={t}, s=*): batch shape {tuple(t_map.shape[:-1])} "
                             f"vs {tuple(s_maps.shape[:-2])}")
        rows.append(pairwise_distance(t_map.unsqueeze(-2), s_maps, metric, squared))
        t_ok = (t_map.abs().sum(-1) > 0).unsqueeze(-1)
        masks.append(t_ok & (s_maps.abs().sum(-1) > 0))
    return torch.stack(rows, dim=-2), torch.stack(masks, dim=-2)


def afd_loss(alpha: torch.Tensor, teacher, student, pooling=PoolingMethod.A2,
             metric=DistanceMetric.L2, squared: bool = False) -> torch.Tensor:
    """Link-weighted sum of pairwise map distances.

    ``alpha`` is ``(T, S)`` or batched ``(N, T, S)``; features are ``(C, H, W)``
    or ``(N, C, H, W)``. Batched inputs give the mean over the batch of the
    per-example double sum.
    """
    dist, mask = distance_matrix(teacher, student, pooling, metric, squared)
    if alpha.shape[-2:] != dist.shape[-2:]:
        raise ShapeError(f"alpha is {tuple(alpha.shape[-2:])} but candidate sets give "
                         f"{tuple(dist.shape[-2:])}")
    dist = torch.where(mask, dist, torch.zeros_like(dist))
    per_example = (alpha * dist).sum(dim=(-2, -1))
    return per_example.mean() if per_example.dim() else per_example


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            temperature: float = 4.0) -> torch.Tensor:
    """``tau^2`` times the batch-mean KL(teacher soft labels || student soft labels)."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shapes differ: {tuple(student_logits.shape)} vs "
                         f"{tuple(teacher_logits.shape)}")
    log_q = F.log_softmax(student_logits / temperature, dim=-1)
    log_p = F.log_softmax(teacher_logits / temperature, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return kl.mean() * temperature ** 2


def ordered_links(n: int) -> torch.Tensor:
    return torch.eye(n)


def random_links(n: int, seed: int) -> torch.Tensor:
    """Seeded one-hot permutation links, never the level-matched identity when n > 1."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    while n > 1 and (perm == np.arange(n)).all():
        perm = rng.permutation(n)
    alpha = torch.zeros(n, n)
    alpha[torch.arange(n), torch.as_tensor(perm)] = 1.0
    return alpha


def build_fixed_links(strategy: LinkStrategy, T: int, S: int, seed: int = 0) -> torch.Tensor:
    """Frozen ``T x S`` link matrix for the non-learned strategies."""
    kind = strategy.kind
    if kind is LinkKind.AFD_COTRAIN:
        raise ConfigError("AFD_COTRAIN links are learned, not fixed")
    if kind is LinkKind.AFD_PRETRAINED:
        if strategy.fixed_alpha is None:
            raise ConfigError("AFD_PRETRAINED requires a fixed_alpha matrix")
        alpha = torch.as_tensor(strategy.fixed_alpha, dtype=torch.float32)
        if tuple(alpha.shape) != (T, S):
            raise ConfigError(f"pretrained alpha is {tuple(alpha.shape)}, expected {(T, S)}")
        return alpha
    if T != S:
        raise ConfigError(f"{kind.value} links need T == S after subsampling, got {T} != {S}")
    return ordered_links(T) if kind is LinkKind.ORDERED else random_links(T, seed)


def total_loss(ce, afd, kd, weights: LossWeights):
    cls = ce
    if weights.use_kd:
        cls = (1.0 - weights.kd_weight) * ce + weights.kd_weight * kd
    return cls + weights.beta * afd


# -- AttentionMatrix CSV -------------------------------------------------------

def save_attention_csv(path, alpha) -> Path:
    """T rows of S comma-separated values, 9 significant digits (float32 exact)."""
    a = np.asarray(torch.as_tensor(alpha).detach().cpu(), dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"attention matrix must be 2-D, got shape {a.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in a:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
    return path


def load_attention_csv(path) -> torch.Tensor:
    rows = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ShapeError(f"{path}: empty attention matrix")
    a = np.array([[float(x) for x in r.split(",")] for r in rows], dtype=np.float32)
    return torch.from_numpy(a)
