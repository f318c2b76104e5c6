"""CIFAR-style ResNet / Wide-ResNet backbones that expose residual-block outputs.

Every network keeps its residual blocks in one flat, ordered ``blocks`` list so
that intermediate features can be tapped by id (``"stage2.block0"`` etc.).
Tensors are channels-first throughout: images are ``N x 3 x R x R`` and feature
candidates are ``N x C x H x W``.
"""
from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

CHECKPOINT_MAGIC = b"AFDCKPT1"

# basic-block layouts for the ImageNet-style ResNets (3x3 stem for 64px inputs)
_BASIC_LAYOUTS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}


class Family(str, enum.Enum):
    RESNET = "RESNET"
    WRN = "WRN"


class Owner(str, enum.Enum):
    TEACHER = "TEACHER"
    STUDENT = "STUDENT"


@dataclass(frozen=True)
class NetworkArchitecture:
    family: Family
    depth: int
    widen_factor: int = 1
    num_classes: int = 100
    input_resolution: int = 32

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        self.validate()

    def validate(self) -> None:
        for name in ("depth", "widen_factor", "num_classes", "input_resolution"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.family is Family.RESNET:
            if self.depth not in _BASIC_LAYOUTS and (self.depth - 2) % 6 != 0:
                raise ConfigError(
                    f"depth={self.depth} invalid for RESNET: need 6n+2 (20, 56, 110) or 18/34"
                )
            if self.widen_factor != 1:
                raise ConfigError("widen_factor must be 1 for RESNET")
        elif (self.depth - 4) % 6 != 0 or self.depth < 10:
            raise ConfigError(f"depth={self.depth} invalid for WRN: need 6n+4 (16, 28, 40)")

    @property
    def name(self) -> str:
        if self.family is Family.WRN:
            return f"WRN-{self.depth}-{self.widen_factor}"
        return f"ResNet{self.depth}"

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        """Number of residual blocks in each stage."""
        if self.family is Family.RESNET and self.depth in _BASIC_LAYOUTS:
            return _BASIC_LAYOUTS[self.depth]
        n = (self.depth - 2) // 6 if self.family is Family.RESNET else (self.depth - 4) // 6
        return (n, n, n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def parse(cls, text: str, num_classes: int = 100, input_resolution: int = 32):
        """Build from a short name such as ``"resnet20"`` or ``"wrn-40-2"``."""
        key = text.strip().lower().replace("_", "-")
        if key.startswith("wrn"):
            parts = key.split("-")
            if len(parts) != 3:
                raise ConfigError(f"cannot parse architecture name {text!r}")
            return cls(Family.WRN, int(parts[1]), int(parts[2]), num_classes, input_resolution)
        if key.startswith("resnet"):
            return cls(Family.RESNET, int(key[6:].strip("-")), 1, num_classes, input_resolution)
        raise ConfigError(f"cannot parse architecture name {text!r}")


@dataclass
class FeatureCandidate:
    tensor: torch.Tensor
    level_index: int
    block_id: str

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.tensor.shape[-2:])

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]


@dataclass
class CandidateSet:
    candidates: list[FeatureCandidate] = field(default_factory=list)
    owner: Owner = Owner.STUDENT

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    @property
    def tensors(self) -> list[torch.Tensor]:
        return [c.tensor for c in self.candidates]


def conv3x3(in_planes, out_planes, stride=1):
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    """Post-activation basic block; output is relu(residual + shortcut)."""

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = conv3x3(in_planes, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class WideBasic(nn.Module):
    """Pre-activation wide block (BN-ReLU-conv twice) without dropout."""

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = conv3x3(in_planes, planes, stride)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(F.relu(self.bn2(y)))
        if self.shortcut is not None:
            return y + self.shortcut(o)
        return y + x


class BackboneNet(nn.Module):
    """Shared scaffolding: stem, flat ordered list of residual blocks, head."""

    def __init__(self, arch: NetworkArchitecture):
        super().__init__()
        self.arch = arch
        self.block_ids: list[str] = []
        self.candidate_ids: list[str] = select_candidates(arch)
        if arch.family is Family.WRN:
            self._build_wrn(arch)
        elif arch.depth in _BASIC_LAYOUTS:
            self._build_stages(64, (64, 128, 256, 512), arch)
        else:
            self._build_stages(16, (16, 32, 64), arch)
        self._id_to_index = {b: i for i, b in enumerate(self.block_ids)}
        self._reset_parameters()

    def _build_stages(self, stem, widths, arch):
        self.stem = nn.Sequential(conv3x3(3, stem), nn.BatchNorm2d(stem), nn.ReLU(inplace=True))
        self.final = nn.Identity()
        blocks, in_planes = [], stem
        for s, (width, count) in enumerate(zip(widths, arch.stage_blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(in_planes, width, stride))
                self.block_ids.append(f"stage{s + 1}.block{b}")
                in_planes = width
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_planes, arch.num_classes)

    def _build_wrn(self, arch):
        k = arch.widen_factor
        widths = (16 * k, 32 * k, 64 * k)
        self.stem = conv3x3(3, 16)
        blocks, in_planes = [], 16
        for s, (width, count) in enumerate(zip(widths, arch.stage_blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(WideBasic(in_planes, width, stride))
                self.block_ids.append(f"stage{s + 1}.block{b}")
                in_planes = width
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Sequential(nn.BatchNorm2d(in_planes), nn.ReLU(inplace=True))
        self.fc = nn.Linear(in_planes, arch.num_classes)

    def _reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                bound = 1 / math.sqrt(m.in_features)
                nn.init.uniform_(m.bias, -bound, bound)

    def _check_input(self, x):
        r = self.arch.input_resolution
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (r, r):
            raise ShapeError(
                f"{self.arch.name} expects N x 3 x {r} x {r} input, got {tuple(x.shape)}"
            )

    def _run(self, x, tap: set[str] | None):
        self._check_input(x)
        out = self.stem(x)
        taps = {}
        for block_id, block in zip(self.block_ids, self.blocks):
            out = block(out)
            if tap is not None and block_id in tap:
                # WRN blocks are pre-activation; the tapped candidate is post-ReLU
                taps[block_id] = F.relu(out) if self.arch.family is Family.WRN else out
        out = self.final(out)
        logits = self.fc(torch.flatten(F.adaptive_avg_pool2d(out, 1), 1))
        return logits, taps

    def forward(self, x):
        return self._run(x, None)[0]

    def forward_with_candidates(self, x, candidate_ids=None, owner=Owner.STUDENT):
        ids = self.candidate_ids if candidate_ids is None else list(candidate_ids)
        unknown = [b for b in ids if b not in self._id_to_index]
        if unknown:
            raise ConfigError(f"unknown block ids for {self.arch.name}: {unknown}")
        ids = sorted(ids, key=self._id_to_index.__getitem__)
        logits, taps = self._run(x, set(ids))
        cands = [FeatureCandidate(taps[b], i, b) for i, b in enumerate(ids)]
        return logits, CandidateSet(cands, Owner(owner))


def build_network(arch: NetworkArchitecture, seed: int = 0) -> BackboneNet:
    """Construct ``arch`` with parameters drawn deterministically from ``seed``."""
    arch.validate()
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = BackboneNet(arch)
    finally:
        torch.random.set_rng_state(state)
    return net


def select_candidates(arch: NetworkArchitecture) -> list[str]:
    ids = [f"stage{s + 1}.block{b}" for s, n in enumerate(arch.stage_blocks) for b in range(n)]
    if arch.family is Family.RESNET and arch.depth == 110:
        # keep every second block; the last block of each stage is retained
        return ids[1::2]
    return ids


def forward_with_candidates(network: BackboneNet, batch: torch.Tensor, candidate_ids=None):
    return network.forward_with_candidates(batch, candidate_ids)


def equal_interval(ids: list[str], k: int) -> list[str]:
    """Pick ``k`` ids at (rounded) equally spaced positions, always keeping both ends."""
    n = len(ids)
    if not 1 <= k <= n:
        raise ConfigError(f"cannot pick {k} of {n} candidates")
    if k == 1:
        return [ids[-1]]
    positions = np.floor(np.linspace(0, n - 1, k) + 0.5).astype(int)
    return [ids[i] for i in positions]


def random_subset(ids: list[str], k: int, seed: int) -> list[str]:
    n = len(ids)
    if not 1 <= k <= n:
        raise ConfigError(f"cannot pick {k} of {n} candidates")
    chosen = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return [ids[i] for i in sorted(chosen)]


def candidate_dims(network: BackboneNet, candidate_ids=None) -> list[tuple[int, int, int]]:
    """(channels, height, width) of each candidate, probed with a single dummy image."""
    r = network.arch.input_resolution
    param = next(network.parameters())
    was_training = network.training
    network.eval()
    with torch.no_grad():
        x = torch.zeros(1, 3, r, r, dtype=param.dtype, device=param.device)
        _, cands = network.forward_with_candidates(x, candidate_ids)
    network.train(was_training)
    return [tuple(c.tensor.shape[1:]) for c in cands]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, network: BackboneNet, meta: nn.Module | None = None, extra=None):
    """Write ``network`` (and optionally the attention meta-network) to ``path``.

    Layout: the 8-byte magic ``AFDCKPT1`` followed by an ``.npz`` archive whose
    entries are parameter/buffer arrays keyed ``network/<name>`` or
    ``meta/<name>``, plus a JSON header under ``__header__``.
    """
    arrays = {f"network/{k}": v.detach().cpu().numpy() for k, v in network.state_dict().items()}
    header = {"format": CHECKPOINT_MAGIC.decode(), "arch": network.arch.to_dict(), "extra": extra}
    if meta is not None:
        arrays.update({f"meta/{k}": v.detach().cpu().numpy() for k, v in meta.state_dict().items()})
        header["meta"] = meta.describe()
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` from an AFDCKPT1 file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not an AFDCKPT1 checkpoint (magic {magic!r})")
        payload = io.BytesIO(fh.read())
    with np.load(payload) as npz:
        arrays = {k: npz[k] for k in npz.files}
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    return header, arrays


def load_checkpoint(path):
    """Rebuild the network stored at ``path``.

    Returns ``(network, meta_state)`` where ``meta_state`` is ``None`` unless
    the checkpoint also carried attention meta-network parameters.
    """
    header, arrays = read_checkpoint(path)
    arch = NetworkArchitecture(**header["arch"])
    net = build_network(arch)
    state = {k[len("network/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("network/")}
    net.load_state_dict(state)
    meta_state = None
    if "meta" in header:
        meta_state = {
            "describe": header["meta"],
            "state": {k[len("meta/"):]: torch.from_numpy(v.copy())
                      for k, v in arrays.items() if k.startswith("meta/")},
        }
    return net, meta_state
