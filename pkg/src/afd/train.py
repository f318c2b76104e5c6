"""Teacher pretraining, joint student / meta-network distillation, and beta sweeps."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .data import Dataset, Split, augment, batch_order, load_dataset, to_tensor
from .errors import ConfigError, NumericError
from .losses import (
    DistanceMetric, LinkKind, LinkStrategy, LossWeights, PoolingMethod, afd_loss,
    build_fixed_links, kd_loss, load_attention_csv, save_attention_csv, total_loss,
)
from .meta import MetaParams, init_meta
from .models import (
    BackboneNet, NetworkArchitecture, build_network, candidate_dims, equal_interval,
    load_checkpoint, random_subset, save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    batch_size: int = 64
    max_epochs: int = 240
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list = field(default_factory=lambda: [150, 180, 210])
    lr_divisor: float = 10.0

    def __post_init__(self):
        self.lr_milestones = [int(m) for m in self.lr_milestones]
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.max_epochs:
            raise ConfigError(f"lr_milestones must be < max_epochs={self.max_epochs}, got {ms}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` (epochs already completed)."""
        drops = sum(1 for m in self.lr_milestones if m <= epoch)
        return self.base_lr / self.lr_divisor ** drops


CIFAR100_SCHEDULE = Schedule(64, 240, 0.05, 0.9, 5e-4, [150, 180, 210], 10.0)
TINYIMAGENET_SCHEDULE = Schedule(128, 200, 0.1, 0.9, 5e-4, [60, 120, 150, 180], 5.0)
IMAGENET_SCHEDULE = Schedule(256, 100, 0.1, 0.9, 1e-4, [30, 60, 90], 10.0)


class PolicyKind(str, enum.Enum):
    ALL = "ALL"
    EQUAL_INTERVAL = "EQUAL_INTERVAL"
    RANDOM = "RANDOM"


@dataclass
class CandidatePolicy:
    kind: PolicyKind = PolicyKind.ALL
    k: Optional[int] = None

    def __post_init__(self):
        self.kind = PolicyKind(self.kind)
        if self.kind is not PolicyKind.ALL and (self.k is None or self.k < 1):
            raise ConfigError(f"candidate policy {self.kind.value} needs a positive k")

    def apply(self, ids: list[str], seed: int) -> list[str]:
        if self.kind is PolicyKind.ALL:
            return list(ids)
        if self.kind is PolicyKind.EQUAL_INTERVAL:
            return equal_interval(ids, self.k)
        return random_subset(ids, self.k, seed)


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_val: int = 1000
    num_classes: int = 10
    resolution: int = 16
    noise: float = 25.0
    distractors: int = 3
    seed: int = 0


@dataclass
class SweepSpec:
    values: list = field(default_factory=lambda: [30.0, 50.0, 100.0, 200.0])


@dataclass
class ExperimentConfig:
    teacher_arch: NetworkArchitecture = field(
        default_factory=lambda: NetworkArchitecture("RESNET", 56))
    student_arch: NetworkArchitecture = field(
        default_factory=lambda: NetworkArchitecture("RESNET", 20))
    dataset: Dataset = Dataset.CIFAR100
    strategy: LinkStrategy = field(default_factory=LinkStrategy)
    weights: LossWeights = field(default_factory=LossWeights)
    pooling: PoolingMethod = PoolingMethod.A2
    metric: DistanceMetric = DistanceMetric.L2
    schedule: Schedule = field(default_factory=lambda: dataclasses.replace(CIFAR100_SCHEDULE))
    seed: int = 0
    teacher_checkpoint: str = ""
    candidate_policy: CandidatePolicy = field(default_factory=CandidatePolicy)
    student_policy: CandidatePolicy = field(default_factory=CandidatePolicy)
    d_attn: int = 128
    squared_l2: bool = False
    data_dir: str = "data"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    alpha_path: str = ""
    student_subset: int = 0     # distil on the first N training examples; 0 = all

    def __post_init__(self):
        if self.student_subset < 0:
            raise ConfigError("student_subset must be >= 0")
        self.dataset = Dataset(self.dataset)
        self.pooling = PoolingMethod(self.pooling)
        self.metric = DistanceMetric(self.metric)

    # -- (de)serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(d)
        for name in ("teacher_arch", "student_arch"):
            if name in kw:
                kw[name] = _arch(kw[name])
        nested = {"strategy": LinkStrategy, "weights": LossWeights, "schedule": Schedule,
                  "candidate_policy": CandidatePolicy, "student_policy": CandidatePolicy,
                  "synthetic": SyntheticSpec, "sweep": SweepSpec}
        for name, typ in nested.items():
            if name in kw and isinstance(kw[name], dict):
                fields = {f.name for f in dataclasses.fields(typ)}
                bad = set(kw[name]) - fields
                if bad:
                    raise ConfigError(f"unknown fields in {name}: {sorted(bad)}")
                kw[name] = typ(**kw[name])
        try:
            return cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def with_overrides(self, overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            _set_path(d, key.strip(), raw.strip())
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def _arch(v):
    if isinstance(v, NetworkArchitecture):
        return v
    if isinstance(v, str):
        return NetworkArchitecture.parse(v)
    try:
        return NetworkArchitecture(**v)
    except TypeError as exc:
        raise ConfigError(f"bad architecture record {v!r}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if not isinstance(getattr(obj, f.name), torch.Tensor)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        items = [x for x in raw.strip("[]").split(",") if x.strip()]
        if current and isinstance(current[0], int):
            return [int(x) for x in items]
        return [float(x) for x in items]
    if current is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def _set_path(d: dict, key: str, raw: str):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config field {key!r}")
        node = node[p]
    last = parts[-1]
    if not isinstance(node, dict) or last not in node:
        raise ConfigError(f"unknown config field {key!r}")
    if isinstance(node[last], dict) and last.endswith("arch"):
        node[last] = NetworkArchitecture.parse(raw).to_dict()
        return
    try:
        node[last] = _coerce(raw, node[last])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


# -- records ------------------------------------------------------------------

@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time: float = 0.0
    config_hash: str = ""

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e) + "\n")
            fh.write(json.dumps({"summary": True, "final_accuracy": self.final_accuracy,
                                 "wall_time": self.wall_time,
                                 "config_hash": self.config_hash}) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path) -> "RunRecord":
        rec = cls()
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            if row.get("summary"):
                rec.final_accuracy = row["final_accuracy"]
                rec.wall_time = row["wall_time"]
                rec.config_hash = row["config_hash"]
            else:
                rec.epochs.append(row)
        return rec


@dataclass
class AttentionTrace:
    matrices: list = field(default_factory=list)   # one T x S tensor per epoch

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        return [save_attention_csv(directory / f"alpha_epoch_{e}.csv", m)
                for e, m in enumerate(self.matrices, start=1)]


# -- training -----------------------------------------------------------------

def _load_data(config: ExperimentConfig):
    syn = config.synthetic
    return load_dataset(config.dataset, config.data_dir, n_train=syn.n_train,
                        n_val=syn.n_val, num_classes=syn.num_classes,
                        resolution=syn.resolution, seed=syn.seed, noise=syn.noise,
                        distractors=syn.distractors)


@torch.no_grad()
def evaluate(model: BackboneNet, split: Split, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy on an untouched split."""
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(split), batch_size):
        x = to_tensor(split.images[i:i + batch_size], dataset)
        y = torch.from_numpy(split.labels[i:i + batch_size])
        correct += (model(x).argmax(1) == y).sum().item()
    model.train(was_training)
    return correct / max(len(split), 1)


def _optimizer(model, meta: Optional[MetaParams], schedule: Schedule):
    groups = [{"params": list(model.parameters()), "weight_decay": schedule.weight_decay}]
    if meta is not None:
        decay, no_decay = meta.decay_groups()
        groups.append({"params": decay, "weight_decay": schedule.weight_decay})
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=schedule.base_lr, momentum=schedule.momentum)


def _train(config: ExperimentConfig, student: BackboneNet, train: Split, val: Split,
           teacher: Optional[BackboneNet] = None, meta: Optional[MetaParams] = None,
           fixed_alpha: Optional[torch.Tensor] = None, teacher_ids=None, student_ids=None,
           out_dir=None, trace: bool = False):
    sched, w, ds = config.schedule, config.weights, config.dataset
    record = RunRecord(config_hash=config.config_hash())
    traces = AttentionTrace()
    opt = _optimizer(student, meta, sched)
    use_teacher = teacher is not None and (w.use_kd or w.beta > 0)
    use_feat = use_teacher and w.beta > 0 and (meta is not None or fixed_alpha is not None)
    start = time.perf_counter()
    torch.manual_seed(config.seed)
    for epoch in range(sched.max_epochs):
        lr = sched.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        student.train()
        if meta is not None:
            meta.train()
        batches, rng = batch_order(len(train), sched.batch_size, config.seed, epoch)
        sums = {"ce": 0.0, "kd": 0.0, "afd": 0.0, "loss": 0.0}
        alpha_sum, seen = None, 0
        for idx in batches:
            x = to_tensor(augment(train.images[idx], ds, rng), ds)
            y = torch.from_numpy(train.labels[idx])
            zero = x.new_zeros(())
            kd = afd = zero
            if use_teacher:
                with torch.no_grad():
                    t_logits, t_set = teacher.forward_with_candidates(x, teacher_ids)
            if use_feat:
                s_logits, s_set = student.forward_with_candidates(x, student_ids)
                if meta is not None:
                    alpha = meta(t_set.tensors, s_set.tensors)
                    if trace:
                        batch_mean = alpha.detach().mean(0)
                        alpha_sum = batch_mean if alpha_sum is None else alpha_sum + batch_mean
                else:
                    alpha = fixed_alpha
                afd = afd_loss(alpha, t_set, s_set, config.pooling, config.metric,
                               config.squared_l2)
            else:
                s_logits = student(x)
            ce = F.cross_entropy(s_logits, y)
            if use_teacher and w.use_kd:
                kd = kd_loss(s_logits, t_logits, w.kd_temperature)
            loss = total_loss(ce, afd, kd, w)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            seen += 1
            for k, v in (("ce", ce), ("kd", kd), ("afd", afd), ("loss", loss)):
                sums[k] += float(v.detach())
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: v / max(seen, 1) for k, v in sums.items()})
        if not use_teacher or not w.use_kd:
            row["kd"] = None
        if not use_feat:
            row["afd"] = None
        row["val_accuracy"] = evaluate(student, val, ds)
        record.epochs.append(row)
        log.info("epoch %d %s", epoch + 1, row)
        if alpha_sum is not None:
            traces.matrices.append(alpha_sum / seen)
    record.final_accuracy = record.epochs[-1]["val_accuracy"]
    record.wall_time = time.perf_counter() - start
    if out_dir is not None:
        out_dir = Path(out_dir)
        record.write_jsonl(out_dir / "record.jsonl")
        if traces.matrices:
            traces.write(out_dir / "trace")
    return record, traces


def pretrain_teacher(config: ExperimentConfig, out_dir, data=None):
    """Train ``config.teacher_arch`` with plain cross entropy and checkpoint it.

    Returns ``(checkpoint_path, RunRecord)``.
    """
    train, val = data if data is not None else _load_data(config)
    cfg = dataclasses.replace(config, weights=LossWeights(beta=0.0, use_kd=False),
                              student_arch=config.teacher_arch)
    teacher = build_network(config.teacher_arch, seed=config.seed)
    record, _ = _train(cfg, teacher, train, val, out_dir=out_dir)
    path = save_checkpoint(Path(out_dir) / "teacher.ckpt", teacher,
                           extra={"val_accuracy": record.final_accuracy})
    return path, record


def load_teacher(config: ExperimentConfig) -> BackboneNet:
    if not config.teacher_checkpoint:
        raise ConfigError("teacher_checkpoint is not set; run pretraining first")
    teacher, _ = load_checkpoint(config.teacher_checkpoint)
    if teacher.arch.to_dict() != config.teacher_arch.to_dict():
        raise ConfigError(f"checkpoint holds {teacher.arch.name}, config asks for "
                          f"{config.teacher_arch.name}")
    return teacher


def resolve_links(config: ExperimentConfig, T: int, S: int):
    """Fixed link matrix for non-learned strategies, else ``None``."""
    kind = config.strategy.kind
    if kind is LinkKind.AFD_COTRAIN:
        return None
    strategy = config.strategy
    if kind is LinkKind.AFD_PRETRAINED and strategy.fixed_alpha is None:
        if not config.alpha_path:
            raise ConfigError("AFD_PRETRAINED needs alpha_path or strategy.fixed_alpha")
        strategy = LinkStrategy(kind, load_attention_csv(config.alpha_path))
    return build_fixed_links(strategy, T, S, seed=config.seed)


def run_distillation(config: ExperimentConfig, teacher: Optional[BackboneNet] = None,
                     out_dir=None, data=None):
    """Jointly train the student and (for AFD_COTRAIN) the meta-network.

    The teacher is frozen: eval mode, no gradient, not in the optimizer.
    Returns ``(RunRecord, AttentionTrace)``.
    """
    train, val = data if data is not None else _load_data(config)
    if config.student_subset:
        train = train.subset(slice(0, config.student_subset))
    if teacher is None:
        teacher = load_teacher(config)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = build_network(config.student_arch, seed=config.seed)
    teacher_ids = config.candidate_policy.apply(teacher.candidate_ids, config.seed)
    student_ids = config.student_policy.apply(student.candidate_ids, config.seed)
    T, S = len(teacher_ids), len(student_ids)

    meta = fixed = None
    if config.strategy.kind is LinkKind.AFD_COTRAIN:
        t_dims = [c for c, _, _ in candidate_dims(teacher, teacher_ids)]
        s_dims = [c for c, _, _ in candidate_dims(student, student_ids)]
        meta = init_meta(T, S, t_dims, s_dims, config.d_attn, seed=config.seed)
    else:
        fixed = resolve_links(config, T, S)

    record, trace = _train(config, student, train, val, teacher=teacher, meta=meta,
                           fixed_alpha=fixed, teacher_ids=teacher_ids,
                           student_ids=student_ids, out_dir=out_dir, trace=True)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "student.ckpt", student, meta=meta,
                        extra={"val_accuracy": record.final_accuracy})
    return record, trace


def sweep_beta(config: ExperimentConfig, values, teacher: Optional[BackboneNet] = None,
               out_dir=None, data=None):
    """One distillation run per beta with a shared teacher, data and seed.

    Returns a list of ``(beta, final_accuracy)`` rows in the order given.
    """
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one beta value")
    data = data if data is not None else _load_data(config)
    teacher = teacher if teacher is not None else load_teacher(config)
    rows = []
    for beta in values:
        cfg = dataclasses.replace(config, weights=dataclasses.replace(config.weights,
                                                                      beta=float(beta)))
        sub = None if out_dir is None else Path(out_dir) / f"beta_{beta:g}"
        record, _ = run_distillation(cfg, teacher=teacher, out_dir=sub, data=data)
        rows.append((float(beta), record.final_accuracy))
    return rows


def desk_config(**overrides) -> ExperimentConfig:
    """CPU-sized SYNTHETIC setup: ResNet20 -> ResNet8 on 16px, 20-class cue images.

    The teacher pretrains on all 4000 training images; the student distils
    from the first 1000. Beta was picked from {0.5, 1, 2, 5, 10} on seeds
    disjoint from the ones the acceptance run uses.
    """
    cfg = ExperimentConfig(
        teacher_arch=NetworkArchitecture("RESNET", 20, 1, 20, 16),
        student_arch=NetworkArchitecture("RESNET", 8, 1, 20, 16),
        dataset=Dataset.SYNTHETIC,
        weights=LossWeights(beta=2.0),
        schedule=Schedule(64, 30, 0.05, 0.9, 5e-4, [20, 25], 10.0),
        candidate_policy=CandidatePolicy(PolicyKind.EQUAL_INTERVAL, 3),
        synthetic=SyntheticSpec(n_train=4000, n_val=1000, num_classes=20, resolution=16,
                                noise=40.0, distractors=4),
        student_subset=1000,
        d_attn=32,
    )
    return dataclasses.replace(cfg, **overrides)
