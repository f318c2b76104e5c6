"""Command-line entry point: ``afd <verb> [--config c.json] [--set k=v ...]``.

Verbs are ``pretrain``, ``distill``, ``sweep``, ``ablate <KIND>`` and
``export-attention <trace_dir>``. Every run writes into a fresh directory
``<out>/<verb>-<config hash>`` (a numeric suffix is added rather than
overwriting an earlier run).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import enum
import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DegenerateInputError, IngestionError, NumericError, ShapeError
from .losses import (
    DistanceMetric, LinkKind, LinkStrategy, PoolingMethod, load_attention_csv, save_attention_csv,
)
from .models import select_candidates
from .train import (
    CandidatePolicy, ExperimentConfig, PolicyKind, _load_data, load_teacher, pretrain_teacher,
    run_distillation, sweep_beta,
)

log = logging.getLogger(__name__)


class Verb(str, enum.Enum):
    PRETRAIN = "pretrain"
    DISTILL = "distill"
    SWEEP = "sweep"
    ABLATE = "ablate"
    EXPORT_ATTENTION = "export-attention"


class AblationKind(str, enum.Enum):
    LINKING = "LINKING"
    DISTANCE = "DISTANCE"
    POOLING = "POOLING"
    CANDIDATES = "CANDIDATES"


@dataclass(frozen=True)
class Command:
    verb: Verb
    config_path: Optional[str] = None
    overrides: tuple = ()
    out: str = "runs"
    seed: Optional[int] = None
    repeats: int = 1
    kind: Optional[AblationKind] = None
    trace_dir: Optional[str] = None

    def resolve_config(self) -> ExperimentConfig:
        cfg = ExperimentConfig.load(self.config_path) if self.config_path else ExperimentConfig()
        cfg = cfg.with_overrides(self.overrides)
        if self.seed is not None:
            cfg = dataclasses.replace(cfg, seed=self.seed)
        return cfg


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_path", help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="FIELD=VALUE", help="override a config field (repeatable)")
    common.add_argument("--out", default="runs", help="parent directory for run outputs")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--repeats", type=_positive_int, default=1,
                        help="seeds per variant (distill, ablate)")

    parser = argparse.ArgumentParser(
        prog="afd", description="Attention-based feature distillation experiments.")
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    verbs.add_parser("pretrain", parents=[common], help="train the teacher with cross entropy")
    verbs.add_parser("distill", parents=[common], help="distil a student from a teacher")
    verbs.add_parser("sweep", parents=[common], help="one distillation per sweep.values beta")
    ab = verbs.add_parser("ablate", parents=[common], help="run an ablation matrix")
    ab.add_argument("kind", type=str.upper, choices=[k.value for k in AblationKind])
    ex = verbs.add_parser("export-attention", parents=[common],
                          help="consolidate alpha_epoch_*.csv files and render heatmaps")
    ex.add_argument("trace_dir")
    return parser


def parse_args(argv) -> Command:
    """Parse ``argv`` (without the program name). Usage errors exit with status 2."""
    ns = _parser().parse_args(list(argv))
    return Command(
        verb=Verb(ns.verb),
        config_path=ns.config_path,
        overrides=tuple(ns.overrides),
        out=ns.out,
        seed=ns.seed,
        repeats=ns.repeats,
        kind=AblationKind(ns.kind) if ns.verb == "ablate" else None,
        trace_dir=getattr(ns, "trace_dir", None),
    )


def run_directory(out, verb: Verb, config: ExperimentConfig) -> Path:
    """Create and return a fresh directory for this run."""
    base = Path(out) / f"{verb.value}-{config.config_hash()}"
    path, n = base, 0
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    config.save(path / "config.json")
    return path


# -- ablations ------------------------------------------------------------------

@dataclass
class AblationReport:
    kind: AblationKind
    rows: list = field(default_factory=list)   # (variant, [accuracy per repeat])

    def summary(self):
        for variant, accs in self.rows:
            a = np.asarray(accs, dtype=float)
            std = float(a.std(ddof=1)) if a.size > 1 else 0.0
            yield variant, float(a.mean()), std, a.size

    def to_text(self) -> str:
        lines = [(v, f"{m:.4f}", f"{s:.4f}", str(n)) for v, m, s, n in self.summary()]
        header = ("variant", "mean", "std", "n")
        widths = [max(len(r[i]) for r in [header, *lines]) for i in range(4)]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                  for i, (c, w) in enumerate(zip(r, widths)))
        out = [f"{self.kind.value} ablation", fmt(header), fmt(["-" * w for w in widths])]
        out += [fmt(r) for r in lines]
        return "\n".join(out)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "mean", "std", "n", "accuracies"])
            for (variant, m, s, n), (_, accs) in zip(self.summary(), self.rows):
                w.writerow([variant, f"{m:.6f}", f"{s:.6f}", n,
                            ";".join(f"{a:.6f}" for a in accs)])
        return path


def _variants(kind: AblationKind, config: ExperimentConfig):
    """(label, config) pairs for every variant except the pretrained-link one."""
    rep = dataclasses.replace
    if kind is AblationKind.DISTANCE:
        return [(m.value, rep(config, metric=m)) for m in DistanceMetric]
    if kind is AblationKind.POOLING:
        return [(p.value, rep(config, pooling=p)) for p in PoolingMethod]
    if kind is AblationKind.LINKING:
        return [(k.value, rep(config, strategy=LinkStrategy(k)))
                for k in (LinkKind.RANDOM_LINK, LinkKind.ORDERED, LinkKind.AFD_COTRAIN)]
    # CANDIDATES: how the teacher pool is thinned, sized to the student's count
    s_ids = config.student_policy.apply(select_candidates(config.student_arch), config.seed)
    k = len(s_ids)
    return [
        ("ALL", rep(config, candidate_policy=CandidatePolicy(PolicyKind.ALL))),
        (f"EQUAL_INTERVAL({k})",
         rep(config, candidate_policy=CandidatePolicy(PolicyKind.EQUAL_INTERVAL, k))),
        (f"RANDOM({k})", rep(config, candidate_policy=CandidatePolicy(PolicyKind.RANDOM, k))),
    ]


def run_ablation(kind, config: ExperimentConfig, repeats: int = 1, out_dir=None,
                 teacher=None, data=None) -> AblationReport:
    """Run each variant for seeds ``config.seed .. config.seed + repeats - 1``.

    LINKING adds an ``AFD_PRETRAINED`` row that freezes the final-epoch link
    matrix of the co-trained run with the same seed.
    """
    kind = AblationKind(kind)
    data = data if data is not None else _load_data(config)
    teacher = teacher if teacher is not None else load_teacher(config)
    variants = _variants(kind, config)
    results = {label: [] for label, _ in variants}
    if kind is AblationKind.LINKING:
        results = {LinkKind.RANDOM_LINK.value: [], LinkKind.ORDERED.value: [],
                   LinkKind.AFD_PRETRAINED.value: [], LinkKind.AFD_COTRAIN.value: []}

    for r in range(repeats):
        seed = config.seed + r
        for label, cfg in variants:
            cfg = dataclasses.replace(cfg, seed=seed)
            sub = None if out_dir is None else Path(out_dir) / _slug(label) / f"seed_{seed}"
            record, trace = run_distillation(cfg, teacher=teacher, out_dir=sub, data=data)
            results[label].append(record.final_accuracy)
            log.info("%s seed %d: %.4f", label, seed, record.final_accuracy)
            if kind is AblationKind.LINKING and cfg.strategy.kind is LinkKind.AFD_COTRAIN:
                frozen = LinkStrategy(LinkKind.AFD_PRETRAINED, trace.matrices[-1])
                pcfg = dataclasses.replace(cfg, strategy=frozen)
                psub = None
                if out_dir is not None:
                    psub = Path(out_dir) / "afd_pretrained" / f"seed_{seed}"
                    save_attention_csv(psub / "links.csv", trace.matrices[-1])
                precord, _ = run_distillation(pcfg, teacher=teacher, out_dir=psub, data=data)
                results[LinkKind.AFD_PRETRAINED.value].append(precord.final_accuracy)
    return AblationReport(kind, list(results.items()))


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")


# -- attention export -----------------------------------------------------------------

_TRACE_RE = re.compile(r"alpha_epoch_(\d+)\.csv$")


def export_attention(trace_dir, out, scale: int = 16, render: bool = True) -> list[Path]:
    """Write ``attention.csv`` (epoch, t, s, alpha) and one grayscale PNG per epoch.

    Heatmaps put student candidates on rows and teacher candidates on columns;
    each cell is a ``scale`` x ``scale`` block whose intensity is ``255 * alpha``.
    PNGs are skipped (with a warning) when Pillow is not installed.
    """
    trace_dir, out = Path(trace_dir), Path(out)
    found = sorted((int(m.group(1)), p) for p in trace_dir.glob("alpha_epoch_*.csv")
                   if (m := _TRACE_RE.search(p.name)))
    if not found:
        raise IngestionError(f"no alpha_epoch_*.csv files in {trace_dir}")
    out.mkdir(parents=True, exist_ok=True)
    matrices = [(epoch, load_attention_csv(p).numpy()) for epoch, p in found]

    written = [out / "attention.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "t", "s", "alpha"])
        for epoch, a in matrices:
            for t in range(a.shape[0]):
                for s in range(a.shape[1]):
                    w.writerow([epoch, t, s, f"{a[t, s]:.9g}"])

    if render:
        try:
            from PIL import Image
        except ImportError:
            log.warning("Pillow is not installed; skipping heatmap rendering")
            return written
        for epoch, a in matrices:
            pixels = np.rint(np.clip(a.T, 0.0, 1.0) * 255).astype(np.uint8)
            pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
            path = out / f"alpha_epoch_{epoch}.png"
            Image.fromarray(pixels, mode="L").save(path)
            written.append(path)
    return written


# -- dispatch -------------------------------------------------------------------

def execute(cmd: Command) -> Path:
    """Run a parsed command and return its output directory."""
    if cmd.verb is Verb.EXPORT_ATTENTION:
        name = _slug(Path(cmd.trace_dir).resolve().parent.name) or "trace"
        out = Path(cmd.out) / f"export-{name}"
        path, n = out, 0
        while path.exists():
            n += 1
            path = out.with_name(f"{out.name}-{n}")
        for p in export_attention(cmd.trace_dir, path):
            print(p)
        return path

    config = cmd.resolve_config()
    run_dir = run_directory(cmd.out, cmd.verb, config)
    log.info("writing to %s", run_dir)

    if cmd.verb is Verb.PRETRAIN:
        path, record = pretrain_teacher(config, run_dir)
        print(f"teacher {config.teacher_arch.name}: val accuracy {record.final_accuracy:.4f}")
        print(path)
    elif cmd.verb is Verb.DISTILL:
        data, teacher = _load_data(config), load_teacher(config)
        accs = []
        for r in range(cmd.repeats):
            cfg = dataclasses.replace(config, seed=config.seed + r)
            sub = run_dir if cmd.repeats == 1 else run_dir / f"seed_{cfg.seed}"
            record, trace = run_distillation(cfg, teacher=teacher, out_dir=sub, data=data)
            accs.append(record.final_accuracy)
            print(f"seed {cfg.seed}: val accuracy {record.final_accuracy:.4f}")
        if cmd.repeats > 1:
            print(f"mean {np.mean(accs):.4f} std {np.std(accs, ddof=1):.4f}")
    elif cmd.verb is Verb.SWEEP:
        rows = sweep_beta(config, config.sweep.values, out_dir=run_dir)
        with open(run_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "accuracy"])
            w.writerows([b, f"{a:.6f}"] for b, a in rows)
        for b, a in rows:
            print(f"beta {b:g}: {a:.4f}")
    else:
        report = run_ablation(cmd.kind, config, cmd.repeats, out_dir=run_dir)
        text = report.to_text()
        (run_dir / "report.txt").write_text(text + "\n")
        report.write_csv(run_dir / "report.csv")
        print(text)
    return run_dir


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        _parser().print_usage(sys.stderr)
        return 2
    try:
        cmd = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        execute(cmd)
    except (ConfigError, ShapeError, DegenerateInputError, NumericError, IngestionError) as exc:
        print(f"afd: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
