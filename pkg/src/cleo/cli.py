"""Batch front-end: dataset generation, sequence runs, and report merging.

Runs are reproducible artifacts: every output directory records the full
config, the seed, and content hashes of everything written, so a run can be
regenerated bit-for-bit from its receipt.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .learner import (
    METHODS,
    NumericError,
    TrainConfig,
    run_sequence,
    save_checkpoint,
)
from .losses import softmax
from .ontology import (
    OntologyError,
    TaskSequence,
    class_groups,
    load_sequence,
    save_sequence,
    validate_sequence,
)
from .presets import PRESET_NAMES, load_preset
from .synthdata import (
    SceneSpec,
    build_class_model,
    generate_benchmark,
    load_dataset,
    save_dataset,
)
from .learner import forward


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def worker_threads() -> int:
    """Worker-thread cap from CLEO_THREADS (default: hardware parallelism)."""
    raw = os.environ.get("CLEO_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CLEO_THREADS must be an integer, got {raw!r}")


@dataclass
class DataParams:
    d_in: int = 8
    hidden_units: int = 32
    sigma: float = 0.25
    anchor_sep: float = 8.0
    child_radius: float = 1.0
    scenes_per_task: int = 4
    eval_scenes: int = 24
    height: int = 24
    width: int = 24
    regions: int = 12
    min_side: int = 2
    bias: float = 0.7
    min_eval_pixels: int = 200


@dataclass
class ExperimentConfig:
    preset: str | None = None
    sequence: str | None = None  # path of a sequence JSON file
    method: str = "moon"
    seed: int = 0
    out: str | None = None
    data: DataParams = field(default_factory=DataParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs_explicit: bool = False

    def resolve_sequence(self) -> TaskSequence:
        if (self.preset is None) == (self.sequence is None):
            raise ConfigError("exactly one of preset / sequence is required")
        if self.preset is not None:
            if self.preset not in PRESET_NAMES:
                raise ConfigError(
                    f"unknown preset {self.preset!r}; valid presets: "
                    + ", ".join(PRESET_NAMES)
                )
            seq = load_preset(self.preset)
        else:
            try:
                seq = load_sequence(self.sequence)
            except FileNotFoundError:
                raise DataError(f"sequence file not found: {self.sequence}")
            except (OntologyError, json.JSONDecodeError, KeyError) as e:
                raise DataError(f"bad sequence file {self.sequence}: {e}")
        report = validate_sequence(seq)
        if not report.ok:
            raise DataError(
                "sequence fails validation: " + "; ".join(report.violations)
            )
        return seq

    def resolved_epochs(self) -> int:
        if self.epochs_explicit:
            return self.train.epochs
        name = self.preset or ""
        return 50 if name.startswith("cs_") else 30


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}")
        known = {"preset", "sequence", "method", "seed", "out", "data", "train"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("preset", "sequence", "method", "out"):
            if key in obj:
                setattr(cfg, key, obj[key])
        if "seed" in obj:
            cfg.seed = int(obj["seed"])
        try:
            if "data" in obj:
                cfg.data = DataParams(**obj["data"])
            if "train" in obj:
                cfg.train = TrainConfig(**obj["train"])
                cfg.epochs_explicit = "epochs" in obj["train"]
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e))

    # flags override file values
    if getattr(args, "preset", None):
        cfg.preset = args.preset
        cfg.sequence = None
    if getattr(args, "sequence", None):
        cfg.sequence = args.sequence
        cfg.preset = None
    if getattr(args, "method", None):
        cfg.method = args.method
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "distill_weight", None) is not None:
        cfg.train.distill_weight = args.distill_weight
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
        cfg.epochs_explicit = True

    if cfg.method not in METHODS:
        raise ConfigError(
            f"unknown method {cfg.method!r}; valid methods: " + ", ".join(METHODS)
        )
    cfg.train.seed = cfg.seed
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# subcommands

def cmd_presets(args) -> int:
    for name in PRESET_NAMES:
        seq = load_preset(name)
        groups = class_groups(seq)
        retained = {p for p in groups.retained}
        print(
            f"{name}: tasks={len(seq.tasks)} "
            f"unsplit={len(groups.unsplit)} split={len(groups.split)} "
            f"retained={len(retained)}"
        )
    return 0


def _build_benchmark(cfg: ExperimentConfig, seq: TaskSequence):
    d = cfg.data
    model = build_class_model(
        seq.ontology, d.d_in, d.anchor_sep, d.child_radius, d.sigma, cfg.seed
    )
    spec = SceneSpec(
        height=d.height,
        width=d.width,
        regions=d.regions,
        min_side=d.min_side,
        seed=cfg.seed,
    )
    return generate_benchmark(
        seq,
        model,
        d.scenes_per_task,
        spec,
        eval_scenes=d.eval_scenes,
        bias=d.bias,
        min_eval_pixels=d.min_eval_pixels,
    )


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    if not cfg.out:
        raise ConfigError("an output directory is required (--out)")
    seq = cfg.resolve_sequence()
    benchmark = _build_benchmark(cfg, seq)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    written = save_dataset(benchmark, outdir)
    save_sequence(seq, outdir / "sequence.json")
    written.append(outdir / "sequence.json")

    receipt = {
        "kind": "dataset",
        "preset": cfg.preset,
        "sequence": cfg.sequence,
        "seed": cfg.seed,
        "data": asdict(cfg.data),
        "hashes": {
            str(p.relative_to(outdir)): _sha256(p) for p in sorted(written)
        },
    }
    _dump_json(outdir / "receipt.json", receipt)
    print(f"wrote {len(written)} files to {outdir}")
    return 0


def _evaluate(checkpoint, seq, eval_X, eval_truth):
    logits = forward(checkpoint.params, eval_X)
    pred_ids = np.asarray(checkpoint.label_space)[np.argmax(logits, axis=1)]
    return metrics.evaluate_predictions(pred_ids, eval_truth, seq)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if not cfg.out:
        raise ConfigError("an output directory is required (--out)")
    data_dir = Path(args.data) if getattr(args, "data", None) else None
    seq = cfg.resolve_sequence()
    threads = worker_threads()

    if data_dir is not None:
        if not data_dir.exists():
            raise DataError(f"dataset directory not found: {data_dir}")
        try:
            receipt = json.loads(
                (data_dir / "receipt.json").read_text(encoding="utf-8")
            )
        except FileNotFoundError:
            raise DataError(f"{data_dir} has no receipt.json")
        if cfg.preset and receipt.get("preset") not in (None, cfg.preset):
            raise DataError(
                f"dataset was generated for preset {receipt.get('preset')!r}, "
                f"run requests {cfg.preset!r}"
            )
        cfg.data = DataParams(**receipt["data"])
        disk_seq = load_sequence(data_dir / "sequence.json")
        if disk_seq != seq and cfg.preset is None:
            seq = disk_seq
        try:
            benchmark = load_dataset(seq, data_dir)
        except (FileNotFoundError, OntologyError, ValueError) as e:
            raise DataError(str(e))
    else:
        benchmark = _build_benchmark(cfg, seq)

    train = TrainConfig(
        lr_first=cfg.train.lr_first,
        lr_later=cfg.train.lr_later,
        epochs=cfg.resolved_epochs(),
        batch_pixels=cfg.train.batch_pixels,
        distill_weight=0.0 if cfg.method == "finetune" else cfg.train.distill_weight,
        momentum=cfg.train.momentum,
        seed=cfg.seed,
        head_init=cfg.train.head_init,
    )

    for t, ds in enumerate(benchmark.per_task):
        if ds.features.shape[1] != cfg.data.d_in:
            raise DataError(
                f"task {t}: dataset features have dimension "
                f"{ds.features.shape[1]}, config says {cfg.data.d_in}"
            )

    result = run_sequence(
        seq,
        benchmark.per_task,
        cfg.method,
        train,
        d_in=cfg.data.d_in,
        hidden_units=cfg.data.hidden_units,
    )

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    eval_X = benchmark.eval_features
    eval_truth = benchmark.eval_labels

    checkpoint_rows = []
    written: list[Path] = []
    for t, ck in enumerate(result.checkpoints):
        path = outdir / f"task_{t:02d}.ckpt"
        names = [seq.ontology.name_of(c) for c in ck.label_space]
        save_checkpoint(path, ck.params, names)
        written.append(path)
        _, rep = _evaluate(ck, seq, eval_X, eval_truth)
        checkpoint_rows.append({"index": t, "all_miou": rep.all_miou})

    cm, report = _evaluate(result.final, seq, eval_X, eval_truth)
    task_rows = metrics.taskwise_report(cm, seq)

    group_csv = outdir / "group_report.csv"
    metrics.write_group_report_csv(group_csv, report, seq)
    task_csv = outdir / "taskwise.csv"
    metrics.write_taskwise_csv(task_csv, task_rows)
    written.extend([group_csv, task_csv])

    summary = {
        "kind": "run",
        "preset": cfg.preset,
        "sequence": cfg.sequence,
        "method": cfg.method,
        "seed": cfg.seed,
        "cleo_threads": threads,
        "distill_weight": train.distill_weight,
        "train": asdict(train),
        "data": asdict(cfg.data),
        "unsplit_miou": report.unsplit_miou,
        "split_miou": report.split_miou,
        "retained_miou": report.retained_miou,
        "all_miou": report.all_miou,
        "taskwise": {name: value for name, value in task_rows},
        "checkpoints": checkpoint_rows,
        "hashes": {
            str(p.relative_to(outdir)): _sha256(p) for p in sorted(written)
        },
    }
    _dump_json(outdir / "summary.json", summary)
    print(
        f"{cfg.method}: all_miou="
        + (f"{report.all_miou:.4f}" if report.all_miou is not None else "n/a")
        + f" -> {outdir}"
    )
    return 0


def cmd_report(args) -> int:
    summaries = []
    for run_dir in args.runs:
        path = Path(run_dir) / "summary.json"
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"missing summary: {path}")
        except json.JSONDecodeError as e:
            raise DataError(f"corrupt summary {path}: {e}")
        if obj.get("kind") != "run":
            raise DataError(f"{path} is not a run summary")
        summaries.append(obj)
    out = Path(args.out) if args.out else None
    if out:
        metrics.write_comparison_csv(out, summaries)
        print(f"wrote {out}")
    else:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        print("method,unsplit,split,retained,all")
        for s in summaries:
            print(
                f"{s['method']},{fmt(s.get('unsplit_miou'))},"
                f"{fmt(s.get('split_miou'))},{fmt(s.get('retained_miou'))},"
                f"{fmt(s.get('all_miou'))}"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cleo",
        description="Continual learning over evolving label ontologies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("presets", help="list shipped task-sequence presets")
    p.set_defaults(func=cmd_presets)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", help="preset name (see `cleo presets`)")
        p.add_argument("--sequence", help="path of a sequence JSON file")
        p.add_argument("--seed", type=int, help="experiment seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train a method over a task sequence")
    common(p)
    p.add_argument("--method", choices=METHODS, help="training method")
    p.add_argument("--data", help="dataset directory from `cleo generate`")
    p.add_argument(
        "--lambda",
        dest="distill_weight",
        type=float,
        help="distillation weight",
    )
    p.add_argument("--epochs", type=int, help="epochs per task")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="merge run summaries into one table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="output CSV path (prints when omitted)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
