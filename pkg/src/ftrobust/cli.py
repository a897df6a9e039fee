"""Command-line front end: run, sweep, analyze, theory, schedule, decompose.

A config is one JSON object with a section per module::

    {"seed": 0, "name": "hard",
     "model": {...}, "peft": {"method": "LoRA", ...}, "task": {...},
     "attack": {...}, "schedule": {"mode": "adversarial"},
     "train": {...}, "pretrain": {...}, "eval": {...}}

Every section is optional except ``peft.method``. Any key can be overridden on
the command line as ``--section.key value`` (values are parsed as JSON,
falling back to a plain string).
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import Pool
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import analysis, kernels, peft, theory
from . import model as vit
from . import tracking as tr
from .attack import AttackConfig
from .data import DomainShift, TaskSpec, make_task
from .errors import AnalysisError, ConfigError, DataError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MANIFEST_FORMAT = "ftrobust-run/1"
SWEEP_AXES = {
    "lr": ("train", "lr"),
    "rank": ("peft", "rank"),
    "reduction_factor": ("peft", "reduction_factor"),
    "method": ("peft", "method"),
    "separation": ("task", "separation"),
    "seed": (None, "seed"),
}
# desk-scale backbone used by default for experiments
EXPERIMENT_MODEL = {"depth": 2, "embed_dim": 32, "heads": 2}


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    cache_dir: str | None = None

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("pretrain.steps must be a non-negative integer", field="pretrain.steps")
        if not self.lr > 0:
            raise ConfigError("pretrain.lr must be > 0", field="pretrain.lr")
        if self.batch_size < 1:
            raise ConfigError("pretrain.batch_size must be >= 1", field="pretrain.batch_size")


@dataclass(frozen=True)
class EvalConfig:
    subset: int = 512
    shifts: tuple = ("edge_sketch",)

    def __post_init__(self):
        if not isinstance(self.subset, int) or self.subset < 1:
            raise ConfigError("eval.subset must be a positive integer", field="eval.subset")
        shifts = (self.shifts,) if isinstance(self.shifts, str) else tuple(self.shifts)
        for s in shifts:
            DomainShift.parse(s)
        object.__setattr__(self, "shifts", shifts)

    def domain_shifts(self) -> list[DomainShift]:
        return [DomainShift.parse(s) for s in self.shifts]


@dataclass(frozen=True)
class ExperimentConfig:
    model: vit.ModelConfig
    peft: peft.PeftSpec
    task: TaskSpec
    attack: AttackConfig
    schedule: tr.Schedule
    train: tr.TrainConfig
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    name: str = "default"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "name": self.name,
            "model": asdict(self.model), "peft": self.peft.to_dict(), "task": self.task.to_dict(),
            "attack": self.attack.to_dict(),
            "schedule": {"mode": self.schedule.mode, "strides": [list(s) for s in self.schedule.strides]},
            "train": asdict(self.train), "pretrain": asdict(self.pretrain),
            "eval": {"subset": self.eval.subset, "shifts": list(self.eval.shifts)},
        }


def _section(cls, data, name: str, **forced):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section '{name}' must be a JSON object", field=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}", field=f"{name}.{unknown[0]}")
    kw = {**data, **forced}
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in '{name}': {exc}", field=name) from None


def parse_config(raw: Mapping) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending key."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object", field="config")
    sections = {"model", "peft", "task", "attack", "schedule", "train", "pretrain", "eval", "seed", "name"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", field=unknown[0])
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}", field="seed")
    peft_raw = raw.get("peft") or {}
    if "method" not in peft_raw:
        raise ConfigError("missing required key 'peft.method'", field="peft.method")
    for sec in ("task", "train"):
        if "seed" in (raw.get(sec) or {}):
            raise ConfigError(f"'{sec}.seed' is derived from the top-level seed; set 'seed' instead",
                              field=f"{sec}.seed")
    model = _section(vit.ModelConfig, {**EXPERIMENT_MODEL, **(raw.get("model") or {})}, "model")
    try:
        spec = peft.PeftSpec.from_dict(peft_raw)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid value in 'peft': {exc}", field="peft") from None
    task = _section(TaskSpec, raw.get("task"), "task", seed=seed)
    spec.validate_for(model.with_classes(task.num_classes_downstream))
    if (model.image_size, model.channels) != (task.image_size, task.channels):
        raise ConfigError("model.image_size/channels must match task.image_size/channels", field="model.image_size")
    return ExperimentConfig(
        model=model, peft=spec, task=task,
        attack=_section(AttackConfig, raw.get("attack"), "attack"),
        schedule=_section(tr.Schedule, raw.get("schedule"), "schedule"),
        train=_section(tr.TrainConfig, raw.get("train"), "train", seed=derive_seed(seed, 3)),
        pretrain=_section(PretrainConfig, raw.get("pretrain"), "pretrain"),
        eval=_section(EvalConfig, raw.get("eval"), "eval"),
        seed=seed, name=str(raw.get("name", "default")))


def derive_seed(seed: int, purpose: int) -> int:
    """Independent child seed: 1 pretraining, 2 attachment, 3 fine-tuning."""
    return int(np.random.SeedSequence([seed, purpose]).generate_state(1)[0])


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})", field="config") from None


def apply_overrides(raw: dict, overrides: Mapping[str, object]) -> dict:
    out = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            out[section] = value
        else:
            if not isinstance(out.get(section, {}), dict):
                raise ConfigError(f"cannot override '{dotted}'", field=dotted)
            out.setdefault(section, {})[key] = value
    return out


# ---------------------------------------------------------------- run


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def backbone_key(cfg: ExperimentConfig) -> str:
    ident = {"model": asdict(cfg.model), "task": cfg.task.to_dict(), "seed": cfg.seed,
             "pretrain": {k: v for k, v in asdict(cfg.pretrain).items() if k != "cache_dir"}}
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]


def ensure_backbone(cfg: ExperimentConfig, task, cache_dir: Path) -> tuple[dict, Path]:
    """Load the cached pretrained backbone or train and cache it."""
    path = cache_dir / f"backbone-{backbone_key(cfg)}.ckpt"
    if path.exists():
        params, _, _ = vit.load_checkpoint(path)
        return params, path
    params = tr.pretrain(cfg.model, task.upstream, cfg.pretrain.steps, derive_seed(cfg.seed, 1),
                         lr=cfg.pretrain.lr, weight_decay=cfg.pretrain.weight_decay,
                         batch_size=cfg.pretrain.batch_size)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    vit.save_checkpoint(tmp, params, cfg.model.with_classes(task.upstream.num_classes),
                        {"pretrain": asdict(cfg.pretrain) | {"cache_dir": None}})
    os.replace(tmp, path)
    return params, path


@dataclass
class RunOutcome:
    out: Path
    result: tr.TrackResult
    attachment: peft.PeftAttachment
    manifest: dict


def run_experiment(cfg: ExperimentConfig, out, checkpoints: bool = True) -> RunOutcome:
    """pretrain-if-missing, attach, tracked fine-tuning; writes manifest.json and track.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    task = make_task(cfg.task)
    cache = Path(cfg.pretrain.cache_dir) if cfg.pretrain.cache_dir else out / "pretrained"
    backbone, bb_path = ensure_backbone(cfg, task, cache)
    att, params = peft.attach(cfg.peft, cfg.model, backbone, cfg.task.num_classes_downstream,
                              derive_seed(cfg.seed, 2))
    adversarial = cfg.schedule.mode == "adversarial"
    result = tr.run_tracked(att, params, task, cfg.train, cfg.schedule,
                            attack=cfg.attack if adversarial else None,
                            shifts=() if adversarial else cfg.eval.domain_shifts(),
                            eval_size=cfg.eval.subset,
                            checkpoint_dir=out / "checkpoints" if checkpoints else None)
    (out / "track.csv").write_text(tr.records_to_csv(result.records))
    manifest = {
        "format": MANIFEST_FORMAT, "config": cfg.to_dict(), "run_id": out.name,
        "method": att.spec.method, "task_name": cfg.name,
        "trainable_params": att.counts["trainable"], "total_params": att.counts["total"],
        "trainable_fraction": att.trainable_fraction,
        "backbone": {"file": bb_path.name, "sha256": hashlib.sha256(bb_path.read_bytes()).hexdigest()},
        "eval_subset": [int(i) for i in result.eval_subset],
        "steps_per_epoch": tr.steps_per_epoch(len(task.train), cfg.train.batch_size),
        "diverged": result.diverged, "diverged_step": result.diverged_step, "message": result.message,
        "kernels": kernels.BACKEND,
    }
    (out / "manifest.json").write_text(_canonical_json(manifest))
    return RunOutcome(out, result, att, manifest)


def load_run(run_dir) -> tuple[dict, list]:
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"{run_dir}: cannot read manifest.json ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise AnalysisError(f"{run_dir / 'manifest.json'}:{exc.lineno}: invalid JSON") from None
    return manifest, tr.read_track_csv(run_dir / "track.csv")


# ---------------------------------------------------------------- sweep


def _run_member(job) -> dict:
    raw, out = job
    cfg = parse_config(raw)
    res = run_experiment(cfg, out)
    return summarize_run(res.manifest, res.result.records)


def _robust_key(records) -> str:
    if records and records[0].adv_acc is not None:
        return "adv_acc"
    if records and records[0].ood_acc:
        return "ood_" + next(iter(records[0].ood_acc))
    return "test_acc"


def summarize_run(manifest: Mapping, records: Sequence[tr.TrackRecord]) -> dict:
    key = _robust_key(records)
    last = records[-1]
    row = {"run_id": manifest["run_id"], "method": manifest["method"], "task": manifest["task_name"],
           "seed": manifest["config"]["seed"], "trainable_params": manifest["trainable_params"],
           "final_step": last.step, "final_test_acc": last.test_acc, "robust_key": key,
           "final_robust": last.get(key), "diverged": int(bool(manifest.get("diverged")))}
    if len(records) >= 3:
        pk = tr.detect_peak(records, key)
        row.update(peak_step=pk.peak_step, peak_robust=pk.peak_value, declined=int(pk.declined))
    else:
        row.update(peak_step="", peak_robust="", declined="")
    pts = [analysis.ParetoPoint(r.test_acc, r.get(key), r.step) for r in records]
    row["auc"] = analysis.auc(analysis.pareto_frontier(pts))
    return row


def _value_label(v) -> str:
    text = json.dumps(v) if not isinstance(v, str) else v
    return "".join(c if c.isalnum() or c in ".-_" else "_" for c in text)


def run_sweep(raw: dict, axis: str, values: Sequence, out, jobs: int | None = None) -> Path:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}", field="sweep.axis")
    if not values:
        raise ConfigError("sweep needs at least one value", field="sweep.values")
    out = Path(out)
    section, key = SWEEP_AXES[axis]
    shared_cache = str(out / "pretrained")
    jobs_list = []
    for v in values:
        member = copy.deepcopy(raw)
        if section is None:
            member[key] = v
        else:
            member.setdefault(section, {})[key] = v
        member.setdefault("pretrain", {}).setdefault("cache_dir", shared_cache)
        parse_config(member)  # validate every member before running any
        jobs_list.append((member, out / f"{axis}={_value_label(v)}"))
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(jobs_list) > 1:
        with Pool(min(jobs, len(jobs_list))) as pool:
            rows = pool.map(_run_member, jobs_list)
    else:
        rows = [_run_member(j) for j in jobs_list]
    header = [axis, "run_id", "method", "task", "seed", "trainable_params", "final_step", "final_test_acc",
              "robust_key", "final_robust", "peak_step", "peak_robust", "declined", "auc", "diverged"]
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for v, row in zip(values, rows):
            w.writerow([v] + [_fmt(row[h]) for h in header[1:]])
    return out / "summary.csv"


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- analyze


def run_analyze(run_dirs: Sequence, out) -> Path:
    if not run_dirs:
        raise ConfigError("analyze needs at least one run directory", field="analyze.runs")
    out = Path(out)
    plot = out / "plotdata"
    plot.mkdir(parents=True, exist_ok=True)
    frontiers, table, peaks = {}, {}, []
    for d in run_dirs:
        manifest, records = load_run(d)
        run_id = manifest["run_id"]
        key = _robust_key(records)
        pts = [analysis.ParetoPoint(r.test_acc, r.get(key), r.step, run_id) for r in records]
        f = analysis.pareto_frontier(pts)
        frontiers[run_id] = f
        table.setdefault(manifest["task_name"], {}).setdefault(manifest["method"], []).append(analysis.auc(f))
        if len(records) >= 3:
            pk = tr.detect_peak(records, key)
            peaks.append((run_id, manifest["method"], manifest["task_name"], key, pk.peak_step,
                          f"{pk.peak_value:.6f}", f"{pk.final_value:.6f}", int(pk.declined)))
        curve = [(r.step, r.train_acc, r.test_acc, r.get(key)) for r in records]
        _write_csv(plot / f"curves_{run_id}.csv", ("step", "train_acc", "test_acc", key),
                   [(s, *(f"{v:.6f}" for v in vals)) for s, *vals in curve])
        prof = analysis.frontier_slope_profile(f)
        _write_csv(plot / f"frontier_{run_id}.csv", ("step", "accuracy", "robustness"),
                   [(p.step, f"{p.accuracy:.6f}", f"{p.robustness:.6f}") for p in f.points])
        _write_csv(plot / f"slopes_{run_id}.csv", ("segment", "slope"),
                   [(i, f"{s:.6f}") for i, s in enumerate(prof.slopes)])
    (out / "pareto.csv").write_text(analysis.frontier_csv(frontiers))
    means = {t: {m: float(np.mean(v)) for m, v in ms.items()} for t, ms in table.items()}
    (out / "auc_table.csv").write_text(analysis.auc_table_csv(means))
    _write_csv(out / "peaks.csv", ("run_id", "method", "task", "key", "peak_step", "peak_value",
                                   "final_value", "declined"), peaks)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- argument parsing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(extra: Sequence[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}", field="cli")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}", field=name)
            value = extra[i + 1]
            i += 1
        out[name.replace("-", "_")] = _parse_value(value)
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for sweeps")
    p = argparse.ArgumentParser(prog="ftrobust", parents=[common],
                                description="Track robustness and accuracy during fine-tuning.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="one tracked fine-tuning run")
    r.add_argument("config")
    s = sub.add_parser("sweep", parents=[common], help="one run per value of an axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated values")
    a = sub.add_parser("analyze", parents=[common], help="Pareto frontiers, AUC table, peaks")
    a.add_argument("runs", nargs="+")
    t = sub.add_parser("theory", parents=[common], help="closed-form accuracy of the linear theory model")
    t.add_argument("--d", required=True, help="weak-feature count (comma list with --grid)")
    t.add_argument("--k", default="0", help="adapted weights (comma list with --grid)")
    t.add_argument("--eta", default="auto", help="mean shift or 'auto' for the 99%% bound (comma list with --grid)")
    t.add_argument("--epsilon", default="0", help="L-inf budget (comma list with --grid)")
    t.add_argument("--p", type=float, default=0.95)
    t.add_argument("--mc", type=int, default=0, help="Monte-Carlo samples per point (grid default 100000)")
    t.add_argument("--grid", action="store_true", help="emit a CSV grid over all combinations")
    c = sub.add_parser("schedule", parents=[common], help="print evaluation steps")
    c.add_argument("--total", type=int, required=True)
    c.add_argument("--mode", choices=tr.MODES, default="adversarial")
    sub.add_parser("decompose", parents=[common], help="print the PEFT decomposition registry")
    return p


def _config_from_args(args, extra) -> dict:
    raw = load_config(args.config)
    raw = apply_overrides(raw, _overrides(extra))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return raw


def _numbers(text: str, kind, name: str) -> list:
    try:
        return [v if v == "auto" else kind(v) for v in (t.strip() for t in str(text).split(",")) if v]
    except ValueError:
        raise ConfigError(f"theory --{name}: cannot parse {text!r}", field=f"theory.{name}") from None


def _cmd_theory(args) -> int:
    ds, ks = _numbers(args.d, int, "d"), _numbers(args.k, int, "k")
    etas, eps = _numbers(args.eta, float, "eta"), _numbers(args.epsilon, float, "epsilon")
    if args.grid:
        rows = theory.theory_grid(ds, ks, etas, eps, n=args.mc or 100_000, seed=getattr(args, "seed", 0), p=args.p)
        header = ("d", "k", "eta", "epsilon", "closed_acc", "closed_adv_acc", "mc_acc", "mc_adv_acc")
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(r[h]) for h in header] for r in rows])
        return EXIT_OK
    if max(map(len, (ds, ks, etas, eps))) > 1:
        raise ConfigError("comma lists need --grid", field="theory.grid")
    d, k, eta, epsilon = ds[0], ks[0], etas[0], eps[0]
    if eta == "auto":
        eta = theory.eta_lower_bound(k, d)
    params = theory.TheoryParams(d=d, k=k, eta=eta, p=args.p)
    print(f"eta = {eta:.4f}")
    print(f"closed_accuracy = {theory.ft_accuracy_closed(params):.4f}")
    if epsilon > 0:
        print(f"closed_adversarial_accuracy = {theory.adv_accuracy_closed(params, epsilon):.4f}")
    if args.mc:
        clf = theory.LinearFtClassifier.for_params(params)
        est = theory.monte_carlo_accuracy(clf, params, args.mc, epsilon, getattr(args, "seed", 0))
        print(f"mc_accuracy = {est.accuracy:.4f} +- {est.stderr:.4f}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra and args.command not in ("run", "sweep"):
            parser.error(f"unrecognised arguments: {' '.join(extra)}")
        out = getattr(args, "out", None)
        if args.command == "run":
            cfg = parse_config(_config_from_args(args, extra))
            res = run_experiment(cfg, out or Path("runs") / cfg.name)
            print(f"wrote {res.out / 'track.csv'} ({len(res.result.records)} records)")
            if res.result.diverged:
                print(f"error: training diverged: {res.result.message}", file=sys.stderr)
                return EXIT_DIVERGED
        elif args.command == "sweep":
            raw = _config_from_args(args, extra)
            values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
            path = run_sweep(raw, args.axis, values, out or Path("sweeps") / args.axis,
                             getattr(args, "jobs", None))
            print(f"wrote {path}")
        elif args.command == "analyze":
            path = run_analyze(args.runs, out or "analysis")
            print(f"wrote {path}")
        elif args.command == "theory":
            return _cmd_theory(args)
        elif args.command == "schedule":
            print(",".join(str(s) for s in tr.eval_steps(args.total, args.mode)))
        elif args.command == "decompose":
            sys.stdout.write(peft.decomposition_csv())
    except ConfigError as exc:
        field_ = f" [{exc.field}]" if exc.field else ""
        print(f"config error{field_}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError, AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
