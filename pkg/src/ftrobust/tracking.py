"""Evaluation schedules and the tracked fine-tuning loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as vit
from .attack import AttackConfig, VitOracle, robust_accuracy
from .data import Dataset, DomainShift, Task, apply_shift
from .errors import AnalysisError, ConfigError, DivergenceError
from .peft import PeftAttachment

# (range_start, range_end, stride); a step s in (start, end] is emitted when s % stride == 0
ADVERSARIAL_STRIDES = ((0, 700, 50), (700, 3000, 1000), (3000, None, 6000))
OOD_STRIDES = ((0, 1000, 200), (1000, 3000, 2000), (3000, 10000, 4000), (10000, 30000, 6000), (30000, None, 20000))
MODES = ("adversarial", "ood")


@dataclass(frozen=True)
class Schedule:
    mode: str = "adversarial"
    strides: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"schedule mode must be one of {MODES}, got {self.mode!r}", field="schedule.mode")
        table = self.strides
        if table is None:
            table = ADVERSARIAL_STRIDES if self.mode == "adversarial" else OOD_STRIDES
        table = tuple((int(a), None if b is None else int(b), int(s)) for a, b, s in table)
        prev_end = 0
        for i, (a, b, s) in enumerate(table):
            if a != prev_end:
                raise ConfigError(f"schedule range {i} starts at {a}, expected {prev_end}", field="schedule.strides")
            if s <= 0:
                raise ConfigError(f"schedule stride must be positive, got {s}", field="schedule.strides")
            if b is None:
                if i != len(table) - 1:
                    raise ConfigError("only the last schedule range may be open-ended", field="schedule.strides")
            elif b <= a:
                raise ConfigError(f"schedule range ({a}, {b}] is empty", field="schedule.strides")
            prev_end = b
        object.__setattr__(self, "strides", table)

    def steps(self, total_steps: int) -> list[int]:
        if total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {total_steps}", field="train.total_steps")
        out = [0]
        for a, b, s in self.strides:
            hi = total_steps if b is None else min(b, total_steps)
            first = (a // s + 1) * s
            out.extend(range(first, hi + 1, s))
            if b is None or b >= total_steps:
                break
        if out[-1] != total_steps:
            out.append(total_steps)
        return out


def eval_steps(total_steps: int, mode: str = "adversarial") -> list[int]:
    return Schedule(mode).steps(total_steps)


def steps_per_epoch(num_train: int, batch_size: int) -> int:
    return math.ceil(num_train / batch_size)


@dataclass
class TrackRecord:
    step: int
    train_acc: float
    test_acc: float
    train_loss: float
    adv_acc: float | None = None
    ood_acc: dict = field(default_factory=dict)
    checkpoint_id: str = ""

    def get(self, key: str) -> float:
        if key.startswith("ood_"):
            return self.ood_acc[key[4:]]
        value = getattr(self, key)
        if value is None:
            raise AnalysisError(f"record at step {self.step} has no {key}")
        return value


@dataclass
class TrackResult:
    records: list
    final_params: dict
    eval_subset: np.ndarray
    diverged: bool = False
    diverged_step: int | None = None
    message: str = ""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    total_steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}", field="train.lr")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0", field="train.weight_decay")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", field="train.batch_size")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0", field="train.total_steps")


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent training and evaluation generators derived from one seed."""
    train_ss, eval_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(eval_ss)


def pretrain(cfg: vit.ModelConfig, upstream: Dataset, steps: int, seed: int, lr: float = 1e-3,
             weight_decay: float = 0.05, batch_size: int = 64) -> dict:
    """Train a fresh backbone with full supervision on the upstream classes."""
    cfg = cfg.with_classes(upstream.num_classes)
    params = vit.init_params(cfg, seed)
    opt = vit.AdamW(lr=lr, weight_decay=weight_decay)
    rng, _ = _streams(seed)
    names = list(params)
    for _ in range(steps):
        idx = rng.integers(0, len(upstream), batch_size)
        params, _ = vit.train_step(cfg, params, names, upstream.x[idx], upstream.y[idx], opt)
    return params


def _clean_metrics(cfg, params, hooks, data: Dataset, batch_size: int = 512) -> tuple[float, float]:
    correct, total_loss = 0, 0.0
    for i in range(0, len(data), batch_size):
        logits = vit.forward(cfg, params, data.x[i:i + batch_size], hooks)
        y = data.y[i:i + batch_size]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss -= float(logp[np.arange(len(y)), y].sum())
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y))
    return correct / len(data), total_loss / len(data)


def evaluate(cfg: vit.ModelConfig, params: Mapping[str, np.ndarray], hooks: vit.Hooks, task: Task,
             attack: AttackConfig | None, shifted: Mapping[str, Dataset], eval_subset: np.ndarray,
             step: int = 0, rng: np.random.Generator | None = None) -> TrackRecord:
    """Metrics of one frozen snapshot; deterministic unless the attack uses a random start."""
    train_acc, train_loss = _clean_metrics(cfg, params, hooks, task.train)
    test_acc, _ = _clean_metrics(cfg, params, hooks, task.test)
    adv = None
    if attack is not None:
        sub = task.test.subset(eval_subset)
        adv = robust_accuracy(VitOracle(cfg, params, hooks), sub.x, sub.y, attack, batch_size=256, rng=rng)
    ood = {name: _clean_metrics(cfg, params, hooks, ds)[0] for name, ds in shifted.items()}
    return TrackRecord(step, train_acc, test_acc, train_loss, adv, ood)


def run_tracked(att: PeftAttachment, params: Mapping[str, np.ndarray], task: Task, train: TrainConfig,
                schedule: Schedule | Sequence[int], attack: AttackConfig | None = None,
                shifts: Sequence[DomainShift] = (), eval_size: int = 512,
                checkpoint_dir=None) -> TrackResult:
    """Fine-tune ``params`` under ``att`` and evaluate frozen snapshots on the schedule.

    Batches come from the training stream and evaluation randomness (subset
    choice, attack starts) from a separate stream, so the parameter trajectory
    does not depend on how often evaluation happens.
    """
    cfg = att.cfg
    steps = schedule.steps(train.total_steps) if isinstance(schedule, Schedule) else sorted(set(schedule))
    if not steps or steps[0] < 0 or steps[-1] > train.total_steps:
        raise ConfigError(f"evaluation steps must lie in [0, {train.total_steps}]", field="schedule")
    if len(task.train.y) and task.train.num_classes != cfg.num_classes:
        raise ConfigError(f"attachment has {cfg.num_classes} classes, task has {task.train.num_classes}",
                          field="task.class_tree")
    train_rng, eval_rng = _streams(train.seed)
    eval_subset = np.sort(eval_rng.choice(len(task.test), min(eval_size, len(task.test)), replace=False))
    shifted = {s.name: apply_shift(task.test, s) for s in shifts}
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    opt = vit.AdamW(lr=train.lr, weight_decay=train.weight_decay)
    params = dict(params)
    records: list[TrackRecord] = []
    pending = list(steps)
    step = 0
    result = TrackResult(records, params, eval_subset)
    while True:
        if pending and pending[0] == step:
            pending.pop(0)
            rec = evaluate(cfg, params, att.hooks, task, attack, shifted, eval_subset, step, eval_rng)
            if ckdir is not None:
                rec.checkpoint_id = f"step_{step:07d}.ckpt"
                vit.save_checkpoint(ckdir / rec.checkpoint_id, params, cfg,
                                    {"step": step, "peft": att.spec.to_dict()})
            records.append(rec)
        if step == train.total_steps:
            break
        idx = train_rng.integers(0, len(task.train), train.batch_size)
        try:
            params, _ = vit.train_step(cfg, params, att.trainable, task.train.x[idx], task.train.y[idx],
                                       opt, att.hooks)
        except DivergenceError as exc:
            result.diverged, result.diverged_step, result.message = True, exc.step, str(exc)
            break
        step += 1
    result.final_params = params
    return result


# ---------------------------------------------------------------- peaks


@dataclass(frozen=True)
class Peak:
    peak_step: int
    peak_value: float
    final_value: float
    tau: float

    @property
    def declined(self) -> bool:
        return self.peak_value - self.final_value > self.tau


def detect_peak(records: Sequence[TrackRecord], key: str = "adv_acc", tau: float = 0.02) -> Peak:
    """Earliest maximum of ``key`` and the final value; ``declined`` when the drop exceeds tau."""
    if len(records) < 3:
        raise AnalysisError(f"peak detection needs at least 3 records, got {len(records)}")
    values = np.array([r.get(key) for r in records], dtype=np.float64)
    i = int(np.argmax(values))  # argmax returns the first maximum
    return Peak(records[i].step, float(values[i]), float(values[-1]), tau)


# ---------------------------------------------------------------- logs


def csv_header(domains: Sequence[str]) -> list[str]:
    return ["step", "train_acc", "test_acc", "adv_acc", *[f"ood_{d}" for d in domains],
            "train_loss", "checkpoint_id"]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def records_to_csv(records: Sequence[TrackRecord]) -> str:
    domains = list(records[0].ood_acc) if records else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(domains))
    for r in records:
        w.writerow([r.step, _fmt(r.train_acc), _fmt(r.test_acc), _fmt(r.adv_acc),
                    *[_fmt(r.ood_acc[d]) for d in domains], _fmt(r.train_loss), r.checkpoint_id])
    return buf.getvalue()


def read_track_csv(path) -> list[TrackRecord]:
    """Parse a track log; malformed rows raise AnalysisError naming the line."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise AnalysisError(f"{path}: empty track log")
    header = rows[0]
    fixed = ["step", "train_acc", "test_acc", "adv_acc"]
    if header[:4] != fixed or header[-2:] != ["train_loss", "checkpoint_id"]:
        raise AnalysisError(f"{path}:1: unexpected header {','.join(header)}")
    domains = [h[4:] for h in header[4:-2]]
    if any(not h.startswith("ood_") for h in header[4:-2]):
        raise AnalysisError(f"{path}:1: OOD columns must start with 'ood_'")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise AnalysisError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(v) if v != "" else None for v in row[1:-1]]
            step = int(row[0])
        except ValueError as exc:
            raise AnalysisError(f"{path}:{lineno}: {exc}") from None
        train_acc, test_acc, adv = vals[0], vals[1], vals[2]
        if train_acc is None or test_acc is None or vals[-1] is None:
            raise AnalysisError(f"{path}:{lineno}: missing accuracy or loss")
        for v in (train_acc, test_acc, adv, *vals[3:-1]):
            if v is not None and not 0 <= v <= 1:
                raise AnalysisError(f"{path}:{lineno}: accuracy {v} outside [0, 1]")
        out.append(TrackRecord(step, train_acc, test_acc, vals[-1], adv,
                               dict(zip(domains, vals[3:-1])), row[-1]))
    return out
