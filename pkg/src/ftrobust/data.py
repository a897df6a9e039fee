"""Synthetic upstream/downstream image tasks and parametric domain shifts.

Every class is a prototype image plus Gaussian pixel noise. Upstream classes
("parents") have smooth low-frequency prototypes scaled by ``separation``.
Each downstream class ("child") adds a finer sub-prototype scaled by
``separation * child_ratio`` on top of its parent. Upstream samples are drawn
from all children of a parent and labelled with the parent, so pretraining
learns parent features that are blind to the child distinctions.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

SHIFT_KINDS = ("identity", "invert", "edge_sketch", "style_noise", "blur", "contrast")
DATASET_FORMAT = "ftrobust-dataset/1"


@dataclass
class Dataset:
    x: np.ndarray  # [N, C, H, W] in [0, 1]
    y: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name)


@dataclass(frozen=True)
class TaskSpec:
    num_classes_upstream: int = 10
    children_per_parent: int = 5
    class_tree: tuple | None = None  # parent index of each downstream class
    separation: float = 0.15
    child_ratio: float = 0.05
    image_size: int = 16
    channels: int = 3
    noise_std: float = 0.03
    samples_per_class: int = 40
    test_per_class: int = 20
    upstream_per_class: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.class_tree is None:
            tree = tuple(c // self.children_per_parent
                         for c in range(self.num_classes_upstream * self.children_per_parent))
            object.__setattr__(self, "class_tree", tree)
        else:
            object.__setattr__(self, "class_tree", tuple(int(p) for p in self.class_tree))
        if not self.class_tree:
            raise ConfigError("task.class_tree must name at least one downstream class", field="task.class_tree")
        for p in self.class_tree:
            if not 0 <= p < self.num_classes_upstream:
                raise ConfigError(f"task.class_tree parent {p} outside [0, {self.num_classes_upstream})",
                                  field="task.class_tree")
        if not self.separation > 0:
            raise ConfigError(f"task.separation must be > 0, got {self.separation}", field="task.separation")
        if self.child_ratio < 0:
            raise ConfigError("task.child_ratio must be >= 0", field="task.child_ratio")
        for name in ("samples_per_class", "test_per_class", "upstream_per_class", "image_size", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task.{name} must be >= 1", field=f"task.{name}")

    @property
    def num_classes_downstream(self) -> int:
        return len(self.class_tree)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["class_tree"] = list(self.class_tree)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task keys: {', '.join(sorted(unknown))}", field="task")
        return cls(**dict(data))


@dataclass
class Task:
    spec: TaskSpec
    upstream: Dataset
    train: Dataset
    test: Dataset
    parent_protos: np.ndarray
    child_protos: np.ndarray = field(repr=False)


def smooth_pattern(rng: np.random.Generator, channels: int, size: int, max_freq: int) -> np.ndarray:
    """Random sum of 2-D cosines with frequencies up to ``max_freq``, zero mean, unit RMS."""
    grid = np.arange(size) / size
    out = np.zeros((channels, size, size))
    for c in range(channels):
        for fu in range(max_freq + 1):
            for fv in range(max_freq + 1):
                if fu == 0 and fv == 0:
                    continue
                amp = rng.standard_normal() / np.hypot(fu, fv)
                phase = rng.uniform(0, 2 * np.pi)
                out[c] += amp * np.cos(2 * np.pi * (fu * grid[:, None] + fv * grid[None, :]) + phase)
    out -= out.mean()
    return out / np.sqrt((out ** 2).mean())


def _draw(rng: np.random.Generator, protos: np.ndarray, per_class: int, noise: float) -> np.ndarray:
    x = protos[:, None] + noise * rng.standard_normal((protos.shape[0], per_class) + protos.shape[1:])
    return np.clip(x, 0.0, 1.0)


def make_task(spec: TaskSpec) -> Task:
    """Generate upstream, downstream-train and downstream-test sets; pure in ``spec``."""
    root = np.random.SeedSequence(spec.seed)
    proto_ss, up_ss, train_ss, test_ss = root.spawn(4)
    prng = np.random.default_rng(proto_ss)
    size, ch = spec.image_size, spec.channels
    parents = np.stack([smooth_pattern(prng, ch, size, 2) for _ in range(spec.num_classes_upstream)])
    subs = np.stack([smooth_pattern(prng, ch, size, 4) for _ in range(spec.num_classes_downstream)])
    tree = np.asarray(spec.class_tree)
    parent_protos = 0.5 + spec.separation * parents
    child_protos = parent_protos[tree] + spec.separation * spec.child_ratio * subs
    gaps = [np.abs(child_protos[i] - child_protos[j]).max()
            for i in range(len(child_protos)) for j in range(i)]
    if gaps and min(gaps) < 1e-3:
        warnings.warn(f"downstream prototypes nearly coincide (min gap {min(gaps):.2e}); "
                      "the task is close to chance level", stacklevel=2)

    def split(ss, per_class):
        x = np.concatenate([_draw(np.random.default_rng(s), child_protos[c:c + 1], per_class, spec.noise_std)[0]
                            for c, s in enumerate(ss.spawn(len(child_protos)))])
        y = np.repeat(np.arange(len(child_protos)), per_class)
        return x, y

    xtr, ytr = split(train_ss, spec.samples_per_class)
    xte, yte = split(test_ss, spec.test_per_class)
    # upstream: children pooled under their parent label, equal counts per parent
    urng = np.random.default_rng(up_ss)
    ux, uy = [], []
    for p in range(spec.num_classes_upstream):
        kids = np.flatnonzero(tree == p)
        if len(kids) == 0:
            protos = parent_protos[p:p + 1]
            pick = np.zeros(spec.upstream_per_class, dtype=np.int64)
        else:
            protos = child_protos[kids]
            pick = urng.integers(0, len(kids), spec.upstream_per_class)
        noise = spec.noise_std * urng.standard_normal((spec.upstream_per_class, ch, size, size))
        ux.append(np.clip(protos[pick] + noise, 0.0, 1.0))
        uy.append(np.full(spec.upstream_per_class, p))
    upstream = Dataset(np.concatenate(ux), np.concatenate(uy).astype(np.int64), spec.num_classes_upstream, "upstream")
    return Task(spec, upstream,
                Dataset(xtr, ytr.astype(np.int64), spec.num_classes_downstream, "train"),
                Dataset(xte, yte.astype(np.int64), spec.num_classes_downstream, "test"),
                parent_protos, child_protos)


# ---------------------------------------------------------------- domain shifts


@dataclass(frozen=True)
class DomainShift:
    kind: str = "identity"
    strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; expected one of {', '.join(SHIFT_KINDS)}",
                              field="shift.kind")
        if not 0 <= self.strength <= 1:
            raise ConfigError(f"shift strength must lie in [0, 1], got {self.strength}", field="shift.strength")

    @property
    def name(self) -> str:
        return self.kind if self.kind == "identity" else f"{self.kind}@{self.strength:g}"

    @classmethod
    def parse(cls, text: str) -> "DomainShift":
        """'kind' or 'kind@strength'."""
        kind, _, strength = str(text).partition("@")
        return cls(kind.strip(), float(strength) if strength else 1.0)


def edge_map(x: np.ndarray) -> np.ndarray:
    """Per-image gradient magnitude of the channel mean, scaled to [0, 1]."""
    gray = x.mean(axis=1)
    gy = ndimage.sobel(gray, axis=1, mode="nearest")
    gx = ndimage.sobel(gray, axis=2, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.reshape(len(mag), -1).max(axis=1)
    mag = mag / np.where(peak > 0, peak, 1.0)[:, None, None]
    return np.repeat(mag[:, None], x.shape[1], axis=1)


def apply_shift(data: Dataset | np.ndarray, shift: DomainShift):
    """Label-preserving pixel transform; outputs are clamped to [0, 1]."""
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    s = shift.strength
    if shift.kind == "identity" or s == 0:
        out = x.copy()
    elif shift.kind == "invert":
        out = x + s * (1.0 - 2.0 * x)
    elif shift.kind == "edge_sketch":
        out = (1 - s) * x + s * (1.0 - edge_map(x))
    elif shift.kind == "style_noise":
        rng = np.random.default_rng(shift.seed)
        n, ch, size, _ = x.shape
        field_ = np.stack([smooth_pattern(rng, ch, size, 1) for _ in range(n)])
        out = x + 0.3 * s * field_
    elif shift.kind == "blur":
        out = ndimage.gaussian_filter(x, sigma=(0, 0, 2.0 * s, 2.0 * s), mode="nearest")
    elif shift.kind == "contrast":
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = m + (1.0 - s) * (x - m)
    else:  # pragma: no cover
        raise ConfigError(f"unhandled shift {shift.kind}", field="shift.kind")
    out = np.clip(out, 0.0, 1.0)
    if isinstance(data, Dataset):
        return Dataset(out, data.y, data.num_classes, f"{data.name}:{shift.name}")
    return out


# ---------------------------------------------------------------- export


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(directory, data: Dataset, meta: Mapping | None = None) -> Path:
    """Write ``<name>.f64`` (images), ``<name>.labels.i64`` and ``<name>.json`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = data.name or "dataset"
    xp, yp = directory / f"{name}.f64", directory / f"{name}.labels.i64"
    np.ascontiguousarray(data.x, dtype="<f8").tofile(xp)
    np.ascontiguousarray(data.y, dtype="<i8").tofile(yp)
    manifest = {"format": DATASET_FORMAT, "name": name, "shape": list(data.x.shape),
                "num_classes": data.num_classes, "images": xp.name, "labels": yp.name,
                "sha256": {xp.name: _sha256(xp), yp.name: _sha256(yp)}, "meta": dict(meta or {})}
    mp = directory / f"{name}.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mp


def load_dataset(manifest_path) -> Dataset:
    mp = Path(manifest_path)
    manifest = json.loads(mp.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{mp}: unsupported dataset format {manifest.get('format')!r}")
    for fname, digest in manifest["sha256"].items():
        if _sha256(mp.parent / fname) != digest:
            raise DataError(f"{mp}: checksum mismatch for {fname}")
    x = np.fromfile(mp.parent / manifest["images"], dtype="<f8").reshape(manifest["shape"])
    y = np.fromfile(mp.parent / manifest["labels"], dtype="<i8")
    return Dataset(x, y, manifest["num_classes"], manifest["name"])
