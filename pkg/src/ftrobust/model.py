"""Toy vision transformer, AdamW training step and checkpoint I/O.

Parameters live in a flat ``dict[str, np.ndarray]``. A forward pass wraps the
arrays in fresh leaf tensors, so a params dict is an immutable snapshot as
long as callers never write into its arrays (``train_step`` never does; it
returns a new dict with new arrays for the trainable entries only).
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError, DivergenceError

CHECKPOINT_FORMAT = "ftrobust-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    num_classes: int = 10
    ffn_ratio: int = 4

    def __post_init__(self):
        for name in ("depth", "embed_dim", "heads", "patch_size", "image_size", "channels",
                     "num_classes", "ffn_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}",
                                  field=f"model.{name}")
        if self.embed_dim % self.heads:
            raise ConfigError("model.embed_dim must be divisible by model.heads", field="model.embed_dim")
        if self.image_size % self.patch_size:
            raise ConfigError("model.image_size must be divisible by model.patch_size",
                              field="model.image_size")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_ratio * self.embed_dim

    def with_classes(self, num_classes: int) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "num_classes": num_classes})


BLOCK_SHAPES = {
    "ln1.g": lambda c: (c.embed_dim,),
    "ln1.b": lambda c: (c.embed_dim,),
    "attn.wq": lambda c: (c.embed_dim, c.embed_dim),
    "attn.bq": lambda c: (c.embed_dim,),
    "attn.wk": lambda c: (c.embed_dim, c.embed_dim),
    "attn.bk": lambda c: (c.embed_dim,),
    "attn.wv": lambda c: (c.embed_dim, c.embed_dim),
    "attn.bv": lambda c: (c.embed_dim,),
    "attn.wo": lambda c: (c.embed_dim, c.embed_dim),
    "attn.bo": lambda c: (c.embed_dim,),
    "ln2.g": lambda c: (c.embed_dim,),
    "ln2.b": lambda c: (c.embed_dim,),
    "ffn.w1": lambda c: (c.embed_dim, c.ffn_dim),
    "ffn.b1": lambda c: (c.ffn_dim,),
    "ffn.w2": lambda c: (c.ffn_dim, c.embed_dim),
    "ffn.b2": lambda c: (c.embed_dim,),
}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every base parameter; a pure function of the config."""
    shapes = {
        "patch.w": (cfg.patch_dim, cfg.embed_dim),
        "patch.b": (cfg.embed_dim,),
        "cls": (cfg.embed_dim,),
        "pos": (cfg.num_patches + 1, cfg.embed_dim),
    }
    for i in range(cfg.depth):
        for name, fn in BLOCK_SHAPES.items():
            shapes[f"blocks.{i}.{name}"] = fn(cfg)
    shapes["norm.g"] = (cfg.embed_dim,)
    shapes["norm.b"] = (cfg.embed_dim,)
    shapes["head.w"] = (cfg.embed_dim, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def is_bias(name: str) -> bool:
    """Additive bias terms, layer-norm shifts included."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b")


def census(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return int(sum(math.prod(s) for s in shapes.values()))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by rejection."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif is_bias(name):
            params[name] = np.zeros(shape)
        else:
            params[name] = trunc_normal(rng, shape)
    return params


def new_head(cfg: ModelConfig, num_classes: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {"head.w": trunc_normal(rng, (cfg.embed_dim, num_classes)),
            "head.b": np.zeros(num_classes)}


# ---------------------------------------------------------------- forward


class Hooks:
    """Extension points used by fine-tuning attachments; the base class is the identity.

    ``project`` sites: wq, wk, wv, wo, w1, w2. ``scale`` sites: k, v, ff.
    ``adapt`` sites: attn (after the output projection), ffn (after the FFN).
    """

    def project(self, T, block: int, site: str, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return ad.linear(h, w, b)

    def scale(self, T, block: int, site: str, t: Tensor) -> Tensor:
        return t

    def adapt(self, T, block: int, site: str, h: Tensor) -> Tensor:
        return h


NO_HOOKS = Hooks()


def patchify(images: Tensor, cfg: ModelConfig) -> Tensor:
    """[B, C, H, W] (or a single [C, H, W]) -> [B, num_patches, C*p*p], raster patch order."""
    single = images.ndim == 3
    if single:
        images = ad.reshape(images, (1,) + images.shape)
    if images.ndim != 4:
        raise DimensionError(f"patchify expects [B, C, H, W], got {images.shape}")
    bsz, c, h, w = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise DimensionError(
            f"image {images.shape[1:]} does not match config "
            f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    p = cfg.patch_size
    g = cfg.image_size // p
    t = ad.reshape(images, (bsz, c, g, p, g, p))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
    t = ad.reshape(t, (bsz, g * g, c * p * p))
    if single:
        t = ad.reshape(t, t.shape[1:])
    return t


def attention(T: Mapping[str, Tensor], block: int, x: Tensor, heads: int,
              hooks: Hooks = NO_HOOKS) -> Tensor:
    """Multi-head self-attention on [B, S, D] (or [S, D])."""
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    bsz, seq, dim = x.shape
    pre = f"blocks.{block}.attn."
    if T[pre + "wq"].shape[0] != dim:
        raise DimensionError(f"attention: input width {dim} != embed_dim {T[pre + 'wq'].shape[0]}")
    hd = dim // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (bsz, seq, heads, hd)), (0, 2, 1, 3))

    q = hooks.project(T, block, "wq", x, T[pre + "wq"], T[pre + "bq"])
    k = hooks.project(T, block, "wk", x, T[pre + "wk"], T[pre + "bk"])
    v = hooks.project(T, block, "wv", x, T[pre + "wv"], T[pre + "bv"])
    k = hooks.scale(T, block, "k", k)
    v = hooks.scale(T, block, "v", v)
    q, k, v = split(q), split(k), split(v)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, seq, dim))
    out = hooks.project(T, block, "wo", ctx, T[pre + "wo"], T[pre + "bo"])
    if single:
        out = ad.reshape(out, (seq, dim))
    return out


def ffn(T: Mapping[str, Tensor], block: int, x: Tensor, hooks: Hooks = NO_HOOKS) -> Tensor:
    pre = f"blocks.{block}.ffn."
    h = ad.gelu(hooks.project(T, block, "w1", x, T[pre + "w1"], T[pre + "b1"]))
    h = hooks.scale(T, block, "ff", h)
    return hooks.project(T, block, "w2", h, T[pre + "w2"], T[pre + "b2"])


def leaves(params: Mapping[str, np.ndarray], trainable: Iterable[str] = ()) -> dict[str, Tensor]:
    trainable = set(trainable)
    return {name: Tensor(arr, requires_grad=name in trainable) for name, arr in params.items()}


def forward_tensors(cfg: ModelConfig, T: Mapping[str, Tensor], images: Tensor,
                    hooks: Hooks = NO_HOOKS) -> Tensor:
    x = patchify(images, cfg)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    x = ad.linear(x, T["patch.w"], T["patch.b"])
    x = ad.prepend_token(x, T["cls"])
    x = ad.add_trailing(x, T["pos"])
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        a = attention(T, i, ad.layer_norm(x, T[pre + "ln1.g"], T[pre + "ln1.b"]), cfg.heads, hooks)
        x = ad.add(x, hooks.adapt(T, i, "attn", a))
        f = ffn(T, i, ad.layer_norm(x, T[pre + "ln2.g"], T[pre + "ln2.b"]), hooks)
        x = ad.add(x, hooks.adapt(T, i, "ffn", f))
    x = ad.layer_norm(x, T["norm.g"], T["norm.b"])
    return ad.linear(x[:, 0], T["head.w"], T["head.b"])


def forward(cfg: ModelConfig, params: Mapping[str, np.ndarray], images,
            hooks: Hooks = NO_HOOKS) -> np.ndarray:
    """Logits [B, num_classes] as a plain array (no graph retained)."""
    return forward_tensors(cfg, leaves(params), Tensor(images), hooks).data


def loss(logits: Tensor, labels, num_classes: int | None = None) -> Tensor:
    labels = np.asarray(labels)
    ncls = logits.shape[-1] if num_classes is None else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise DataError(f"labels must lie in [0, {ncls}), got range [{labels.min()}, {labels.max()}]")
    return ad.cross_entropy(logits, labels)


def predict(cfg: ModelConfig, params, images, hooks: Hooks = NO_HOOKS, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    out = [forward(cfg, params, images[i:i + batch_size], hooks).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(cfg: ModelConfig, params, images, labels, hooks: Hooks = NO_HOOKS) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((predict(cfg, params, images, hooks) == labels).mean())


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict:
        """Return a new params dict; entries without a gradient are passed through untouched."""
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        out = dict(params)
        for name, g in grads.items():
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name] * (1.0 - self.lr * self.weight_decay)
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def train_step(cfg: ModelConfig, params: Mapping[str, np.ndarray], trainable: Iterable[str],
               images, labels, opt: AdamW, hooks: Hooks = NO_HOOKS) -> tuple[dict, float]:
    """One AdamW step on the batch; only names in ``trainable`` change."""
    trainable = [n for n in params if n in set(trainable)]
    if not trainable:
        raise ConfigError("trainable set is empty", field="peft")
    T = leaves(params, trainable)
    objective = loss(forward_tensors(cfg, T, Tensor(images), hooks), labels)
    value = float(objective.data)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value} at optimiser step {opt.step + 1}",
                              step=opt.step + 1)
    ad.backward(objective)
    grads = {n: T[n].grad for n in trainable}
    return opt.update(params, grads), value


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                    extra: Mapping | None = None) -> None:
    """Write a versioned zip: ``meta.json`` plus one ``.npy`` per parameter.

    Entry timestamps are pinned so identical contents give identical bytes.
    """
    meta = {"format": CHECKPOINT_FORMAT, "model": asdict(cfg), "extra": dict(extra or {}),
            "params": {n: list(a.shape) for n, a in params.items()}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE), json.dumps(meta, sort_keys=True))
        for name in sorted(params):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(params[name], dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _ZIP_DATE), buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = {name: np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                  for name in meta["params"]}
    for name, shape in meta["params"].items():
        if list(params[name].shape) != shape:
            raise DataError(f"{path}: parameter {name} has shape {params[name].shape}, manifest says {shape}")
    return params, ModelConfig(**meta["model"]), meta["extra"]
