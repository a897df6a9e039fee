"""Fine-tuning strategies attached to the toy ViT, and their decomposition registry.

Every strategy adds a freshly initialised task head. The base parameters it
may update are its *base trainable set*; everything else it trains lives in
new ``peft.*`` tensors. With ``init="identity"`` the attached model computes
exactly the same function as the frozen backbone plus head before the first
update.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .model import Hooks, ModelConfig, is_bias, new_head, trunc_normal

METHODS = ("FullFT", "LinearProbe", "LoRA", "BitFit", "Adapter", "Compacter", "IA3")

_ALIASES = {m.lower(): m for m in METHODS}
_ALIASES.update({"full": "FullFT", "full_ft": "FullFT", "lp": "LinearProbe", "linear_probe": "LinearProbe",
                 "ia3": "IA3", "(ia)3": "IA3"})

VALID_LOCATIONS = {
    "LoRA": ("W_Q", "W_K", "W_V", "W_O"),
    "IA3": ("W_K", "W_V", "FFN"),
    "Adapter": ("W_O", "FFN"),
    "Compacter": ("W_O", "FFN"),
    "FullFT": (),
    "LinearProbe": (),
    "BitFit": (),
}

INFO_LOCATIONS = ("Attn", "FFN", "Representation", "Bias")
MECHANISMS = ("ProjectionLayers", "MatrixReparam", "ElementwiseMult", "DirectUpdate")

# Rows of the information-location x mechanism table; full fine-tuning and
# linear probing are not decomposed there and map to empty sets.
DECOMPOSITION = {
    "LoRA": ({"Attn"}, {"MatrixReparam"}),
    "IA3": ({"Representation"}, {"ElementwiseMult"}),
    "Adapter": ({"Representation"}, {"ProjectionLayers"}),
    "Compacter": ({"Representation"}, {"ProjectionLayers", "MatrixReparam"}),
    "BitFit": ({"Attn", "FFN", "Bias"}, {"DirectUpdate"}),
    "FullFT": (set(), set()),
    "LinearProbe": (set(), set()),
}
TABLE_METHODS = ("LoRA", "IA3", "Adapter", "Compacter", "BitFit")
CSV_HEADER = ("method", "Attn", "FFN", "Rep.", "Bias", "Proj. Layers", "Matrix Reparam",
              "Element-wise Mult.", "Direct Update")


def canonical_method(name: str) -> str:
    try:
        return _ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown fine-tuning method {name!r}; expected one of {', '.join(METHODS)}",
                          field="peft.method") from None


@dataclass(frozen=True)
class Decomposition:
    method: str
    info_location: frozenset
    mechanism: frozenset

    def row(self) -> list[int]:
        return ([int(x in self.info_location) for x in INFO_LOCATIONS]
                + [int(x in self.mechanism) for x in MECHANISMS])


def decomposition(method: str) -> Decomposition:
    method = canonical_method(method)
    loc, mech = DECOMPOSITION[method]
    return Decomposition(method, frozenset(loc), frozenset(mech))


def decomposition_csv() -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for m in TABLE_METHODS:
        writer.writerow([m] + decomposition(m).row())
    return buf.getvalue()


@dataclass(frozen=True)
class PeftSpec:
    method: str = "LoRA"
    rank: int = 4
    lora_alpha: float = 8.0
    reduction_factor: int = 8
    kron_factors: int = 4
    locations: tuple | None = None
    init: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        valid = VALID_LOCATIONS[self.method]
        if self.locations is None:
            object.__setattr__(self, "locations", valid)
        else:
            locs = tuple(self.locations)
            for loc in locs:
                if loc not in valid:
                    raise ConfigError(
                        f"peft.locations: {loc!r} is not a valid site for {self.method} "
                        f"(valid: {', '.join(valid) or 'none'})", field="peft.locations")
            object.__setattr__(self, "locations", locs)
        if self.init not in ("identity", "random"):
            raise ConfigError(f"peft.init must be 'identity' or 'random', got {self.init!r}", field="peft.init")
        for name in ("rank", "reduction_factor", "kron_factors"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"peft.{name} must be a positive integer, got {v!r}", field=f"peft.{name}")

    def validate_for(self, cfg: ModelConfig) -> None:
        d = cfg.embed_dim
        if self.method == "LoRA" and self.rank > d:
            raise ConfigError(f"peft.rank {self.rank} exceeds the projection width {d}", field="peft.rank")
        if self.method in ("Adapter", "Compacter"):
            if d % self.reduction_factor:
                raise ConfigError(f"peft.reduction_factor {self.reduction_factor} does not divide embed_dim {d}",
                                  field="peft.reduction_factor")
            if self.method == "Compacter":
                m = d // self.reduction_factor
                n = self.kron_factors
                if d % n or m % n:
                    raise ConfigError(f"peft.kron_factors {n} must divide embed_dim {d} and bottleneck {m}",
                                      field="peft.kron_factors")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["locations"] = list(self.locations)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "PeftSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown peft keys: {', '.join(sorted(unknown))}", field="peft")
        if known.get("locations") is not None:
            known["locations"] = tuple(known["locations"])
        return cls(**known)


# ---------------------------------------------------------------- hooks

_LORA_SITES = {"W_Q": "wq", "W_K": "wk", "W_V": "wv", "W_O": "wo"}
_ADAPT_SITES = {"W_O": "attn", "FFN": "ffn"}
_IA3_SITES = {"W_K": "k", "W_V": "v", "FFN": "ff"}


class LoraHooks(Hooks):
    def __init__(self, sites: Iterable[str], scaling: float):
        self.sites = set(sites)
        self.scaling = scaling

    def project(self, T, block, site, h, w, b):
        out = ad.linear(h, w, b)
        if site not in self.sites:
            return out
        pre = f"peft.{block}.{site}."
        delta = ad.linear(ad.linear(h, T[pre + "A"]), T[pre + "B"])
        return ad.add(out, ad.mul(delta, self.scaling))


def lora_forward(x, w, a, b, alpha: float, bias=None):
    """y = x W (+ bias) + (alpha / r) x A B, on autodiff tensors."""
    rank = a.shape[1]
    out = ad.linear(x, w, bias)
    return ad.add(out, ad.mul(ad.linear(ad.linear(x, a), b), alpha / rank))


def adapter_forward(h, down, down_b, up, up_b):
    """Bottleneck adapter with residual: h + gelu(h D + d) U + u."""
    return ad.add(h, ad.linear(ad.gelu(ad.linear(h, down, down_b)), up, up_b))


class AdapterHooks(Hooks):
    def __init__(self, sites: Iterable[str]):
        self.sites = set(sites)

    def adapt(self, T, block, site, h):
        if site not in self.sites:
            return h
        pre = f"peft.{block}.{site}."
        return adapter_forward(h, T[pre + "down"], T[pre + "down_b"], T[pre + "up"], T[pre + "up_b"])


def compacter_weight(shared, s, t):
    """sum_i kron(shared[i], outer(s[i], t[i])) on autodiff tensors.

    shared: [n, n, n]; s: [n, p]; t: [n, q] -> weight [n*p, n*q].
    """
    n = shared.shape[0]
    total = None
    for i in range(n):
        outer = ad.matmul(ad.reshape(s[i], (s.shape[1], 1)), ad.reshape(t[i], (1, t.shape[1])))
        term = ad.kron(shared[i], outer)
        total = term if total is None else ad.add(total, term)
    return total


class CompacterHooks(Hooks):
    def __init__(self, sites: Iterable[str]):
        self.sites = set(sites)

    def adapt(self, T, block, site, h):
        if site not in self.sites:
            return h
        pre = f"peft.{block}.{site}."
        shared = T["peft.shared"]
        down = compacter_weight(shared, T[pre + "down_s"], T[pre + "down_t"])
        up = compacter_weight(shared, T[pre + "up_s"], T[pre + "up_t"])
        return adapter_forward(h, down, T[pre + "down_b"], up, T[pre + "up_b"])


class IA3Hooks(Hooks):
    def __init__(self, sites: Iterable[str]):
        self.sites = set(sites)

    def scale(self, T, block, site, t):
        if site not in self.sites:
            return t
        return ad.mul_trailing(t, T[f"peft.{block}.{site}.l"])


# ---------------------------------------------------------------- attachment


@dataclass
class PeftAttachment:
    spec: PeftSpec
    cfg: ModelConfig
    hooks: Hooks
    new_names: tuple
    base_trainable: tuple
    decomposition: Decomposition
    counts: dict = field(default_factory=dict)

    @property
    def trainable(self) -> tuple:
        return self.base_trainable + self.new_names

    @property
    def trainable_fraction(self) -> float:
        return self.counts["trainable"] / self.counts["total"]


def _count(params: Mapping[str, np.ndarray], names: Iterable[str]) -> int:
    return int(sum(params[n].size for n in names))


def attach(spec: PeftSpec, cfg: ModelConfig, backbone: Mapping[str, np.ndarray], num_classes: int,
           seed: int) -> tuple[PeftAttachment, dict]:
    """Attach ``spec`` to a pretrained backbone for a ``num_classes`` downstream task.

    Returns the attachment and the full parameter dict (backbone, new head,
    new fine-tuning tensors). Any head in ``backbone`` is discarded.
    """
    cfg = cfg.with_classes(num_classes)
    spec.validate_for(cfg)
    rng = np.random.default_rng(seed)
    params = {n: a for n, a in backbone.items() if not n.startswith("head.") and not n.startswith("peft.")}
    base_names = tuple(params)
    params.update(new_head(cfg, num_classes, int(rng.integers(2**31))))
    new: dict[str, np.ndarray] = {}
    identity = spec.init == "identity"
    d = cfg.embed_dim
    method = spec.method

    def zero_or_random(shape):
        return np.zeros(shape) if identity else trunc_normal(rng, shape)

    if method == "FullFT":
        base_trainable = base_names
        hooks = Hooks()
    elif method == "LinearProbe":
        base_trainable = ()
        hooks = Hooks()
    elif method == "BitFit":
        base_trainable = tuple(n for n in base_names if is_bias(n))
        hooks = Hooks()
    elif method == "LoRA":
        base_trainable = ()
        sites = [_LORA_SITES[loc] for loc in spec.locations]
        for i in range(cfg.depth):
            for site in sites:
                new[f"peft.{i}.{site}.A"] = trunc_normal(rng, (d, spec.rank))
                new[f"peft.{i}.{site}.B"] = zero_or_random((spec.rank, d))
        hooks = LoraHooks(sites, spec.lora_alpha / spec.rank)
    elif method in ("Adapter", "Compacter"):
        # host layer norms train alongside the adapters, as in the original adapter recipe
        base_trainable = tuple(n for n in base_names if ".ln1." in n or ".ln2." in n)
        sites = [_ADAPT_SITES[loc] for loc in spec.locations]
        m = d // spec.reduction_factor
        if method == "Adapter":
            for i in range(cfg.depth):
                for site in sites:
                    pre = f"peft.{i}.{site}."
                    new[pre + "down"] = trunc_normal(rng, (d, m))
                    new[pre + "down_b"] = np.zeros(m)
                    new[pre + "up"] = zero_or_random((m, d))
                    new[pre + "up_b"] = np.zeros(d)
            hooks = AdapterHooks(sites)
        else:
            n = spec.kron_factors
            new["peft.shared"] = trunc_normal(rng, (n, n, n), std=1.0)
            std = math.sqrt(0.02)
            for i in range(cfg.depth):
                for site in sites:
                    pre = f"peft.{i}.{site}."
                    new[pre + "down_s"] = trunc_normal(rng, (n, d // n), std)
                    new[pre + "down_t"] = trunc_normal(rng, (n, m // n), std)
                    new[pre + "down_b"] = np.zeros(m)
                    new[pre + "up_s"] = (np.zeros((n, m // n)) if identity
                                         else trunc_normal(rng, (n, m // n), std))
                    new[pre + "up_t"] = trunc_normal(rng, (n, d // n), std)
                    new[pre + "up_b"] = np.zeros(d)
            hooks = CompacterHooks(sites)
    elif method == "IA3":
        base_trainable = ()
        sites = [_IA3_SITES[loc] for loc in spec.locations]
        width = {"k": d, "v": d, "ff": cfg.ffn_dim}
        for i in range(cfg.depth):
            for site in sites:
                vec = np.ones(width[site])
                if not identity:
                    vec = vec + trunc_normal(rng, width[site])
                new[f"peft.{i}.{site}.l"] = vec
        hooks = IA3Hooks(sites)
    else:  # pragma: no cover - canonical_method guards this
        raise ConfigError(f"unhandled method {method}", field="peft.method")

    params.update(new)
    new_names = ("head.w", "head.b") + tuple(new)
    att = PeftAttachment(spec=spec, cfg=cfg, hooks=hooks, new_names=new_names,
                         base_trainable=tuple(base_trainable), decomposition=decomposition(method))
    att.counts = {
        "base": _count(params, base_names),
        "new": _count(params, new_names),
        "trainable": _count(params, att.trainable),
        "total": _count(params, params),
    }
    return att, params


def merge_lora(att: PeftAttachment, params: Mapping[str, np.ndarray]) -> dict:
    """Fold LoRA updates into the base projection weights: W <- W + (alpha/r) A B."""
    if att.spec.method != "LoRA":
        raise ConfigError("merge_lora only applies to LoRA attachments", field="peft.method")
    scaling = att.spec.lora_alpha / att.spec.rank
    out = {n: a for n, a in params.items() if not n.startswith("peft.")}
    for i in range(att.cfg.depth):
        for site in att.hooks.sites:
            pre = f"peft.{i}.{site}."
            key = f"blocks.{i}.attn.{site}"
            out[key] = params[key] + scaling * (params[pre + "A"] @ params[pre + "B"])
    return out
