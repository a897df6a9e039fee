"""L-infinity projected gradient ascent and adversarial accuracy."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import model as vit
from .errors import AttackError, ConfigError, DataError

LossGrad = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 1 / 255
    alpha: float = 0.25 / 255
    steps: int = 15
    random_start: bool = False
    clamp: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        if not (self.epsilon >= 0):
            raise ConfigError(f"attack.epsilon must be >= 0, got {self.epsilon}", field="attack.epsilon")
        if not (0 <= self.alpha <= self.epsilon):
            raise ConfigError(f"attack.alpha must lie in [0, epsilon], got {self.alpha}", field="attack.alpha")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"attack.steps must be a positive integer, got {self.steps!r}", field="attack.steps")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ConfigError(f"attack.clamp must be an increasing pair, got {self.clamp}", field="attack.clamp")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["clamp"] = list(self.clamp) if self.clamp is not None else None
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttackConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack keys: {', '.join(sorted(unknown))}", field="attack")
        kw = dict(data)
        if kw.get("clamp") is not None:
            kw["clamp"] = tuple(kw["clamp"])
        return cls(**kw)


def pgd(loss_grad: LossGrad, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
        trace: list | None = None) -> np.ndarray:
    """Iterated signed-gradient ascent on the loss, projected onto the eps-ball and clamp box.

    ``loss_grad(x, y)`` returns (total loss, d loss / d x). When ``trace`` is a
    list, each iterate and the loss it was reached from are appended to it.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if cfg.clamp is not None and ((x0 < cfg.clamp[0]).any() or (x0 > cfg.clamp[1]).any()):
        raise DataError(f"inputs fall outside the clamp range {cfg.clamp}")
    if cfg.epsilon == 0:
        return x0.copy()
    lo, hi = x0 - cfg.epsilon, x0 + cfg.epsilon
    if cfg.clamp is not None:
        lo = np.maximum(lo, cfg.clamp[0])
        hi = np.minimum(hi, cfg.clamp[1])
    xa = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start needs an rng", field="attack.random_start")
        xa = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), lo, hi)
    for step in range(1, cfg.steps + 1):
        value, grad = loss_grad(xa, y)
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite input gradient at PGD step {step}")
        xa = np.clip(xa + cfg.alpha * np.sign(grad), lo, hi)
        if trace is not None:
            trace.append((xa.copy(), float(value)))
    return xa


class VitOracle:
    """Loss/gradient and prediction callbacks for a frozen parameter snapshot."""

    def __init__(self, cfg: vit.ModelConfig, params: Mapping[str, np.ndarray], hooks: vit.Hooks = vit.NO_HOOKS):
        self.cfg = cfg
        self.T = vit.leaves(params)
        self.hooks = hooks

    def loss_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        xt = ad.Tensor(x, requires_grad=True)
        logits = vit.forward_tensors(self.cfg, self.T, xt, self.hooks)
        total = ad.cross_entropy(logits, y, reduction="sum")
        ad.backward(total)
        return float(total.data), xt.grad

    def predict(self, x: np.ndarray) -> np.ndarray:
        return vit.forward_tensors(self.cfg, self.T, ad.Tensor(x), self.hooks).data.argmax(axis=1)


def robust_accuracy(oracle, x, y, cfg: AttackConfig, batch_size: int = 128,
                    rng: np.random.Generator | None = None) -> float:
    """Fraction of samples still classified correctly after PGD.

    ``oracle`` needs ``loss_grad(x, y)`` and ``predict(x)``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("robust_accuracy needs a nonempty dataset")
    correct = 0
    for i in range(0, len(y), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        xadv = pgd(oracle.loss_grad, xb, yb, cfg, rng=rng)
        correct += int(np.count_nonzero(oracle.predict(xadv) == yb))
    return correct / len(y)
