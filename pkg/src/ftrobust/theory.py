"""Gaussian feature model of fine-tuning robustness, with closed forms and Monte-Carlo checks.

Labels are uniform on {-1, +1}. Feature 0 is the robust feature (equal to the
label with probability ``p``); every other feature is i.i.d. N(eta * y, 1).
The frozen weights put 1/d on d weak features and the fine-tuning update puts
1/d on k further weak features, so a sample carries d + k weak features and
the score is a sum of d + k independent terms. That disjoint layout is the
one under which the accuracy is exactly Phi(sqrt(k + d) * eta).

``layout="overlap"`` instead stacks the update on k of the frozen
coordinates (weight 2/d there, d weak features in total); its accuracy is
Phi((d + k) * eta / sqrt(d + 3k)) and full fine-tuning then changes nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import kernels
from .attack import AttackConfig, pgd
from .errors import ConfigError, ContractError

MC_CHUNK = 65536


@dataclass(frozen=True)
class TheoryParams:
    d: int
    k: int = 0
    eta: float = 0.0
    p: float = 0.95

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ConfigError(f"theory.d must be a positive integer, got {self.d!r}", field="theory.d")
        if not 0 <= self.k <= self.d:
            raise ConfigError(f"theory.k must lie in [0, d={self.d}], got {self.k}", field="theory.k")
        if not self.eta >= 0:
            raise ConfigError(f"theory.eta must be >= 0, got {self.eta}", field="theory.eta")
        if not 0.5 <= self.p <= 1:
            raise ConfigError(f"theory.p must lie in [0.5, 1], got {self.p}", field="theory.p")


class LinearFtClassifier:
    """sign((w0 + delta_w) . x), with ``w0`` on d weak features and ``delta_w`` on k.

    ``support0`` / ``support_delta`` pick the weak-feature coordinates (1-based,
    coordinate 0 is the robust feature); by default w0 takes 1..d and delta_w
    takes the next k (disjoint layout) or the first k (overlap layout).
    """

    def __init__(self, d: int, k: int, layout: str = "disjoint", support0=None, support_delta=None):
        if not 0 <= k <= d:
            raise ConfigError(f"k must lie in [0, {d}], got {k}", field="theory.k")
        if layout not in ("disjoint", "overlap"):
            raise ConfigError(f"layout must be 'disjoint' or 'overlap', got {layout!r}", field="theory.layout")
        self.d, self.k, self.layout = d, k, layout
        self.num_weak = d + k if layout == "disjoint" else d
        s0 = np.arange(1, d + 1) if support0 is None else np.asarray(support0, dtype=np.int64)
        if support_delta is None:
            sd = np.arange(d + 1, d + k + 1) if layout == "disjoint" else np.arange(1, k + 1)
        else:
            sd = np.asarray(support_delta, dtype=np.int64)
        for name, idx, size in (("support0", s0, d), ("support_delta", sd, k)):
            if len(idx) != size or len(np.unique(idx)) != size or (size and (idx.min() < 1 or idx.max() > self.num_weak)):
                raise ConfigError(f"{name} must hold {size} distinct indices in [1, {self.num_weak}]",
                                  field="theory.k")
        if layout == "disjoint" and np.intersect1d(s0, sd).size:
            raise ConfigError("disjoint layout needs non-overlapping supports", field="theory.layout")
        self.w0 = np.zeros(self.num_weak + 1)
        self.w0[s0] = 1.0 / d
        self.delta_w = np.zeros(self.num_weak + 1)
        self.delta_w[sd] = 1.0 / d
        self.w = self.w0 + self.delta_w

    @classmethod
    def for_params(cls, params: TheoryParams, layout: str = "disjoint") -> "LinearFtClassifier":
        return cls(params.d, params.k, layout)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.sign(self.scores(x))

    def loss_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Negative margin -y (w . x), summed; linear (hence convex) in x."""
        loss = -float((y * self.scores(x)).sum())
        return loss, -y[:, None] * self.w[None, :]


def sample(params: TheoryParams, n: int, seed: int, num_weak: int | None = None,
           chunk: int = MC_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Draw n labelled samples; x is [n, 1 + num_weak] (default num_weak = d + k), y is +-1.

    Random draws are consumed chunk by chunk (label uniforms, robust-feature
    uniforms, then the weak-feature normals), the same order the fused
    Monte-Carlo kernel uses, so both see identical samples for a given seed.
    """
    if n < 1:
        raise ContractError(f"sample size must be >= 1, got {n}")
    m = params.d + params.k if num_weak is None else num_weak
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    done = 0
    while done < n:
        c = min(chunk, n - done)
        y = np.where(rng.random(c) < 0.5, 1.0, -1.0)
        x1 = np.where(rng.random(c) < params.p, y, -y)
        z = rng.standard_normal((c, m))
        xs.append(np.column_stack([x1, z + params.eta * y[:, None]]))
        ys.append(y)
        done += c
    return np.concatenate(xs), np.concatenate(ys)


def ft_accuracy_closed(params: TheoryParams) -> float:
    """Pr[N((k+d)/d * eta, (k+d)/d^2) > 0] = Phi(sqrt(k + d) * eta)."""
    return float(ndtr(math.sqrt(params.k + params.d) * params.eta))


def ft_accuracy_overlap_closed(params: TheoryParams) -> float:
    """Accuracy when the update shares coordinates with w0: Phi((d + k) eta / sqrt(d + 3k))."""
    d, k = params.d, params.k
    return float(ndtr((d + k) * params.eta / math.sqrt(d + 3 * k)))


def eta_lower_bound(k: int, d: int, target_accuracy: float = 0.99) -> float:
    """Smallest weak-feature mean shift giving ``target_accuracy``: z(target) / sqrt(k + d)."""
    if not 0.5 <= target_accuracy < 1:
        raise ConfigError(f"target accuracy must lie in [0.5, 1), got {target_accuracy}",
                          field="theory.target_accuracy")
    return float(ndtri(target_accuracy) / math.sqrt(k + d))


def adv_accuracy_closed(params: TheoryParams, epsilon: float) -> float:
    """Worst-case L-inf accuracy: every weak feature shifted by -epsilon * y."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}", field="attack.epsilon")
    return float(ndtr(math.sqrt(params.k + params.d) * (params.eta - epsilon)))


@dataclass(frozen=True)
class McEstimate:
    accuracy: float
    stderr: float
    n: int

    def within(self, expected: float, sigmas: float = 3.0) -> bool:
        """Is ``expected`` within ``sigmas`` binomial standard errors (taken at ``expected``)?"""
        sd = math.sqrt(max(expected * (1 - expected), 1e-300) / self.n)
        return abs(self.accuracy - expected) <= sigmas * sd


def _estimate(correct: int, n: int) -> McEstimate:
    acc = correct / n
    return McEstimate(acc, math.sqrt(acc * (1 - acc) / n), n)


def monte_carlo_accuracy(classifier: LinearFtClassifier, params: TheoryParams, n: int, epsilon: float = 0.0,
                         seed: int = 0, steps: int = 1, fused: bool = True) -> McEstimate:
    """Empirical clean (epsilon = 0) or PGD-robust accuracy of ``classifier``.

    Clean accuracy uses the fused sample-and-score kernel unless ``fused`` is
    False; robust accuracy materialises samples chunk by chunk and attacks
    them with ``pgd`` (step size alpha = epsilon, no clamp).
    """
    if n < 1000:
        raise ContractError(f"Monte-Carlo needs n >= 1000, got {n}")
    if classifier.d != params.d or classifier.k != params.k:
        raise ConfigError("classifier and params disagree on (d, k)", field="theory.d")
    m = classifier.num_weak
    if epsilon == 0 and fused:
        rng = np.random.default_rng(seed)
        return _estimate(kernels.gaussian_linear_mc(rng, classifier.w, params.eta, params.p, n, MC_CHUNK), n)
    cfg = AttackConfig(epsilon=epsilon, alpha=epsilon, steps=steps, clamp=None) if epsilon > 0 else None
    rng = np.random.default_rng(seed)
    correct = 0
    done = 0
    block = max(1, min(MC_CHUNK, 2_000_000 // (m + 1)))
    while done < n:
        # regenerate the same stream chunk-wise without holding all n samples
        c = min(MC_CHUNK, n - done)
        y = np.where(rng.random(c) < 0.5, 1.0, -1.0)
        x1 = np.where(rng.random(c) < params.p, y, -y)
        z = rng.standard_normal((c, m))
        for s in range(0, c, block):
            xb = np.column_stack([x1[s:s + block], z[s:s + block] + params.eta * y[s:s + block, None]])
            yb = y[s:s + block]
            if cfg is not None:
                xb = pgd(classifier.loss_grad, xb, yb, cfg)
            correct += int(np.count_nonzero(classifier.scores(xb) * yb > 0))
        done += c
    return _estimate(correct, n)


def theory_grid(ds, ks, etas, epsilons, n: int = 100_000, seed: int = 0, p: float = 0.95) -> list[dict]:
    """Rows of (d, k, eta, epsilon, closed/MC clean and adversarial accuracy) for plotting.

    ``etas`` entries may be the string "auto" for the 99 % lower bound.
    """
    rows = []
    for d in ds:
        for k in ks:
            if k > d:
                continue
            for eta in etas:
                e = eta_lower_bound(k, d) if eta == "auto" else float(eta)
                params = TheoryParams(d=d, k=k, eta=e, p=p)
                clf = LinearFtClassifier.for_params(params)
                clean = monte_carlo_accuracy(clf, params, n, 0.0, seed)
                for eps in epsilons:
                    adv = monte_carlo_accuracy(clf, params, n, eps, seed) if eps > 0 else clean
                    rows.append({"d": d, "k": k, "eta": e, "epsilon": eps,
                                 "closed_acc": ft_accuracy_closed(params),
                                 "closed_adv_acc": adv_accuracy_closed(params, eps),
                                 "mc_acc": clean.accuracy, "mc_adv_acc": adv.accuracy})
    return rows
