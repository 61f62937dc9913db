"""ℓ∞ inner maximization: PGD on arbitrary objectives, the KL transform,
the divergence-aware target attack, and two exact oracles."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, NonFiniteError, Tensor
from .divergence import DivergenceKind, omega
from .models import ModelParams, forward

KL_FLOOR = 1e-12
MAX_GRID_POINTS = 1_000_000


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.1
    steps: int = 20
    step_size: float | None = None
    random_start: bool = False
    clamp: tuple[float, float] | None = None
    norm: str = "inf"

    def __post_init__(self):
        if self.norm != "inf":
            raise ValueError("only the l-infinity threat model is supported")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.step_size is None:
            # unspecified step: alpha/8, the evaluation default
            object.__setattr__(self, "step_size", self.alpha / 8.0)
        if self.steps > 0 and self.alpha > 0 and not self.step_size > 0:
            raise ValueError("step_size must be positive when steps > 0")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not hi > lo:
                raise ValueError("clamp box needs hi > lo")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    def with_alpha(self, alpha: float, step_ratio: float | None = None) -> "AttackConfig":
        step = alpha * step_ratio if step_ratio is not None else alpha / 8.0
        return replace(self, alpha=alpha, step_size=step)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "steps": self.steps,
            "step_size": self.step_size,
            "random_start": self.random_start,
            "clamp": list(self.clamp) if self.clamp is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        clamp = d.get("clamp")
        return cls(
            alpha=float(d.get("alpha", 0.1)),
            steps=int(d.get("steps", 20)),
            step_size=None if d.get("step_size") is None else float(d["step_size"]),
            random_start=bool(d.get("random_start", False)),
            clamp=tuple(clamp) if clamp is not None else None,
        )


def eval_attack(alpha: float, steps: int = 20, clamp=None) -> AttackConfig:
    return AttackConfig(alpha=alpha, steps=steps, step_size=alpha / 8.0, clamp=clamp)


def _bounds(x: np.ndarray, cfg: AttackConfig):
    lo, hi = x - cfg.alpha, x + cfg.alpha
    if cfg.clamp is not None:
        lo = np.maximum(lo, cfg.clamp[0])
        hi = np.minimum(hi, cfg.clamp[1])
    return lo, hi


def pgd(objective: Callable[[Tensor], Tensor], x, cfg: AttackConfig, rng: np.random.Generator | None = None):
    """Sign-gradient ascent on ``objective`` inside the α-ball around ``x``.

    ``objective`` receives the perturbed batch as an input leaf of a fresh
    graph (parameters registered as constants) and returns a scalar.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.alpha == 0 or cfg.steps == 0:
        return x.copy()
    lo, hi = _bounds(x, cfg)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x_adv = np.clip(x + rng.uniform(-cfg.alpha, cfg.alpha, size=x.shape), lo, hi)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        graph = Graph(track_params=False)
        leaf = graph.input(x_adv)
        (grad,) = ad.backward(objective(leaf), [leaf])
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("attack gradient is not finite")
        x_adv = np.clip(x_adv + cfg.step_size * np.sign(grad), lo, hi)
    return x_adv


def cross_entropy_attack(params: ModelParams, x, labels, cfg: AttackConfig, rng=None):
    """Untargeted PGD on the cross-entropy of f∘g."""
    labels = np.asarray(labels)
    return pgd(lambda xt: ad.softmax_cross_entropy(forward(params, "fg", xt), labels), x, cfg, rng)


def softmax_kl(adv_logits: Tensor, clean_probs: np.ndarray) -> Tensor:
    """Batch-mean KL(softmax(adv) || clean) with a floor inside the log."""
    p = ad.softmax(adv_logits)
    log_q = np.log(np.maximum(clean_probs, KL_FLOOR))
    per_row = ad.sum_(p * (ad.log(p, floor=KL_FLOOR) - log_q), axis=1)
    return ad.mean(per_row)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_transform(params: ModelParams, x, cfg: AttackConfig, rng=None):
    """PGD maximizing KL between predictions at x̃ and at x (x held fixed)."""
    x = np.asarray(x, dtype=np.float64)
    clean = softmax_probs(forward(params, "fg", x).data)
    return pgd(lambda xt: softmax_kl(forward(params, "fg", xt), clean), x, cfg, rng)


def dart_target_attack(
    params: ModelParams,
    x_t,
    pseudo_labels,
    divergence: DivergenceKind,
    x_s_features,
    lambda1: float,
    lambda2: float,
    cfg: AttackConfig,
    rng=None,
):
    """Perturb targets to maximize λ1·Ω(source feats, g(x̃_t)) + λ2·CE(f∘g(x̃_t), ŷ_t)."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda1 and lambda2 must be nonnegative")
    pseudo_labels = np.asarray(pseudo_labels)
    x_t = np.asarray(x_t, dtype=np.float64)
    if pseudo_labels.shape != (x_t.shape[0],):
        raise ValueError("one pseudo label per target row is required")
    fs = np.asarray(getattr(x_s_features, "data", x_s_features), dtype=np.float64)

    def objective(xt):
        feats = forward(params, "g", xt)
        total = ad.softmax_cross_entropy(forward(params, "f", feats), pseudo_labels) * lambda2
        div = omega(divergence, xt.graph.constant(fs), feats, params)
        return total + div * lambda1

    return pgd(objective, x_t, cfg, rng)


def linear_worst_margin(w, b, y, x, alpha):
    """Exact min over the ℓ∞ ball of y·(w·x̃ + b): y(w·x + b) − α‖w‖₁.

    ``x`` may be one point or a batch (rows) with ``y`` of matching length.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(y) * (x @ w + b) - alpha * np.abs(w).sum()


def lattice_offsets(alpha: float, points_per_dim: int) -> np.ndarray:
    if points_per_dim < 1:
        raise ValueError("points_per_dim must be at least 1")
    if points_per_dim == 1:
        return np.zeros(1)
    k = np.arange(points_per_dim)
    return alpha * (2.0 * k / (points_per_dim - 1) - 1.0)


def grid_candidates(x, alpha: float, points_per_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if points_per_dim**x.size > MAX_GRID_POINTS:
        raise ValueError(f"grid of {points_per_dim}^{x.size} points exceeds {MAX_GRID_POINTS}")
    offs = lattice_offsets(alpha, points_per_dim)
    grid = np.array(list(itertools.product(offs, repeat=x.size)))
    return x + grid


def grid_bruteforce(objective: Callable[[np.ndarray], np.ndarray], x, alpha: float, points_per_dim: int):
    """Maximize a vectorized objective over the per-coordinate lattice.

    ``objective`` maps an ``(m, d)`` array of candidates to ``m`` values.
    Returns ``(x̃, value)``; the first maximizer wins ties.
    """
    cands = grid_candidates(x, alpha, points_per_dim)
    values = np.asarray(objective(cands), dtype=np.float64).reshape(-1)
    best = int(np.argmax(values))
    return cands[best].reshape(np.shape(x)), float(values[best])
