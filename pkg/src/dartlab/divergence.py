"""Empirical domain-divergence proxies on feature batches.

Every function takes source and target feature matrices (``Tensor`` or
array) and returns a scalar ``Tensor`` so gradients flow back to the
features, and through them to g or to the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelParams, forward

KINDS = ("dann", "mmd", "coral", "cmd")


@dataclass(frozen=True)
class DivergenceKind:
    tag: str = "dann"
    sigma: float = 1.0
    moments: int = 5
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ValueError(f"unknown divergence {self.tag!r}; expected one of {KINDS}")
        if self.tag == "mmd" and not self.sigma > 0:
            raise ValueError("mmd bandwidth must be positive")
        if self.tag == "cmd":
            if self.moments < 1:
                raise ValueError("cmd needs at least one moment")
            if self.box is not None and not self.box[1] > self.box[0]:
                raise ValueError("cmd box needs b > a")

    def to_dict(self) -> dict:
        out = {"tag": self.tag}
        if self.tag == "mmd":
            out["sigma"] = self.sigma
        if self.tag == "cmd":
            out["moments"] = self.moments
            out["box"] = list(self.box) if self.box is not None else None
        return out

    @classmethod
    def from_dict(cls, d) -> "DivergenceKind":
        if isinstance(d, str):
            return cls(tag=d)
        box = d.get("box")
        return cls(
            tag=d.get("tag", "dann"),
            sigma=float(d.get("sigma", 1.0)),
            moments=int(d.get("moments", 5)),
            box=tuple(box) if box is not None else None,
        )


def _same_graph(a, b):
    """Put two operands on one graph (arrays join the tensor's graph)."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, a.graph.constant(b)
    if isinstance(b, Tensor):
        return b.graph.constant(a), b
    g = ad.Graph()
    return g.constant(a), g.constant(b)


def _check_widths(fs, ft):
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError(f"feature widths differ: {fs.shape} vs {ft.shape}")
    if fs.shape[0] < 1 or ft.shape[0] < 1:
        raise ValueError("each feature set needs at least one row")


def domain_classifier_loss(features_s, features_t, params: ModelParams) -> Tensor:
    """BCE of d on source-as-1 and target-as-0, each averaged over its set."""
    fs, ft = _same_graph(features_s, features_t)
    _check_widths(fs, ft)
    ls = ad.bce_with_logits(forward(params, "d", fs), 1.0)
    lt = ad.bce_with_logits(forward(params, "d", ft), 0.0)
    return ls + lt


def dann_omega(features_s, features_t, params: ModelParams) -> Tensor:
    """Negated domain-classifier loss; at most 0, maximized by a perfect d."""
    return -domain_classifier_loss(features_s, features_t, params)


def _pairwise_kernel_mean(a: Tensor, b: Tensor, sigma: float, kernel: str) -> Tensor:
    if kernel == "linear":
        return ad.mean(a @ b.T)
    n, k = a.shape
    m = b.shape[0]
    diff = ad.reshape(a, (n, 1, k)) - ad.reshape(b, (1, m, k))
    sq = ad.sum_(ad.square(diff), axis=2)
    return ad.mean(ad.exp(sq * (-0.5 / sigma**2)))


def mmd(features_s, features_t, sigma: float = 1.0, kernel: str = "rbf") -> Tensor:
    """Biased (V-statistic) squared MMD, diagonal terms included."""
    fs, ft = _same_graph(features_s, features_t)
    _check_widths(fs, ft)
    if kernel not in ("rbf", "linear"):
        raise ValueError(f"unknown kernel {kernel!r}")
    if kernel == "rbf" and not sigma > 0:
        raise ValueError("bandwidth must be positive")
    kss = _pairwise_kernel_mean(fs, fs, sigma, kernel)
    ktt = _pairwise_kernel_mean(ft, ft, sigma, kernel)
    kst = _pairwise_kernel_mean(fs, ft, sigma, kernel)
    return kss + ktt - kst * 2.0


def _covariance(x: Tensor) -> Tensor:
    centered = x - ad.mean(x, axis=0)
    return (centered.T @ centered) * (1.0 / x.shape[0])


def coral(features_s, features_t) -> Tensor:
    """Squared Frobenius distance between 1/n covariances."""
    fs, ft = _same_graph(features_s, features_t)
    _check_widths(fs, ft)
    return ad.sum_(ad.square(_covariance(fs) - _covariance(ft)))


def _l2(x: Tensor) -> Tensor:
    return ad.sqrt(ad.sum_(ad.square(x)))


def observed_box(features_s, features_t) -> tuple[float, float]:
    """Range of the two batches together, used when no CMD box is fixed."""
    a = np.concatenate([np.asarray(getattr(features_s, "data", features_s)).ravel(),
                        np.asarray(getattr(features_t, "data", features_t)).ravel()])
    lo, hi = float(a.min()), float(a.max())
    # a subnormal span would overflow 1/span
    return (lo, hi) if hi - lo >= np.finfo(np.float64).tiny else (lo, lo + 1.0)


def cmd(features_s, features_t, moments: int = 5, box: tuple[float, float] | None = None) -> Tensor:
    """Central moment discrepancy with per-coordinate central moments."""
    if moments < 1:
        raise ValueError("cmd needs at least one moment")
    fs, ft = _same_graph(features_s, features_t)
    _check_widths(fs, ft)
    a, b = box if box is not None else observed_box(fs, ft)
    if not b > a:
        raise ValueError(f"cmd box needs b > a, got [{a}, {b}]")
    # rescale once instead of dividing by span**k, which underflows for small boxes
    inv = 1.0 / abs(b - a)
    fs, ft = fs * inv, ft * inv
    ms, mt = ad.mean(fs, axis=0), ad.mean(ft, axis=0)
    total = _l2(ms - mt)
    cs, ct = fs - ms, ft - mt
    for k in range(2, moments + 1):
        mom_s = ad.mean(ad.power(cs, k), axis=0)
        mom_t = ad.mean(ad.power(ct, k), axis=0)
        total = total + _l2(mom_s - mom_t)
    return total


def omega(kind: DivergenceKind, features_s, features_t, params: ModelParams | None = None) -> Tensor:
    """Dispatch on ``kind``; ``params`` supplies d for the DANN proxy."""
    if kind.tag == "dann":
        if params is None or "d" not in params:
            raise ValueError("the dann proxy needs discriminator parameters")
        return dann_omega(features_s, features_t, params)
    if kind.tag == "mmd":
        return mmd(features_s, features_t, kind.sigma)
    if kind.tag == "coral":
        return coral(features_s, features_t)
    return cmd(features_s, features_t, kind.moments, kind.box)
