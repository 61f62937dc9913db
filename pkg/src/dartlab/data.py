"""Synthetic shifted-domain pairs, deterministic splits and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .models import atomic_write_text


class DataFormatError(ValueError):
    pass


@dataclass
class UnlabeledSet:
    features: np.ndarray
    domain: str = "target"
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D array, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class LabeledSet(UnlabeledSet):
    labels: np.ndarray = field(default=None)
    n_classes: int | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.labels is None:
            raise ValueError("a labeled set needs labels")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("one label per row is required")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative class indices")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1
        elif np.any(self.labels >= self.n_classes):
            raise ValueError("label out of range")

    def unlabeled(self) -> UnlabeledSet:
        return UnlabeledSet(self.features.copy(), self.domain, self.split)

    def subset(self, idx, split=None) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.domain, split or self.split, self.labels[idx], self.n_classes)


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return x @ rot.T


def gen_two_moons_shift(n: int, rotation_degrees: float = 30.0, noise_std: float = 0.1, seed: int = 0):
    """Two-moons source and a freshly sampled target rotated about the origin."""
    if n < 4:
        raise ValueError("need at least 4 points per domain")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    s_seed, t_seed = _child_seeds(seed, 2)
    xs, ys = make_moons(n, noise=noise_std, random_state=s_seed)
    xt, yt = make_moons(n, noise=noise_std, random_state=t_seed)
    xt = _rotate(xt, rotation_degrees)
    return (
        LabeledSet(xs, "source", "train", ys, 2),
        LabeledSet(xt, "target", "train", yt, 2),
    )


def gen_shifted_blobs(n: int, shift=(1.0, 0.5), n_classes: int = 2, std: float = 0.5, seed: int = 0):
    """Gaussian class blobs; the target translates every class mean by ``shift``."""
    if n < 4:
        raise ValueError("need at least 4 points per domain")
    s_seed, t_seed, c_seed = _child_seeds(seed, 3)
    centers = np.random.default_rng(c_seed).uniform(-3.0, 3.0, size=(n_classes, 2))
    xs, ys = make_blobs(n, centers=centers, cluster_std=std, random_state=s_seed)
    xt, yt = make_blobs(n, centers=centers + np.asarray(shift, dtype=float), cluster_std=std, random_state=t_seed)
    return (
        LabeledSet(xs, "source", "train", ys, n_classes),
        LabeledSet(xt, "target", "train", yt, n_classes),
    )


def split_target(target: LabeledSet, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle and split into (unlabeled train, labeled val, labeled test).

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    n = len(target)
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"n={n} leaves an empty split part")
    perm = np.random.default_rng(seed).permutation(n)
    tr, va, te = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    return (
        target.subset(tr, "train").unlabeled(),
        target.subset(va, "val"),
        target.subset(te, "test"),
    )


def split_source(source: LabeledSet, keep: float = 0.8, seed: int = 0) -> LabeledSet:
    """Training share of the source domain; the rest is unused."""
    n_keep = max(1, int(np.floor(len(source) * keep + 1e-9)))
    perm = np.random.default_rng(seed).permutation(len(source))
    return source.subset(np.sort(perm[:n_keep]), "train")


def load_csv(path, has_labels: bool = True, domain: str = "source", n_classes: int | None = None):
    """Comma-separated decimals, integer label last when ``has_labels``."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} fields, found {len(rec)}")
            try:
                vals = [float(c) for c in (rec[:-1] if has_labels else rec)]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if has_labels:
                raw = rec[-1].strip()
                try:
                    lab = int(raw)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: label {raw!r} is not an integer") from None
                labels.append(lab)
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    if has_labels and width < 2:
        raise DataFormatError(f"{path}: a labeled row needs at least one feature")
    x = np.array(rows, dtype=np.float64)
    if has_labels:
        return LabeledSet(x, domain, "train", np.array(labels), n_classes)
    return UnlabeledSet(x, domain, "train")


def save_csv(dataset: UnlabeledSet, path):
    lines = []
    labels = getattr(dataset, "labels", None)
    for i, row in enumerate(dataset.features):
        fields = [format(v, ".17g") for v in row.tolist()]
        if labels is not None:
            fields.append(str(int(labels[i])))
        lines.append(",".join(fields))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
