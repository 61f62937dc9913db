"""Exact enumeration of the quantities in the adversarial target-loss bound.

Everything here is computed from integer counts and returned as
:class:`fractions.Fraction`, so comparisons need no tolerance.  Points are
tuples of numbers (1-D points may be given as plain scalars); labels are
0/1 (±1 is accepted and mapped -1 -> 0).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAX_ASSIGNMENTS = 1_000_000
_CHUNK = 2048

Point = tuple


class TheoryError(ValueError):
    pass


def as_point(p) -> Point:
    if isinstance(p, (list, tuple)):
        return tuple(Fraction(v) for v in p)
    return (Fraction(p),)


def as_label(y) -> int:
    y = int(y)
    if y == -1:
        return 0
    if y not in (0, 1):
        raise TheoryError(f"labels must be 0/1 or ±1, got {y}")
    return y


@dataclass(frozen=True)
class Stump:
    """h(x) = 1 iff x[axis] < threshold (``below``) or x[axis] > threshold."""

    axis: int
    threshold: Fraction
    below: bool

    def __call__(self, x) -> int:
        v = as_point(x)[self.axis]
        return int(v < self.threshold) if self.below else int(v > self.threshold)

    def describe(self) -> str:
        return f"x[{self.axis}] {'<' if self.below else '>'} {self.threshold}"


@dataclass(frozen=True)
class Xor:
    h1: Callable
    h2: Callable

    def __call__(self, x) -> int:
        return self.h1(x) ^ self.h2(x)


def _cut_points(values) -> list[Fraction]:
    vs = sorted(set(values))
    if not vs:
        raise TheoryError("cannot build thresholds from no points")
    cuts = [vs[0] - 1]
    cuts += [(a + b) / 2 for a, b in zip(vs, vs[1:])]
    cuts.append(vs[-1] + 1)
    return cuts


class FiniteHypothesisClass:
    """An explicit, nonempty list of 0/1 hypotheses."""

    def __init__(self, hypotheses: Sequence[Callable]):
        self.hypotheses = list(hypotheses)
        if not self.hypotheses:
            raise TheoryError("a hypothesis class must be nonempty")

    def __len__(self):
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    @classmethod
    def stumps(cls, points, axes: Sequence[int] | None = None, thresholds=None) -> "FiniteHypothesisClass":
        """Both orientations at every cut: below the minimum, between
        consecutive distinct values and above the maximum.  With one axis
        these are the 1-D thresholds.  Closed under complement."""
        pts = [as_point(p) for p in points]
        dim = len(pts[0])
        axes = range(dim) if axes is None else axes
        hyps = []
        for a in axes:
            cuts = [Fraction(t) for t in thresholds] if thresholds is not None else _cut_points(p[a] for p in pts)
            for t in cuts:
                hyps.append(Stump(a, t, True))
                hyps.append(Stump(a, t, False))
        return cls(hyps)

    thresholds = stumps

    def table(self, points) -> np.ndarray:
        """``int64[len(self), len(points)]`` of hypothesis outputs."""
        pts = [as_point(p) for p in points]
        return np.array([[h(p) for p in pts] for h in self.hypotheses], dtype=np.int64).reshape(len(self), len(pts))

    def delta_class(self) -> list[Xor]:
        return [Xor(a, b) for a in self.hypotheses for b in self.hypotheses]


@dataclass
class DiscretePerturbationSet:
    """B(x_i) for each target point: a finite list containing x_i itself."""

    candidates: list[list[Point]]

    def __post_init__(self):
        self.candidates = [[as_point(c) for c in cs] for cs in self.candidates]
        if any(not cs for cs in self.candidates):
            raise TheoryError("every perturbation list must be nonempty")

    def check_against(self, x_t):
        pts = [as_point(p) for p in x_t]
        if len(pts) != len(self.candidates):
            raise TheoryError(f"{len(self.candidates)} perturbation lists for {len(pts)} target points")
        for i, (p, cs) in enumerate(zip(pts, self.candidates)):
            if p not in cs:
                raise TheoryError(f"B(x_{i}) does not contain the unperturbed point {p}")

    @classmethod
    def singletons(cls, x_t) -> "DiscretePerturbationSet":
        return cls([[as_point(p)] for p in x_t])

    def n_assignments(self) -> int:
        return int(np.prod([len(cs) for cs in self.candidates], dtype=object))


def _split(z):
    xs = [as_point(p) for p, _ in z]
    ys = np.array([as_label(y) for _, y in z], dtype=np.int64)
    return xs, ys


def _xor_rows(tab: np.ndarray) -> np.ndarray:
    """Distinct rows of the symmetric-difference class evaluated on ``tab``'s points."""
    rows = (tab[:, None, :] ^ tab[None, :, :]).reshape(-1, tab.shape[1])
    return np.unique(rows, axis=0)


def empirical_hdh(x_s, x_t, cls: FiniteHypothesisClass) -> Fraction:
    """2(1 − min over H∆H of [#{h=0 on source}/n + #{h=1 on target}/n])."""
    n = len(x_s)
    if n != len(x_t) or n == 0:
        raise TheoryError(f"need equal nonempty samples, got {len(x_s)} and {len(x_t)}")
    rows = _xor_rows(cls.table(list(x_s) + list(x_t)))
    bracket = (n - rows[:, :n].sum(axis=1)) + rows[:, n:].sum(axis=1)
    return Fraction(2 * (n - int(bracket.min())), n)


def empirical_hdh_bruteforce(x_s, x_t, cls: FiniteHypothesisClass) -> Fraction:
    """Independent path: explicit loop over every pair (h1, h2)."""
    n = len(x_s)
    if n != len(x_t) or n == 0:
        raise TheoryError(f"need equal nonempty samples, got {len(x_s)} and {len(x_t)}")
    best = None
    for h1 in cls:
        for h2 in cls:
            zeros_s = sum(1 for x in x_s if h1(x) ^ h2(x) == 0)
            ones_t = sum(1 for x in x_t if h1(x) ^ h2(x) == 1)
            val = Fraction(zeros_s, n) + Fraction(ones_t, n)
            if best is None or val < best:
                best = val
    return 2 * (1 - best)


def zero_one_loss(h, z) -> Fraction:
    xs, ys = _split(z)
    return Fraction(sum(int(h(x) != y) for x, y in zip(xs, ys)), len(xs))


def ideal_joint_loss(z_s, z_t, cls: FiniteHypothesisClass) -> Fraction:
    """min over h of L(h; Z_S) + L(h; Z_T) with 0/1 loss."""
    xs, ys = _split(z_s)
    xt, yt = _split(z_t)
    err_s = (cls.table(xs) != ys).sum(axis=1)
    err_t = (cls.table(xt) != yt).sum(axis=1)
    return min(Fraction(int(a), len(xs)) + Fraction(int(b), len(xt)) for a, b in zip(err_s, err_t))


def adversarial_loss_exact(h, z_t, perturb: DiscretePerturbationSet) -> Fraction:
    """(1/n) Σ_i max over B(x_i) of the 0/1 loss."""
    xt, yt = _split(z_t)
    perturb.check_against(xt)
    worst = sum(max(int(h(c) != y) for c in cands) for cands, y in zip(perturb.candidates, yt))
    return Fraction(worst, len(xt))


@dataclass
class _Universe:
    """Target candidate points flattened to columns, with per-point column lists."""

    points: list[Point]
    columns: list[list[int]]

    @classmethod
    def build(cls, perturb: DiscretePerturbationSet):
        points, index, columns = [], {}, []
        for cands in perturb.candidates:
            cols = []
            for c in cands:
                if c not in index:
                    index[c] = len(points)
                    points.append(c)
                cols.append(index[c])
            columns.append(cols)
        return cls(points, columns)


def _assignment_chunks(columns: list[list[int]]):
    it = itertools.product(*columns)
    while True:
        block = list(itertools.islice(it, _CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.int64)


@dataclass
class SupResult:
    value: Fraction
    assignment: list[Point]
    divergence: Fraction
    joint_loss: Fraction
    max_divergence: Fraction


def worst_case_sup(z_s, z_t, perturb: DiscretePerturbationSet, cls: FiniteHypothesisClass) -> SupResult:
    """Maximum of d_H∆H(X_S, X̃_T) + 2γ(Z_S, Z̃_T) over every assignment.

    Also reports the largest d_H∆H alone over assignments.  The first
    maximizing assignment in product order is returned.
    """
    xs, ys = _split(z_s)
    xt, yt = _split(z_t)
    n = len(xs)
    if len(xt) != n:
        raise TheoryError("source and target samples must have equal size")
    perturb.check_against(xt)
    if perturb.n_assignments() > MAX_ASSIGNMENTS:
        raise TheoryError(f"{perturb.n_assignments()} assignments exceed the limit of {MAX_ASSIGNMENTS}")
    uni = _Universe.build(perturb)
    base_s = cls.table(xs)
    base_u = cls.table(uni.points)
    err_s = (base_s != ys).sum(axis=1)
    rows = _xor_rows(np.concatenate([base_s, base_u], axis=1))
    rows_s, rows_u = rows[:, :n], rows[:, n:]
    zeros_s = n - rows_s.sum(axis=1)

    best_num, best_assign, best_d, best_g, max_d = None, None, None, None, None
    for block in _assignment_chunks(uni.columns):
        ones_t = rows_u[:, block].sum(axis=2)  # [pairs, assignments]
        bracket_min = (zeros_s[:, None] + ones_t).min(axis=0)
        err_t = (base_u[:, block] != yt).sum(axis=2)  # [hyps, assignments]
        g_num = (err_s[:, None] + err_t).min(axis=0)
        d_num = 2 * (n - bracket_min)
        total = d_num + 2 * g_num
        k = int(np.argmax(total))
        if best_num is None or total[k] > best_num:
            best_num, best_assign = int(total[k]), block[k]
            best_d, best_g = int(d_num[k]), int(g_num[k])
        md = int(d_num.max())
        max_d = md if max_d is None else max(max_d, md)
    return SupResult(
        value=Fraction(best_num, n),
        assignment=[uni.points[c] for c in best_assign],
        divergence=Fraction(best_d, n),
        joint_loss=Fraction(best_g, n),
        max_divergence=Fraction(max_d, n),
    )


def adversarial_divergence(x_s, x_t, perturb: DiscretePerturbationSet, cls: FiniteHypothesisClass) -> Fraction:
    """2 max over H∆H of |(1/n)Σ_i max over B(x_i) 1[h=1] − (1/n)Σ 1[h(x_s)=1]|."""
    n = len(x_s)
    perturb.check_against(x_t)
    uni = _Universe.build(perturb)
    rows = _xor_rows(np.concatenate([cls.table(x_s), cls.table(uni.points)], axis=1))
    ones_s = rows[:, :n].sum(axis=1)
    rows_u = rows[:, n:]
    ones_t = sum(rows_u[:, cols].max(axis=1) for cols in uni.columns)
    return Fraction(2 * int(np.abs(ones_t - ones_s).max()), n)


# --------------------------------------------------------------------------
# instances and the bound checker


@dataclass
class Instance:
    z_s: list
    z_t: list
    perturb: DiscretePerturbationSet
    cls: FiniteHypothesisClass


def _frac_json(q: Fraction) -> dict:
    return {"exact": f"{q.numerator}/{q.denominator}", "value": float(q)}


def _point_json(p: Point):
    return [float(v) if v.denominator != 1 else int(v) for v in p]


def check_bound(instance: Instance) -> dict:
    """Check L_adv(h; Z_T) ≤ L(h; Z_S) + sup[d_H∆H + 2γ] for every h in the class,
    and d_adv ≤ sup d_H∆H.  Violations are listed, never dropped."""
    inst = instance
    sup = worst_case_sup(inst.z_s, inst.z_t, inst.perturb, inst.cls)
    xs, _ = _split(inst.z_s)
    xt, _ = _split(inst.z_t)
    d_adv = adversarial_divergence(xs, xt, inst.perturb, inst.cls)
    gamma_sup = max_joint_loss(inst.z_s, inst.z_t, inst.perturb, inst.cls)
    per_h, violations, diag = [], [], []
    for k, h in enumerate(inst.cls):
        lhs = adversarial_loss_exact(h, inst.z_t, inst.perturb)
        src = zero_one_loss(h, inst.z_s)
        rhs = src + sup.value
        ok = lhs <= rhs
        three = src + gamma_sup + d_adv / 2
        entry = {
            "index": k,
            "hypothesis": h.describe() if hasattr(h, "describe") else repr(h),
            "lhs": _frac_json(lhs),
            "rhs": _frac_json(rhs),
            "holds": ok,
            "three_term_rhs": _frac_json(three),
        }
        per_h.append(entry)
        if not ok:
            violations.append({"kind": "bound", "index": k, "hypothesis": entry["hypothesis"],
                               "lhs": entry["lhs"], "rhs": entry["rhs"]})
        if lhs > three:
            diag.append(k)
    div_ok = d_adv <= sup.max_divergence
    if not div_ok:
        violations.append({"kind": "adversarial_divergence", "lhs": _frac_json(d_adv),
                           "rhs": _frac_json(sup.max_divergence)})
    return {
        "n": len(xs),
        "class_size": len(inst.cls),
        "sup_value": _frac_json(sup.value),
        "sup_assignment": [_point_json(p) for p in sup.assignment],
        "sup_divergence": _frac_json(sup.divergence),
        "sup_joint_loss": _frac_json(sup.joint_loss),
        "adversarial_divergence": _frac_json(d_adv),
        "max_divergence": _frac_json(sup.max_divergence),
        "divergence_comparison_holds": div_ok,
        "hypotheses": per_h,
        "violations": violations,
        "three_term_exceeded": diag,
    }


def max_joint_loss(z_s, z_t, perturb: DiscretePerturbationSet, cls: FiniteHypothesisClass) -> Fraction:
    """sup over assignments of γ(Z_S, Z̃_T) alone (diagnostic)."""
    xs, ys = _split(z_s)
    xt, yt = _split(z_t)
    n = len(xs)
    if len(xt) != n:
        raise TheoryError("source and target samples must have equal size")
    uni = _Universe.build(perturb)
    err_s = (cls.table(xs) != ys).sum(axis=1)
    base_u = cls.table(uni.points)
    best = 0
    for block in _assignment_chunks(uni.columns):
        err_t = (base_u[:, block] != yt).sum(axis=2)
        best = max(best, int((err_s[:, None] + err_t).min(axis=0).max()))
    return Fraction(best, n)


def instance_from_dict(doc: dict) -> Instance:
    """JSON layout::

        {"source": {"points": [...], "labels": [...]},
         "target": {"points": [...], "labels": [...]},
         "perturbations": [[p, ...], ...],          # optional: singletons
         "class": {"kind": "thresholds" | "stumps", "thresholds": [...]}}
    """
    try:
        src, tgt = doc["source"], doc["target"]
        z_s = list(zip(src["points"], src["labels"]))
        z_t = list(zip(tgt["points"], tgt["labels"]))
        if len(z_s) != len(src["points"]) or len(src["points"]) != len(src["labels"]):
            raise TheoryError("source points and labels differ in length")
        if len(tgt["points"]) != len(tgt["labels"]):
            raise TheoryError("target points and labels differ in length")
        pert = doc.get("perturbations")
        perturb = (DiscretePerturbationSet(pert) if pert is not None
                   else DiscretePerturbationSet.singletons(tgt["points"]))
        spec = doc.get("class", {"kind": "thresholds"})
        kind = spec.get("kind", "thresholds")
        if kind not in ("thresholds", "stumps"):
            raise TheoryError(f"unknown hypothesis class kind {kind!r}")
        universe = list(src["points"]) + [c for cs in perturb.candidates for c in cs]
        cls = FiniteHypothesisClass.stumps(universe, spec.get("axes"), spec.get("thresholds"))
    except (KeyError, TypeError) as exc:
        raise TheoryError(f"malformed instance: {exc}") from None
    perturb.check_against([p for p, _ in z_t])
    return Instance(z_s, z_t, perturb, cls)


def check_instance_file(path, out_path=None) -> dict:
    report = check_bound(instance_from_dict(json.loads(Path(path).read_text())))
    if out_path is not None:
        from .models import atomic_write_text

        atomic_write_text(out_path, json.dumps(report, indent=2) + "\n")
    return report


def random_instance(rng: np.random.Generator, n_max: int = 6, b_max: int = 3, dim: int = 1,
                    grid: int = 8) -> Instance:
    """Small integer-grid instance; thresholds (dim 1) or stumps (dim 2) built on all points."""
    n = int(rng.integers(1, n_max + 1))

    def pt():
        return tuple(int(v) for v in rng.integers(0, grid, size=dim))

    z_s = [(pt(), int(rng.integers(0, 2))) for _ in range(n)]
    z_t = [(pt(), int(rng.integers(0, 2))) for _ in range(n)]
    cands = []
    for p, _ in z_t:
        extra = [pt() for _ in range(int(rng.integers(0, b_max)))]
        cs = [p] + [e for e in extra if e != p]
        cands.append(list(dict.fromkeys(cs)))
    perturb = DiscretePerturbationSet(cands)
    universe = [p for p, _ in z_s] + [c for cs in perturb.candidates for c in cs]
    return Instance(z_s, z_t, perturb, FiniteHypothesisClass.stumps(universe))
