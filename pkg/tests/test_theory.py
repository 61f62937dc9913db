import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dartlab.theory import (
    DiscretePerturbationSet,
    FiniteHypothesisClass,
    Instance,
    Stump,
    TheoryError,
    adversarial_divergence,
    adversarial_loss_exact,
    check_bound,
    check_instance_file,
    empirical_hdh,
    empirical_hdh_bruteforce,
    ideal_joint_loss,
    instance_from_dict,
    random_instance,
    worst_case_sup,
    zero_one_loss,
)

GRID = list(range(6))
CLASS_1D = FiniteHypothesisClass.thresholds([[v] for v in GRID])


def test_hdh_hand_examples():
    cls = FiniteHypothesisClass.thresholds([[0], [1], [2], [3]])
    assert empirical_hdh([0, 1], [2, 3], cls) == 2
    assert empirical_hdh([0, 1], [1, 2], cls) == 1
    assert empirical_hdh([0, 1], [0, 1], cls) == 0
    with pytest.raises(TheoryError):
        empirical_hdh([0], [1, 2], cls)


def test_joint_loss_examples():
    assert ideal_joint_loss([(0, 1)], [(0, -1)], CLASS_1D) == 1
    z = [(0, 0), (1, 0), (4, 1)]
    assert ideal_joint_loss(z, [(2, 0), (5, 1)], CLASS_1D) == 0
    z = [(0, 1), (1, 0), (2, 1), (3, 0)]
    single = min(zero_one_loss(h, z) for h in CLASS_1D)
    assert ideal_joint_loss(z, z, CLASS_1D) == 2 * single


def test_adversarial_loss_examples():
    h = Stump(0, Fraction(3, 2), True)
    z_t = [(1, 1), (2, 0)]
    assert adversarial_loss_exact(h, z_t, DiscretePerturbationSet.singletons([1, 2])) == zero_one_loss(h, z_t)
    straddle = DiscretePerturbationSet([[1, 2], [2, 1]])
    assert adversarial_loss_exact(h, z_t, straddle) == 1
    assert adversarial_loss_exact(h, [(1, 0), (2, 1)], straddle) == 1
    const = Stump(0, Fraction(-1), True)
    assert adversarial_loss_exact(const, [(1, 0), (2, 0)], DiscretePerturbationSet([[1, 5, 0], [2, 3]])) == 0


def test_sup_with_singletons_is_the_plain_value():
    z_s = [(0, 0), (3, 1)]
    z_t = [(1, 1), (4, 0)]
    res = worst_case_sup(z_s, z_t, DiscretePerturbationSet.singletons([1, 4]), CLASS_1D)
    assert res.value == empirical_hdh([0, 3], [1, 4], CLASS_1D) + 2 * ideal_joint_loss(z_s, z_t, CLASS_1D)
    assert res.assignment == [(Fraction(1),), (Fraction(4),)]


def test_enumeration_cap():
    big = DiscretePerturbationSet([list(range(11))] * 6)
    assert big.n_assignments() > 1_000_000
    with pytest.raises(TheoryError):
        worst_case_sup([(0, 0)] * 6, [(0, 0)] * 6, big, CLASS_1D)


def test_perturbation_sets_must_contain_the_point():
    with pytest.raises(TheoryError):
        DiscretePerturbationSet([[]])
    with pytest.raises(TheoryError):
        worst_case_sup([(0, 0)], [(1, 0)], DiscretePerturbationSet([[2]]), CLASS_1D)


points = st.lists(st.integers(0, 5), min_size=1, max_size=4)


@st.composite
def small_instance(draw):
    n = draw(st.integers(1, 4))
    xs = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    xt = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    yt = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    extra = draw(st.lists(st.lists(st.integers(0, 5), max_size=2), min_size=n, max_size=n))
    cands = [list(dict.fromkeys([p] + e)) for p, e in zip(xt, extra)]
    return list(zip(xs, ys)), list(zip(xt, yt)), DiscretePerturbationSet(cands)


@settings(max_examples=60, deadline=None)
@given(points, points)
def test_hdh_formula_matches_bruteforce_and_is_symmetric(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    d = empirical_hdh(a, b, CLASS_1D)
    assert d == empirical_hdh_bruteforce(a, b, CLASS_1D)
    assert d == empirical_hdh(b, a, CLASS_1D)
    assert 0 <= d <= 2


@settings(max_examples=60, deadline=None)
@given(small_instance(), st.integers(0, 5), st.data())
def test_sup_is_monotone_in_perturbation_sets(inst, extra, data):
    z_s, z_t, pert = inst
    base = worst_case_sup(z_s, z_t, pert, CLASS_1D)
    unperturbed = worst_case_sup(z_s, z_t, DiscretePerturbationSet.singletons([p for p, _ in z_t]), CLASS_1D)
    assert base.value >= unperturbed.value
    i = data.draw(st.integers(0, len(z_t) - 1))
    grown = [list(cs) for cs in pert.candidates]
    if (Fraction(extra),) not in grown[i]:
        grown[i].append(extra)
    bigger = DiscretePerturbationSet(grown)
    assert worst_case_sup(z_s, z_t, bigger, CLASS_1D).value >= base.value
    for h in CLASS_1D:
        assert adversarial_loss_exact(h, z_t, bigger) >= adversarial_loss_exact(h, z_t, pert)


@settings(max_examples=60, deadline=None)
@given(small_instance())
def test_bound_holds(inst):
    report = check_bound(Instance(*inst, CLASS_1D))
    assert report["violations"] == []


def test_identical_domains_with_singletons():
    z = [(0, 1), (2, 0), (3, 1)]
    report = check_bound(Instance(z, z, DiscretePerturbationSet.singletons([0, 2, 3]), CLASS_1D))
    assert report["violations"] == []
    assert report["adversarial_divergence"] == report["max_divergence"]
    assert report["sup_divergence"]["value"] == 0


def test_adversarial_divergence_equals_plain_with_singletons():
    xs, xt = [0, 1, 4], [2, 2, 5]
    assert adversarial_divergence(xs, xt, DiscretePerturbationSet.singletons(xt), CLASS_1D) == \
        empirical_hdh(xs, xt, CLASS_1D)


def test_random_instances_in_two_dimensions():
    rng = np.random.default_rng(7)
    for _ in range(20):
        inst = random_instance(rng, n_max=4, dim=2, grid=4)
        assert check_bound(inst)["violations"] == []


def test_instance_file_round_trip(tmp_path):
    doc = {
        "source": {"points": [0, 1], "labels": [-1, 1]},
        "target": {"points": [2, 3], "labels": [-1, 1]},
        "perturbations": [[2, 1], [3]],
        "class": {"kind": "thresholds"},
    }
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "report.json"
    report = check_instance_file(path, out)
    assert json.loads(out.read_text()) == json.loads(json.dumps(report))
    assert report["violations"] == []
    assert {"lhs", "rhs", "holds"} <= set(report["hypotheses"][0])
    with pytest.raises(TheoryError):
        instance_from_dict({"source": {"points": [0]}, "target": {"points": [0], "labels": [0]}})
    with pytest.raises(TheoryError):
        instance_from_dict({**doc, "perturbations": [[5], [3]]})
    with pytest.raises(TheoryError):
        instance_from_dict({**doc, "class": {"kind": "trees"}})
