import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dartlab import autodiff as ad
from dartlab.divergence import DivergenceKind, cmd, coral, dann_omega, domain_classifier_loss, mmd, omega
from dartlab.models import default_specs, init_params

from oracles import mmd_rbf_reference

# frozen from hand derivations: k(0,0)=k(1,1)=1, k(0,1)=exp(-1/2)
MMD_ZERO_ONE = 2.0 - 2.0 * math.exp(-0.5)


def constant_half_discriminator(width=16):
    p = init_params(*default_specs(2, 2), seed=0)
    p.components["d"] = [(np.zeros((width, 16)), np.zeros(16)), (np.zeros((16, 1)), np.zeros(1))]
    return p


def test_mmd_unit_value():
    assert mmd(np.array([[0.0]]), np.array([[1.0]]), sigma=1.0).item() == pytest.approx(MMD_ZERO_ONE, abs=1e-9)


def test_coral_unit_value():
    s = np.array([[1.0, 0.0], [-1.0, 0.0]])
    t = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert coral(s, t).item() == 2.0


@pytest.mark.parametrize("k", [1, 2])
def test_cmd_unit_value(k):
    assert cmd(np.zeros((2, 1)), np.ones((2, 1)), moments=k, box=(0.0, 1.0)).item() == 1.0


def test_dann_omega_under_constant_discriminator():
    p = constant_half_discriminator()
    fs = np.random.default_rng(0).normal(size=(5, 16))
    ft = np.random.default_rng(1).normal(size=(7, 16))
    assert dann_omega(fs, ft, p).item() == pytest.approx(-2 * math.log(2), abs=1e-9)


def test_all_zero_on_identical_sets():
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert mmd(x, x).item() == pytest.approx(0.0, abs=1e-12)
    assert coral(x, x).item() == 0.0
    assert cmd(x, x).item() == 0.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)),
       st.floats(0.3, 3.0))
def test_mmd_matches_double_loop(xs, xt, sigma):
    assert mmd(xs, xt, sigma).item() == pytest.approx(mmd_rbf_reference(xs, xt, sigma), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-3, 3)), arrays(np.float64, (5, 2), elements=st.floats(-3, 3)))
def test_symmetric_and_nonnegative(xs, xt):
    for fn in (mmd, coral, cmd):
        a, b = fn(xs, xt).item(), fn(xt, xs).item()
        assert a >= -1e-12
        assert a == pytest.approx(b, abs=1e-10)


def test_domain_classifier_loss_is_bounded_by_negated_omega():
    p = init_params(*default_specs(2, 2), seed=0)
    fs = np.random.default_rng(0).normal(size=(5, 16))
    ft = np.random.default_rng(1).normal(size=(5, 16))
    assert dann_omega(fs, ft, p).item() == -domain_classifier_loss(fs, ft, p).item()
    assert dann_omega(fs, ft, p).item() <= 0


def test_gradients_reach_features():
    g = ad.Graph()
    fs = g.input(np.random.default_rng(0).normal(size=(4, 3)))
    ft = g.input(np.random.default_rng(1).normal(size=(4, 3)) + 1)
    for kind in ("mmd", "coral", "cmd"):
        val = omega(DivergenceKind(kind), fs, ft)
        gs, gt = ad.backward(val, [fs, ft])
        assert np.all(np.isfinite(gs)) and np.any(gs) and np.any(gt)


def test_cmd_is_differentiable_when_moments_agree():
    g = ad.Graph()
    fs = g.input(np.zeros((2, 1)))
    ft = g.input(np.zeros((2, 1)))
    (gs,) = ad.backward(cmd(fs, ft, 3, (0.0, 1.0)), [fs])
    np.testing.assert_array_equal(gs, np.zeros((2, 1)))


def test_errors():
    with pytest.raises(ValueError):
        mmd(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mmd(np.zeros((2, 2)), np.zeros((2, 2)), sigma=0.0)
    with pytest.raises(ValueError):
        cmd(np.zeros((2, 2)), np.zeros((2, 2)), box=(1.0, 1.0))
    with pytest.raises(ValueError):
        DivergenceKind("wasserstein")
    with pytest.raises(ValueError):
        omega(DivergenceKind("dann"), np.zeros((2, 2)), np.zeros((2, 2)), None)


def test_kind_round_trip():
    for kind in (DivergenceKind("dann"), DivergenceKind("mmd", sigma=2.0), DivergenceKind("cmd", moments=3, box=(0, 2))):
        assert DivergenceKind.from_dict(kind.to_dict()) == kind


def test_cmd_with_a_vanishing_observed_range_stays_finite():
    tiny = np.full((5, 2), 1.2e-213)
    v = cmd(np.zeros((4, 2)), tiny).item()
    assert np.isfinite(v) and v == cmd(tiny, np.zeros((4, 2))).item()
