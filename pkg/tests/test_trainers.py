import math
from dataclasses import replace

import numpy as np
import pytest

from dartlab import autodiff as ad
from dartlab.attacks import AttackConfig
from dartlab.autodiff import Graph
from dartlab.data import gen_two_moons_shift, split_source, split_target
from dartlab.divergence import dann_omega
from dartlab.models import default_specs, forward, init_params, predict_labels, predict_logits
from dartlab.trainers import (
    ALGORITHMS,
    Ablation,
    AlgorithmConfig,
    DomainData,
    TrainingError,
    accuracy,
    dart_loss,
    dart_step,
    init_pseudo_labels,
    make_state,
    maybe_update_pseudo_labels,
    natural_loss,
    objective_string,
    param_gradients,
    pretrain_natural,
    train,
)

from oracles import source_only_reference

NO_ATTACK = AttackConfig(alpha=0.0, steps=5, step_size=0.05)


def small_data(n=120, seed=0, rotation=30.0):
    src, tgt = gen_two_moons_shift(n, rotation, 0.1, seed)
    tr, va, te = split_target(tgt, seed=seed)
    return DomainData(split_source(src, seed=seed), tr, va, te)


def assert_same_weights(a, b, names=("g", "f")):
    for (_, _, _, x), (_, _, _, y) in zip(a.arrays(names), b.arrays(names)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize(
    "algorithm,overrides",
    [
        ("dart", {"lambda1": 0.0, "lambda2": 0.0, "train_attack": NO_ATTACK}),
        ("natural_uda", {"lambda1": 0.0}),
        ("at_src", {"train_attack": NO_ATTACK}),
        ("trades_src", {"trades_beta": 0.0}),
    ],
)
def test_degenerate_settings_reproduce_source_training(algorithm, overrides):
    data = small_data()
    cfg = AlgorithmConfig(algorithm=algorithm, batch_size=32, iterations=40, checkpoint_frequency=20, **overrides)
    init = init_params(*default_specs(2, 2), seed=1)
    got = train(cfg, data, init.copy(), seed=3).final_params
    ref = source_only_reference(data, init.copy(), cfg, seed=3, iterations=40)
    assert_same_weights(got, ref)


def test_zero_lambdas_give_the_source_gradient():
    p = init_params(*default_specs(2, 2), seed=0)
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    ys, yhat = rng.integers(0, 2, 8), rng.integers(0, 2, 8)
    g1 = Graph()
    loss, _ = dart_loss(p, xs, ys, xt, yhat, AlgorithmConfig(lambda1=0.0, lambda2=0.0), g1)
    _, got = param_gradients(g1, p, loss, ("g", "f"))
    g2 = Graph()
    _, ref = param_gradients(g2, p, ad.softmax_cross_entropy(forward(p, "fg", xs, g2), ys), ("g", "f"))
    for a, b in zip(got, ref):
        assert np.abs(a - b).max() < 1e-10


def test_unattacked_dart_step_is_natural_plus_pseudo_label_ce():
    cfg = AlgorithmConfig(lambda1=0.7, lambda2=1.3, train_attack=NO_ATTACK)
    p = init_params(*default_specs(2, 2), seed=2)
    rng = np.random.default_rng(1)
    xs, xt = rng.normal(size=(8, 2)), rng.normal(size=(8, 2)) + 0.5
    ys, yhat = rng.integers(0, 2, 8), rng.integers(0, 2, 8)

    state = make_state(p.copy(), cfg)
    dart_step(state, (xs, ys), (xt, yhat), cfg)

    ref = p.copy()
    graph = Graph()
    nat, _ = natural_loss(ref, xs, ys, xt, cfg, graph)
    loss = nat + ad.softmax_cross_entropy(forward(ref, "fg", xt, graph), yhat) * cfg.lambda2
    keyed, grads = param_gradients(graph, ref, loss)
    ref_state = make_state(ref, cfg)
    fg = [(k, g) for k, g in zip(keyed, grads) if k[0][0] != "d"]
    dd = [(k, g) for k, g in zip(keyed, grads) if k[0][0] == "d"]
    ref_state.opt_fg.step([k for k, _ in fg], [g for _, g in fg])
    ref_state.opt_d.step([k for k, _ in dd], [g for _, g in dd])
    for (_, _, _, a), (_, _, _, b) in zip(state.params.arrays(), ref.arrays()):
        assert np.abs(a - b).max() < 1e-12


def test_ablation_switches_force_lambdas_to_zero():
    cfg = AlgorithmConfig(lambda1=2.0, lambda2=3.0)
    assert replace(cfg, ablation=Ablation(drop_divergence=True)).effective_lambda1 == 0.0
    assert replace(cfg, ablation=Ablation(drop_third_term=True)).effective_lambda2 == 0.0
    both = replace(cfg, ablation=Ablation(drop_divergence=True, drop_third_term=True))
    assert objective_string(both) == "CE(src)"
    assert objective_string(cfg) == "CE(src) + lambda1*Omega[dann](src,adv(tgt)) + lambda2*CE(adv(tgt),pseudo)"
    assert objective_string(replace(cfg, algorithm="at_plus_uda")).startswith("CE(adv(src))")


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        AlgorithmConfig(algorithm="sgd")
    with pytest.raises(ValueError):
        AlgorithmConfig(lambda1=math.inf)
    with pytest.raises(ValueError):
        AlgorithmConfig(source_choice="noisy")
    cfg = AlgorithmConfig(algorithm="trades_tgt_cg", lambda1=0.5, ablation=Ablation(self_labels=True))
    assert AlgorithmConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        AlgorithmConfig.from_dict({"lamda1": 1.0})


def _state_with(acc, seed=0):
    p = init_params(*default_specs(2, 2), seed=seed)
    return p, init_pseudo_labels(p, np.random.default_rng(0).normal(size=(10, 2)), acc)


def test_pseudo_label_swap_rule():
    x = np.random.default_rng(0).normal(size=(10, 2))
    _, state = _state_with(0.7)
    newer = init_params(*default_specs(2, 2), seed=9)
    swapped = maybe_update_pseudo_labels(state, newer, lambda p: 0.8, 100, 100, x)
    assert swapped.swaps == 1 and swapped.best_accuracy == 0.8
    assert np.array_equal(swapped.labels, predict_labels(newer, x))
    assert np.array_equal(swapped.labels, predict_labels(swapped.predictor, x, "h_p"))
    same = maybe_update_pseudo_labels(state, newer, lambda p: 0.6, 200, 100, x)
    assert same is state
    assert maybe_update_pseudo_labels(state, newer, lambda p: 0.7, 200, 100, x) is state
    with pytest.raises(ValueError):
        maybe_update_pseudo_labels(state, newer, lambda p: 0.8, 150, 100, x)


def test_pseudo_label_ties_go_to_the_lowest_class():
    p = init_params(*default_specs(2, 3), seed=0)
    p.components["f"] = [(np.zeros((16, 3)), np.zeros(3))]
    state = init_pseudo_labels(p, np.random.default_rng(0).normal(size=(6, 2)), 0.0)
    assert not state.labels.any()


def test_pseudo_label_ablations_and_proxy_failure():
    x = np.random.default_rng(0).normal(size=(10, 2))
    _, state = _state_with(0.5)
    other = init_params(*default_specs(2, 2), seed=4)
    fixed = maybe_update_pseudo_labels(state, other, lambda p: 1.0, 100, 100, x, Ablation(fixed_pseudo_labels=True))
    assert fixed is state
    own = maybe_update_pseudo_labels(state, other, lambda p: 0.0, 100, 100, x, Ablation(self_labels=True))
    assert np.array_equal(own.labels, predict_labels(other, x))

    def broken(p):
        raise RuntimeError("no validation data")

    with pytest.raises(TrainingError, match="iteration 100"):
        maybe_update_pseudo_labels(state, other, broken, 100, 100, x)


def test_fixed_label_baselines_never_swap_and_cg_shares_the_rule():
    data = small_data()
    init = init_params(*default_specs(2, 2), seed=0)
    base = AlgorithmConfig(batch_size=32, iterations=60, checkpoint_frequency=20,
                           train_attack=AttackConfig(alpha=0.1, steps=2, step_size=0.05))
    fixed = train(replace(base, algorithm="at_tgt_pseudo"), data, init.copy())
    assert fixed.pseudo.swaps == 0 and not any(r["pseudo_label_swap"] for r in fixed.log)
    start = init_pseudo_labels(init, data.target_train.features, accuracy(init, data.target_val))
    assert np.array_equal(fixed.pseudo.labels, start.labels)
    cg = train(replace(base, algorithm="at_tgt_cg"), data, init.copy())
    assert cg.pseudo.swaps == sum(r["pseudo_label_swap"] for r in cg.log)
    proxies = [r["proxy_accuracy"] for r in cg.log]
    assert proxies == sorted(proxies)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
@pytest.mark.parametrize("source_choice", ["clean", "kl"])
def test_every_algorithm_runs_finite_and_reproducibly(algorithm, source_choice):
    if source_choice != "clean" and algorithm != "dart":
        pytest.skip("source choice only applies to dart")
    data = small_data(80)
    cfg = AlgorithmConfig(algorithm=algorithm, source_choice=source_choice, batch_size=16, iterations=20,
                          checkpoint_frequency=10, train_attack=AttackConfig(alpha=0.1, steps=2, step_size=0.05,
                                                                             random_start=True))
    init = init_params(*default_specs(2, 2), seed=5)
    a = train(cfg, data, init.copy(), seed=1, attack_seed=2)
    b = train(cfg, data, init.copy(), seed=1, attack_seed=2)
    assert a.final_params.equals(b.final_params)
    for _, _, _, arr in a.final_params.arrays():
        assert np.all(np.isfinite(arr))
    assert [r["iteration"] for r in a.log] == [10, 20]
    assert all(np.isfinite(v) for r in a.log for v in r["losses"].values())


def test_alternating_mode_trains_the_discriminator_separately():
    data = small_data(80)
    cfg = AlgorithmConfig(algorithm="natural_uda", dann_mode="alternating", discriminator_steps=2,
                          batch_size=16, iterations=10, checkpoint_frequency=10)
    init = init_params(*default_specs(2, 2), seed=0)
    out = train(cfg, data, init.copy()).final_params
    assert not out.equals(init)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_is_reported():
    data = small_data(80)
    cfg = AlgorithmConfig(algorithm="natural_uda", lr=1e300, batch_size=16, iterations=20, checkpoint_frequency=10)
    with pytest.raises(TrainingError, match="natural_uda"):
        train(cfg, data, init_params(*default_specs(2, 2), seed=0))


def test_dart_step_needs_pseudo_labels():
    cfg = AlgorithmConfig()
    state = make_state(init_params(*default_specs(2, 2), seed=0), cfg)
    with pytest.raises(TrainingError):
        dart_step(state, (np.zeros((4, 2)), np.zeros(4, int)), (np.zeros((4, 2)), None), cfg)


def test_identical_domains_leave_the_discriminator_at_chance():
    src, _ = gen_two_moons_shift(500, 0.0, 0.1, seed=0)
    val = src.subset(np.arange(100), "val")
    data = DomainData(src, src.unlabeled(), val, val)
    cfg = AlgorithmConfig(algorithm="natural_uda", iterations=500, checkpoint_frequency=100)
    out = train(cfg, data, init_params(*default_specs(2, 2), seed=0)).final_params
    feats = predict_logits(out, "g", src.features)
    g = Graph()
    om = dann_omega(g.constant(feats), g.constant(feats), out).item()
    assert -2 * math.log(2) - 0.05 <= om <= -2 * math.log(2) + 1e-12


def test_pretraining_adapts_to_rotated_moons():
    wins = 0
    for seed in range(5):
        src, tgt = gen_two_moons_shift(2000, 30.0, 0.1, seed)
        tr, va, te = split_target(tgt, seed=seed)
        data = DomainData(split_source(src, seed=seed), tr, va, te)
        res = pretrain_natural(AlgorithmConfig(iterations=2000), data,
                               init_params(*default_specs(2, 2), seed=seed), seed=seed)
        wins += accuracy(res.params, te) > 0.85
    assert wins >= 4
