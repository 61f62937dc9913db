"""Training algorithms: natural UDA pretraining, DART and the robust baselines.

All algorithms share one loop (:func:`train`) that draws equal-size source
and target mini-batches, applies the algorithm's step, refreshes pseudo
labels every ``checkpoint_frequency`` iterations and keeps the checkpoint
with the best validation score.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, cross_entropy_attack, dart_target_attack, kl_transform, KL_FLOOR
from .autodiff import Graph, NonFiniteError, Tensor
from .data import LabeledSet, UnlabeledSet
from .divergence import DivergenceKind, domain_classifier_loss, omega
from .models import ModelParams, forward, predict_labels, predict_logits

log = logging.getLogger(__name__)

ALGORITHMS = (
    "natural_uda",
    "at_src",
    "trades_src",
    "at_tgt_pseudo",
    "trades_tgt_pseudo",
    "at_tgt_cg",
    "trades_tgt_cg",
    "at_plus_uda",
    "dart",
)
SOURCE_CHOICES = ("clean", "adv", "kl")
PSEUDO_LABEL_ALGORITHMS = ("dart", "at_tgt_pseudo", "trades_tgt_pseudo", "at_tgt_cg", "trades_tgt_cg")
# pseudo labels of these never change after initialization
FIXED_LABEL_ALGORITHMS = ("at_tgt_pseudo", "trades_tgt_pseudo")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ablation:
    drop_divergence: bool = False
    drop_third_term: bool = False
    fixed_pseudo_labels: bool = False
    self_labels: bool = False


def _default_train_attack():
    return AttackConfig(alpha=0.1, steps=5, step_size=0.05)


@dataclass(frozen=True)
class AlgorithmConfig:
    algorithm: str = "dart"
    source_choice: str = "clean"
    lambda1: float = 1.0
    lambda2: float = 1.0
    trades_beta: float = 6.0
    divergence: DivergenceKind = field(default_factory=DivergenceKind)
    dann_mode: str = "grl"
    train_attack: AttackConfig = field(default_factory=_default_train_attack)
    kl_random_start: bool = True
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    d_lr: float = 3e-3
    d_weight_decay: float = 0.0
    batch_size: int = 128
    iterations: int = 2000
    checkpoint_frequency: int = 100
    discriminator_steps: int = 1
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.source_choice not in SOURCE_CHOICES:
            raise ValueError(f"unknown source choice {self.source_choice!r}")
        if self.dann_mode not in ("grl", "alternating"):
            raise ValueError("dann_mode must be 'grl' or 'alternating'")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        if not self.trades_beta >= 0:
            raise ValueError("trades_beta must be nonnegative")
        if self.batch_size < 1 or self.iterations < 0 or self.checkpoint_frequency < 1:
            raise ValueError("batch_size and checkpoint_frequency must be positive")
        if self.discriminator_steps < 1:
            raise ValueError("discriminator_steps must be at least 1")

    @property
    def effective_lambda1(self) -> float:
        return 0.0 if self.ablation.drop_divergence else self.lambda1

    @property
    def effective_lambda2(self) -> float:
        return 0.0 if self.ablation.drop_third_term else self.lambda2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["divergence"] = self.divergence.to_dict()
        d["train_attack"] = self.train_attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgorithmConfig":
        d = dict(d)
        if "divergence" in d:
            d["divergence"] = DivergenceKind.from_dict(d["divergence"])
        if "train_attack" in d:
            d["train_attack"] = AttackConfig.from_dict(d["train_attack"])
        if "ablation" in d:
            d["ablation"] = Ablation(**d["ablation"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown algorithm config keys: {sorted(unknown)}")
        return cls(**d)


def objective_string(cfg: AlgorithmConfig) -> str:
    """Human-readable form of the objective actually optimized."""
    lam1, lam2 = cfg.effective_lambda1, cfg.effective_lambda2
    div = f"Omega[{cfg.divergence.tag}]"
    algo = cfg.algorithm
    if algo == "natural_uda":
        terms = ["CE(src)"] + ([f"lambda1*{div}(src,tgt)"] if lam1 > 0 else [])
    elif algo == "dart":
        src = {"clean": "src", "adv": "adv(src)", "kl": "kl(src)"}[cfg.source_choice]
        terms = [f"CE({src})"]
        if lam1 > 0:
            terms.append(f"lambda1*{div}({src},adv(tgt))")
        if lam2 > 0:
            terms.append("lambda2*CE(adv(tgt),pseudo)")
    elif algo == "at_src":
        terms = ["CE(adv(src))"]
    elif algo == "trades_src":
        terms = ["CE(src)", "beta*KL(kl(src)||src)"]
    elif algo in ("at_tgt_pseudo", "at_tgt_cg"):
        terms = ["CE(adv(tgt),pseudo)"]
    elif algo in ("trades_tgt_pseudo", "trades_tgt_cg"):
        terms = ["CE(tgt,pseudo)", "beta*KL(kl(tgt)||tgt)"]
    else:  # at_plus_uda
        terms = ["CE(adv(src))"] + ([f"lambda1*{div}(adv(src),tgt)"] if lam1 > 0 else [])
    return " + ".join(terms)


# --------------------------------------------------------------------------
# optimizer and batching


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, arrays: list[tuple[tuple, np.ndarray]], grads: list[np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (key, p), g in zip(arrays, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EpochSampler:
    """Endless stream of index batches from consecutive shuffled epochs."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos : self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


# --------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class PseudoLabelState:
    predictor: ModelParams
    labels: np.ndarray
    best_accuracy: float
    swaps: int = 0


def init_pseudo_labels(params: ModelParams, x_target: np.ndarray, accuracy: float) -> PseudoLabelState:
    """Copy f∘g into h_p and label the target training rows with it."""
    predictor = params.copy()
    predictor.copy_weights_to_predictor()
    return PseudoLabelState(predictor, predict_labels(predictor, x_target, "h_p"), float(accuracy))


def maybe_update_pseudo_labels(
    state: PseudoLabelState,
    params: ModelParams,
    proxy_eval: Callable[[ModelParams], float],
    iteration: int,
    K: int,
    x_target: np.ndarray,
    ablation: Ablation = Ablation(),
) -> PseudoLabelState:
    """Swap h_p for the current f∘g when the proxy accuracy improves.

    Returns ``state`` itself when nothing changes.
    """
    if K < 1 or iteration % K:
        raise ValueError(f"pseudo labels are refreshed only at multiples of K={K}")
    if ablation.fixed_pseudo_labels:
        return state
    if ablation.self_labels:
        return replace(state, labels=predict_labels(params, x_target, "fg"))
    try:
        acc = float(proxy_eval(params))
    except Exception as exc:
        raise TrainingError(f"proxy evaluation failed at iteration {iteration}: {exc}") from exc
    if not acc > state.best_accuracy:
        return state
    predictor = params.copy()
    predictor.copy_weights_to_predictor()
    labels = predict_labels(predictor, x_target, "h_p")
    return PseudoLabelState(predictor, labels, acc, state.swaps + 1)


@dataclass
class TrainState:
    params: ModelParams
    opt_fg: Adam
    opt_d: Adam
    attack_rng: np.random.Generator
    pseudo: PseudoLabelState | None = None
    iteration: int = 0


def make_state(params: ModelParams, cfg: AlgorithmConfig, attack_seed: int = 0) -> TrainState:
    return TrainState(
        params=params,
        opt_fg=Adam(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay),
        opt_d=Adam(cfg.d_lr, cfg.beta1, cfg.beta2, weight_decay=cfg.d_weight_decay),
        attack_rng=np.random.default_rng(attack_seed),
    )


# --------------------------------------------------------------------------
# losses and gradients


def param_gradients(graph: Graph, params: ModelParams, loss: Tensor, names=("g", "f", "d")):
    """``[(key, array)]`` and matching gradients for the listed components."""
    keyed = [((n, k, kind), a) for n, k, kind, a in params.arrays(names)]
    grads = ad.backward(loss, [graph.param(a) for _, a in keyed])
    return keyed, grads


def _check_finite(loss: Tensor, where: str):
    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"{where}: loss is not finite")


def divergence_term(cfg: AlgorithmConfig, params: ModelParams, fs: Tensor, ft: Tensor) -> tuple[Tensor, float]:
    """Term added to the minimized loss and the value of Ω it represents.

    Under gradient reversal the DANN term is the domain-classifier loss seen
    through a reversal layer: d descends on it, g ascends.
    """
    kind = cfg.divergence
    if kind.tag == "dann" and cfg.dann_mode == "grl":
        dc = domain_classifier_loss(ad.gradient_reversal(fs), ad.gradient_reversal(ft), params)
        return dc, -dc.item()
    om = omega(kind, fs, ft, params)
    return om, om.item()


def softmax_kl_pair(adv_logits: Tensor, clean_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax(adv) || softmax(clean)), both sides differentiable."""
    p = ad.softmax(adv_logits)
    q = ad.softmax(clean_logits)
    per_row = ad.sum_(p * (ad.log(p, floor=KL_FLOOR) - ad.log(q, floor=KL_FLOOR)), axis=1)
    return ad.mean(per_row)


def natural_loss(params, xs, ys, xt, cfg: AlgorithmConfig, graph: Graph):
    fs = forward(params, "g", xs, graph)
    ft = forward(params, "g", xt, graph)
    src = ad.softmax_cross_entropy(forward(params, "f", fs), ys)
    div, om = divergence_term(cfg, params, fs, ft)
    total = src + div * cfg.effective_lambda1
    return total, {"source_ce": src.item(), "omega": om}


def dart_loss(params, xs, ys, xt, yhat, cfg: AlgorithmConfig, graph: Graph):
    """L(f∘g; x̃_s, y_s) + λ1·Ω(g(x̃_s), g(x̃_t)) + λ2·CE(f∘g(x̃_t), ŷ_t)."""
    fs = forward(params, "g", xs, graph)
    ft = forward(params, "g", xt, graph)
    src = ad.softmax_cross_entropy(forward(params, "f", fs), ys)
    div, om = divergence_term(cfg, params, fs, ft)
    tgt = ad.softmax_cross_entropy(forward(params, "f", ft), yhat)
    total = src + div * cfg.effective_lambda1 + tgt * cfg.effective_lambda2
    return total, {"source_ce": src.item(), "omega": om, "target_pseudo_ce": tgt.item()}


def _update(state: TrainState, graph: Graph, loss: Tensor, names=("g", "f", "d")):
    _check_finite(loss, "update")
    keyed, grads = param_gradients(graph, state.params, loss, names)
    fg = [(kv, g) for kv, g in zip(keyed, grads) if kv[0][0] in ("g", "f")]
    dd = [(kv, g) for kv, g in zip(keyed, grads) if kv[0][0] == "d"]
    if fg:
        state.opt_fg.step([kv for kv, _ in fg], [g for _, g in fg])
    if dd:
        state.opt_d.step([kv for kv, _ in dd], [g for _, g in dd])
    for _, _, _, a in state.params.arrays(names):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("a parameter became non-finite")


def _discriminator_steps(state: TrainState, cfg: AlgorithmConfig, xs, xt):
    """Alternating mode: d ascends Ω on fixed features before the f,g update."""
    fs = predict_logits(state.params, "g", xs)
    ft = predict_logits(state.params, "g", xt)
    for _ in range(cfg.discriminator_steps):
        graph = Graph()
        loss = domain_classifier_loss(graph.constant(fs), graph.constant(ft), state.params)
        _update(state, graph, loss, names=("d",))


def _uses_alternating(cfg: AlgorithmConfig) -> bool:
    return cfg.divergence.tag == "dann" and cfg.dann_mode == "alternating"


def _kl_attack_cfg(cfg: AlgorithmConfig) -> AttackConfig:
    return replace(cfg.train_attack, random_start=True) if cfg.kl_random_start else cfg.train_attack


def transform_source(state: TrainState, xs, ys, cfg: AlgorithmConfig):
    if cfg.source_choice == "clean":
        return xs
    if cfg.source_choice == "adv":
        return cross_entropy_attack(state.params, xs, ys, cfg.train_attack, state.attack_rng)
    return kl_transform(state.params, xs, _kl_attack_cfg(cfg), state.attack_rng)


def natural_step(state: TrainState, batch_s, x_t, cfg: AlgorithmConfig) -> tuple[TrainState, dict]:
    """One step of source CE + λ1·Ω on clean data."""
    xs, ys = batch_s
    if _uses_alternating(cfg) and cfg.effective_lambda1 > 0:
        _discriminator_steps(state, cfg, xs, x_t)
    graph = Graph()
    loss, terms = natural_loss(state.params, xs, ys, x_t, cfg, graph)
    _update(state, graph, loss, ("g", "f") if _uses_alternating(cfg) else ("g", "f", "d"))
    state.iteration += 1
    terms["total"] = loss.item()
    return state, terms


def dart_step(state: TrainState, batch_s, batch_t, config: AlgorithmConfig) -> tuple[TrainState, dict]:
    """Transform the source, attack the target, then one joint update."""
    xs, ys = batch_s
    xt, yhat = batch_t
    if yhat is None or len(yhat) != len(xt):
        raise TrainingError("dart_step needs a pseudo label for every target row")
    lam1, lam2 = config.effective_lambda1, config.effective_lambda2
    xs_t = transform_source(state, xs, ys, config)
    fs = predict_logits(state.params, "g", xs_t)
    xt_t = dart_target_attack(
        state.params, xt, yhat, config.divergence, fs, lam1, lam2, config.train_attack, state.attack_rng
    )
    if _uses_alternating(config) and lam1 > 0:
        _discriminator_steps(state, config, xs_t, xt_t)
    graph = Graph()
    loss, terms = dart_loss(state.params, xs_t, ys, xt_t, yhat, config, graph)
    _update(state, graph, loss, ("g", "f") if _uses_alternating(config) else ("g", "f", "d"))
    state.iteration += 1
    terms["total"] = loss.item()
    return state, terms


def _trades_loss(params, x, y, x_adv, beta, graph):
    clean = forward(params, "fg", x, graph)
    ce = ad.softmax_cross_entropy(clean, y)
    kl = softmax_kl_pair(forward(params, "fg", x_adv, graph), clean)
    return ce + kl * beta, {"ce": ce.item(), "kl": kl.item()}


def baseline_step(state: TrainState, batch: dict, config: AlgorithmConfig) -> tuple[TrainState, dict]:
    """One step of a baseline; ``batch`` holds xs, ys, xt and pseudo labels yhat."""
    algo = config.algorithm
    p = state.params
    graph = Graph()
    names = ("g", "f")
    if algo == "at_src":
        xa = cross_entropy_attack(p, batch["xs"], batch["ys"], config.train_attack, state.attack_rng)
        loss = ad.softmax_cross_entropy(forward(p, "fg", xa, graph), batch["ys"])
        terms = {"ce": loss.item()}
    elif algo == "trades_src":
        xa = kl_transform(p, batch["xs"], _kl_attack_cfg(config), state.attack_rng)
        loss, terms = _trades_loss(p, batch["xs"], batch["ys"], xa, config.trades_beta, graph)
    elif algo in ("at_tgt_pseudo", "at_tgt_cg", "trades_tgt_pseudo", "trades_tgt_cg"):
        yhat = batch.get("yhat")
        if yhat is None:
            raise TrainingError(f"{algo} needs pseudo labels")
        if algo.startswith("at_"):
            xa = cross_entropy_attack(p, batch["xt"], yhat, config.train_attack, state.attack_rng)
            loss = ad.softmax_cross_entropy(forward(p, "fg", xa, graph), yhat)
            terms = {"ce": loss.item()}
        else:
            xa = kl_transform(p, batch["xt"], _kl_attack_cfg(config), state.attack_rng)
            loss, terms = _trades_loss(p, batch["xt"], yhat, xa, config.trades_beta, graph)
    elif algo == "at_plus_uda":
        xa = cross_entropy_attack(p, batch["xs"], batch["ys"], config.train_attack, state.attack_rng)
        if _uses_alternating(config) and config.effective_lambda1 > 0:
            _discriminator_steps(state, config, xa, batch["xt"])
        loss, terms = natural_loss(p, xa, batch["ys"], batch["xt"], config, graph)
        if not _uses_alternating(config):
            names = ("g", "f", "d")
    else:
        raise ValueError(f"{algo} is not a baseline")
    _update(state, graph, loss, names)
    state.iteration += 1
    terms["total"] = loss.item()
    return state, terms


# --------------------------------------------------------------------------
# the loop


@dataclass
class DomainData:
    source: LabeledSet
    target_train: UnlabeledSet
    target_val: LabeledSet
    target_test: LabeledSet

    @property
    def n_classes(self) -> int:
        return self.source.n_classes


@dataclass
class TrainResult:
    params: ModelParams
    final_params: ModelParams
    best_record: dict | None
    log: list[dict]
    pseudo: PseudoLabelState | None = None


def accuracy(params: ModelParams, data: LabeledSet) -> float:
    return float(np.mean(predict_labels(params, data.features) == data.labels))


def _selection_key(rec: dict):
    robust = rec.get("val_robust_acc")
    return (rec["val_nat_acc"], -1.0 if robust is None else robust, -rec["iteration"])


def train(
    config: AlgorithmConfig,
    data: DomainData,
    params: ModelParams,
    seed: int = 0,
    attack_seed: int = 0,
    evaluate_fn: Callable[[ModelParams], dict] | None = None,
    pseudo: PseudoLabelState | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``config.iterations`` steps from ``params`` (which is updated in place).

    Every K iterations: pseudo labels are refreshed when the algorithm
    allows it, ``evaluate_fn`` scores the model (default: validation
    accuracy) and the best checkpoint is kept.
    """
    algo = config.algorithm
    K = config.checkpoint_frequency
    state = make_state(params, config, attack_seed)
    s_rng, t_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    b = min(config.batch_size, len(data.source), len(data.target_train))
    samp_s = EpochSampler(len(data.source), b, s_rng)
    samp_t = EpochSampler(len(data.target_train), b, t_rng)
    xs_all, ys_all = data.source.features, data.source.labels
    xt_all = data.target_train.features

    def proxy(p):
        return accuracy(p, data.target_val)

    if algo in PSEUDO_LABEL_ALGORITHMS and pseudo is None:
        pseudo = init_pseudo_labels(params, xt_all, proxy(params))
    ablation = config.ablation
    if algo in FIXED_LABEL_ALGORITHMS:
        ablation = replace(ablation, fixed_pseudo_labels=True)
    evaluate_fn = evaluate_fn or (lambda p: {"val_nat_acc": proxy(p)})

    history: list[dict] = []
    best_key, best_params, best_rec = None, params.copy(), None
    sums: dict[str, float] = {}
    for t in range(1, config.iterations + 1):
        i_s, i_t = samp_s.next(), samp_t.next()
        xs, ys, xt = xs_all[i_s], ys_all[i_s], xt_all[i_t]
        try:
            if algo == "natural_uda":
                _, terms = natural_step(state, (xs, ys), xt, config)
            elif algo == "dart":
                _, terms = dart_step(state, (xs, ys), (xt, pseudo.labels[i_t]), config)
            else:
                batch = {"xs": xs, "ys": ys, "xt": xt, "yhat": None if pseudo is None else pseudo.labels[i_t]}
                _, terms = baseline_step(state, batch, config)
        except NonFiniteError as exc:
            raise TrainingError(f"{algo}: divergence at iteration {t}: {exc}") from exc
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v
        if t % K:
            continue
        swapped = False
        if pseudo is not None and algo not in FIXED_LABEL_ALGORITHMS:
            new = maybe_update_pseudo_labels(pseudo, state.params, proxy, t, K, xt_all, ablation)
            swapped = new is not pseudo and new.swaps > pseudo.swaps
            pseudo = new
        rec = {"iteration": t, "losses": {k: v / K for k, v in sorted(sums.items())}}
        sums = {}
        rec.update(evaluate_fn(state.params))
        rec["pseudo_label_swap"] = swapped
        if pseudo is not None:
            rec["proxy_accuracy"] = pseudo.best_accuracy
        history.append(rec)
        if on_record:
            on_record(rec)
        key = _selection_key(rec)
        if best_key is None or key > best_key:
            best_key, best_params, best_rec = key, state.params.copy(), rec
    return TrainResult(best_params, state.params, best_rec, history, pseudo)


def pretrain_natural(
    config: AlgorithmConfig,
    data: DomainData,
    params: ModelParams,
    seed: int = 0,
    attack_seed: int = 0,
    evaluate_fn=None,
    on_record=None,
) -> TrainResult:
    """Source CE + λ1·Ω from scratch; the checkpoint with best proxy accuracy wins."""
    cfg = replace(config, algorithm="natural_uda")
    return train(cfg, data, params, seed, attack_seed, evaluate_fn, on_record=on_record)
