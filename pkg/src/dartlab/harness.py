"""Experiment orchestration: configs, evaluation, runs on disk and random search."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, cross_entropy_attack, eval_attack, grid_candidates, linear_worst_margin
from .data import LabeledSet, gen_shifted_blobs, gen_two_moons_shift, load_csv, split_source, split_target
from .models import (
    MlpSpec,
    ModelParams,
    atomic_write_text,
    effective_linear,
    init_params,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
)
from .trainers import Ablation, AlgorithmConfig, DomainData, objective_string, pretrain_natural, train

log = logging.getLogger(__name__)

CSV_HEADER = ("alpha", "algorithm", "nat_acc", "robust_acc")


class ExperimentError(RuntimeError):
    """A run failed; the message names the stage."""


# --------------------------------------------------------------------------
# evaluation


def evaluate(params: ModelParams, test: LabeledSet, attack: AttackConfig, rng=None) -> dict:
    """Clean accuracy and accuracy under per-example cross-entropy PGD."""
    if test.labels is None:
        raise ValueError("evaluation needs labels")
    nat = predict_labels(params, test.features) == test.labels
    if attack.alpha == 0 or attack.steps == 0:
        rob = nat
    else:
        x_adv = cross_entropy_attack(params, test.features, test.labels, attack, rng)
        rob = predict_labels(params, x_adv) == test.labels
    return {"nat_acc": float(nat.mean()), "robust_acc": float(rob.mean())}


def evaluate_linear_exact(params: ModelParams, test: LabeledSet, alpha: float) -> float:
    """Exact ℓ∞ robust accuracy of a two-class linear f∘g."""
    w, b = effective_linear(params)
    if w.shape[1] != 2:
        raise ValueError("the exact linear oracle covers two classes")
    dw, db = w[:, 1] - w[:, 0], b[1] - b[0]
    y = test.labels
    margin = linear_worst_margin(dw, db, 2 * y - 1, test.features, alpha)
    # a zero logit gap predicts class 0, so class 1 needs a strictly positive margin
    ok = np.where(y == 1, margin > 0, margin >= 0)
    return float(ok.mean())


def grid_robust_accuracy(params: ModelParams, test: LabeledSet, alpha: float, points_per_dim: int = 21) -> float:
    """Fraction of points classified correctly at every lattice point of their α-box."""
    x, y = test.features, test.labels
    offsets = grid_candidates(np.zeros(x.shape[1]), alpha, points_per_dim)
    cands = (x[:, None, :] + offsets[None, :, :]).reshape(-1, x.shape[1])
    pred = predict_labels(params, cands).reshape(x.shape[0], offsets.shape[0])
    return float(np.all(pred == y[:, None], axis=1).mean())


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "two_moons"
    n: int = 2000
    rotation_degrees: float = 30.0
    noise_std: float = 0.1
    shift: tuple[float, float] = (1.0, 0.5)
    n_classes: int = 2
    blob_std: float = 0.5
    source_keep: float = 0.8
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    # kind == "csv": labeled source and target files
    source_csv: str | None = None
    target_csv: str | None = None

    def __post_init__(self):
        if self.kind not in ("two_moons", "blobs", "csv"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "csv" and (self.source_csv is None or self.target_csv is None):
            raise ValueError("csv datasets need source_csv and target_csv")
        object.__setattr__(self, "shift", tuple(self.shift))
        object.__setattr__(self, "ratios", tuple(self.ratios))

    def generate(self, seed: int):
        if self.kind == "two_moons":
            return gen_two_moons_shift(self.n, self.rotation_degrees, self.noise_std, seed)
        if self.kind == "blobs":
            return gen_shifted_blobs(self.n, self.shift, self.n_classes, self.blob_std, seed)
        src = load_csv(self.source_csv, True, "source")
        tgt = load_csv(self.target_csv, True, "target", src.n_classes)
        n_classes = max(src.n_classes, tgt.n_classes)
        src.n_classes = tgt.n_classes = n_classes
        return src, tgt

    def build(self, seed: int) -> DomainData:
        src, tgt = self.generate(seed)
        tr, va, te = split_target(tgt, self.ratios, seed)
        return DomainData(split_source(src, self.source_keep, seed), tr, va, te)


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0
    attack: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    pretrain_iterations: int = 2000
    eval_attack: AttackConfig = field(default_factory=lambda: eval_attack(0.1))
    seeds: Seeds = field(default_factory=Seeds)
    trials: int = 4
    hidden: tuple[int, ...] = (32, 16)
    d_hidden: tuple[int, ...] = (16,)
    alphas: tuple[float, ...] | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.pretrain_iterations < 1:
            raise ValueError("pretrain_iterations must be positive")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "d_hidden", tuple(self.d_hidden))
        if self.alphas is not None:
            object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    def specs(self, in_dim: int, n_classes: int):
        g = MlpSpec((in_dim, *self.hidden))
        feat = g.out_dim
        return g, MlpSpec((feat, n_classes)), MlpSpec((feat, *self.d_hidden, 1))

    def pretrain_config(self) -> AlgorithmConfig:
        return replace(self.algorithm, algorithm="natural_uda", iterations=self.pretrain_iterations,
                       ablation=Ablation())

    def to_dict(self) -> dict:
        d = {
            "dataset": asdict(self.dataset),
            "algorithm": self.algorithm.to_dict(),
            "pretrain_iterations": self.pretrain_iterations,
            "eval_attack": self.eval_attack.to_dict(),
            "seeds": asdict(self.seeds),
            "trials": self.trials,
            "hidden": list(self.hidden),
            "d_hidden": list(self.d_hidden),
            "alphas": list(self.alphas) if self.alphas is not None else None,
            "output_dir": self.output_dir,
        }
        d["dataset"]["shift"] = list(self.dataset.shift)
        d["dataset"]["ratios"] = list(self.dataset.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetSpec(**d["dataset"])
        if "algorithm" in d:
            d["algorithm"] = AlgorithmConfig.from_dict(d["algorithm"])
        if "eval_attack" in d:
            d["eval_attack"] = AttackConfig.from_dict(d["eval_attack"])
        if "seeds" in d:
            d["seeds"] = Seeds(**d["seeds"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)


@dataclass
class MetricsRecord:
    trial: int
    stage: str
    iteration: int
    val_nat_acc: float | None = None
    val_pgd_acc: float | None = None
    test_nat_acc: float | None = None
    test_pgd_acc: float | None = None
    selected: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("val_nat_acc", "val_pgd_acc", "test_nat_acc", "test_pgd_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _jsonl(records) -> str:
    return "".join(r.to_json() + "\n" for r in records)


# --------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    trial: int
    records: list[MetricsRecord]
    params: ModelParams
    summary: dict


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _val_evaluator(data: DomainData, attack: AttackConfig, seed: int = 0):
    # a fresh generator per call: every checkpoint faces the same random starts
    def fn(params):
        r = evaluate(params, data.target_val, attack, _rng(seed))
        return {"val_nat_acc": r["nat_acc"], "val_robust_acc": r["robust_acc"]}

    return fn


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, ExperimentError):
                raise ExperimentError(f"stage {name!r} failed: {ev}") from ev
            return False

    return _Ctx()


def pretrain(config: ExperimentConfig, data: DomainData | None = None):
    """Natural-UDA pretraining selected by validation accuracy."""
    with _stage("data"):
        data = data or config.dataset.build(config.seeds.data)
    with _stage("pretrain"):
        spec = config.specs(data.source.dim, data.n_classes)
        params = init_params(*spec, seed=config.seeds.init)
        res = pretrain_natural(config.pretrain_config(), data, params, config.seeds.train, config.seeds.attack,
                               _val_evaluator(data, config.eval_attack, config.seeds.attack))
    return data, res


def _records_from_log(trial, stage, history) -> list[MetricsRecord]:
    out = []
    for rec in history:
        extra = {"losses": rec["losses"], "pseudo_label_swap": rec.get("pseudo_label_swap", False)}
        if "proxy_accuracy" in rec:
            extra["proxy_accuracy"] = rec["proxy_accuracy"]
        out.append(MetricsRecord(trial, stage, rec["iteration"], rec["val_nat_acc"], rec.get("val_robust_acc"),
                                 extra=extra))
    return out


def run_experiment(
    config: ExperimentConfig,
    out_dir=None,
    force: bool = False,
    trial: int = 0,
    pretrained: tuple[DomainData, ModelParams, list[MetricsRecord]] | None = None,
) -> RunResult:
    """pretrain -> algorithm -> periodic validation -> test evaluation of the selection.

    With ``out_dir`` the run writes config.json, checkpoints/, metrics.jsonl,
    result.json and (when alphas are set) alpha_sweep.csv, each atomically.
    A completed directory with the same config is returned as-is unless
    ``force``.
    """
    out = Path(out_dir or config.output_dir) if (out_dir or config.output_dir) else None
    cfg_doc = config.to_dict()
    cfg_doc.pop("output_dir")
    if out is not None and (out / "result.json").exists() and not force:
        stored = json.loads((out / "config.json").read_text()) if (out / "config.json").exists() else None
        if stored != cfg_doc:
            raise ExperimentError(f"{out} holds a run with a different config; pass force to overwrite")
        return _load_run(out, trial)

    if pretrained is None:
        data, pre = pretrain(config)
        pre_params = pre.params
        pre_records = _records_from_log(trial, "pretrain", pre.log)
        for r in pre_records:
            r.selected = pre.best_record is not None and r.iteration == pre.best_record["iteration"]
    else:
        data, pre_params, pre_records = pretrained
        pre_records = [replace(r, trial=trial) for r in pre_records]

    algo = config.algorithm
    with _stage(f"train:{algo.algorithm}"):
        if algo.algorithm == "natural_uda":
            params, best, history = pre_params.copy(), None, []
        else:
            res = train(algo, data, pre_params.copy(), config.seeds.train, config.seeds.attack,
                        _val_evaluator(data, config.eval_attack, config.seeds.attack))
            params, best, history = res.params, res.best_record, res.log
    records = pre_records + _records_from_log(trial, "train", history)
    if best is not None:
        for r in records:
            if r.stage == "train":
                r.selected = r.iteration == best["iteration"]
    with _stage("evaluate"):
        val = evaluate(params, data.target_val, config.eval_attack, _rng(config.seeds.attack))
        test = evaluate(params, data.target_test, config.eval_attack, _rng(config.seeds.attack))
    sel_iter = best["iteration"] if best is not None else 0
    final = MetricsRecord(trial, "final", sel_iter, val["nat_acc"], val["robust_acc"], test["nat_acc"],
                          test["robust_acc"], selected=True, extra={"objective": objective_string(algo)})
    records.append(final)
    summary = {
        "trial": trial,
        "algorithm": algo.algorithm,
        "objective": objective_string(algo),
        "selected_iteration": sel_iter,
        "val_nat_acc": val["nat_acc"],
        "val_robust_acc": val["robust_acc"],
        "test_nat_acc": test["nat_acc"],
        "test_robust_acc": test["robust_acc"],
    }
    sweep_rows = None
    if config.alphas is not None:
        with _stage("alpha_sweep"):
            sweep_rows = alpha_sweep_rows({algo.algorithm: params}, data.target_test, config.alphas,
                                          config.eval_attack, config.seeds.attack)
    if out is not None:
        with _stage("write"):
            atomic_write_text(out / "config.json", json.dumps(cfg_doc, indent=2, sort_keys=True) + "\n")
            save_checkpoint(pre_params, out / "checkpoints" / "pretrained.json")
            save_checkpoint(params, out / "checkpoints" / "selected.json")
            summary["pretrained_checkpoint"] = "checkpoints/pretrained.json"
            summary["selected_checkpoint"] = "checkpoints/selected.json"
            atomic_write_text(out / "metrics.jsonl", _jsonl(records))
            if sweep_rows is not None:
                write_alpha_csv(out / "alpha_sweep.csv", sweep_rows)
                summary["alpha_sweep"] = "alpha_sweep.csv"
            # result.json last: its presence marks the run complete
            atomic_write_text(out / "result.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(trial, records, params, summary)


def _load_run(out: Path, trial: int) -> RunResult:
    summary = json.loads((out / "result.json").read_text())
    records = []
    for line in (out / "metrics.jsonl").read_text().splitlines():
        records.append(MetricsRecord(**json.loads(line)))
    return RunResult(trial, records, load_checkpoint(out / "checkpoints" / "selected.json"), summary)


# --------------------------------------------------------------------------
# alpha sweeps


def alpha_sweep_rows(models: dict, test: LabeledSet, alphas, attack: AttackConfig, seed: int = 0) -> list[tuple]:
    rows = []
    for name, params in models.items():
        for a in alphas:
            r = evaluate(params, test, replace(attack, alpha=float(a), step_size=float(a) / 8.0), _rng(seed))
            rows.append((float(a), name, r["nat_acc"], r["robust_acc"]))
    return rows


def write_alpha_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for a, name, nat, rob in rows:
        w.writerow([repr(a), name, repr(nat), repr(rob)])
    atomic_write_text(path, buf.getvalue())


def run_alpha_sweep(config: ExperimentConfig, algorithms, alphas, out_dir=None) -> list[tuple]:
    """Train each algorithm from one shared pretraining and sweep α on the test split."""
    data, pre = pretrain(config)
    models = {}
    for name in algorithms:
        if name == "natural_uda":
            models[name] = pre.params
            continue
        cfg = replace(config.algorithm, algorithm=name)
        with _stage(f"train:{name}"):
            res = train(cfg, data, pre.params.copy(), config.seeds.train, config.seeds.attack,
                        _val_evaluator(data, config.eval_attack, config.seeds.attack))
        models[name] = res.params
    rows = alpha_sweep_rows(models, data.target_test, alphas, config.eval_attack, config.seeds.attack)
    if out_dir is not None:
        write_alpha_csv(Path(out_dir) / "alpha_sweep.csv", rows)
        for name, p in models.items():
            save_checkpoint(p, Path(out_dir) / "checkpoints" / f"{name}.json")
    return rows


# --------------------------------------------------------------------------
# random search


@dataclass(frozen=True)
class SearchSpace:
    lambda_log10: tuple[float, float] = (-1.0, 1.0)
    disc_steps_log2: tuple[float, float] = (0.0, 3.0)
    beta1: tuple[float, float] = (0.0, 0.9)
    lr_log10: tuple[float, float] = (-4.5, -2.5)
    d_lr_log10: tuple[float, float] = (-4.5, -2.5)
    d_weight_decay_log10: tuple[float, float] = (-6.0, -3.0)

    def sample(self, rng: np.random.Generator) -> dict:
        u = rng.uniform
        return {
            "lambda1": float(10 ** u(*self.lambda_log10)),
            "lambda2": float(10 ** u(*self.lambda_log10)),
            "discriminator_steps": int(round(2 ** u(*self.disc_steps_log2))),
            "beta1": float(u(*self.beta1)),
            "lr": float(10 ** u(*self.lr_log10)),
            "d_lr": float(10 ** u(*self.d_lr_log10)),
            "d_weight_decay": float(10 ** u(*self.d_weight_decay_log10)),
        }


@dataclass
class SweepResult:
    best_trial: int | None
    best_config: ExperimentConfig | None
    trials: list[dict]
    records: list[MetricsRecord]


def sample_configs(base: ExperimentConfig, trials: int, seed: int, space: SearchSpace = SearchSpace()):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        hp = space.sample(rng)
        out.append((hp, replace(base, algorithm=replace(base.algorithm, **hp))))
    return out


def random_search(
    config: ExperimentConfig,
    trials: int | None = None,
    seed: int = 0,
    out_dir=None,
    space: SearchSpace = SearchSpace(),
    force: bool = False,
) -> SweepResult:
    """Sample hyperparameters, run every trial from one shared pretraining
    and select by validation accuracy (ties: robust validation accuracy,
    then the lower trial id).  Failed trials are recorded and skipped."""
    trials = config.trials if trials is None else trials
    if trials < 1:
        raise ValueError("trials must be at least 1")
    out = Path(out_dir) if out_dir is not None else None
    data, pre = pretrain(config)
    pre_records = _records_from_log(0, "pretrain", pre.log)
    for r in pre_records:
        r.selected = pre.best_record is not None and r.iteration == pre.best_record["iteration"]
    if out is not None:
        save_checkpoint(pre.params, out / "pretrained.json")

    rows, records = [], []
    best_key, best_trial, best_cfg = None, None, None
    for t, (hp, cfg) in enumerate(sample_configs(config, trials, seed, space)):
        row = {"trial": t, "hyperparameters": hp}
        try:
            res = run_experiment(cfg, out / f"trial_{t:03d}" if out is not None else None, force=force,
                                 trial=t, pretrained=(data, pre.params, pre_records))
        except Exception as exc:  # a failed trial never aborts the sweep
            log.warning("trial %d failed: %s", t, exc)
            row["status"] = "failed"
            row["error"] = str(exc)
            rows.append(row)
            continue
        row["status"] = "ok"
        row.update({k: res.summary[k] for k in ("val_nat_acc", "val_robust_acc", "test_nat_acc", "test_robust_acc")})
        rows.append(row)
        records.extend(r for r in res.records if r.stage != "pretrain")
        key = (res.summary["val_nat_acc"], res.summary["val_robust_acc"], -t)
        if best_key is None or key > best_key:
            best_key, best_trial, best_cfg = key, t, cfg
    if out is not None:
        atomic_write_text(out / "metrics.jsonl", _jsonl(pre_records + records))
        doc = {"best_trial": best_trial, "seed": seed, "trials": rows,
               "best_config": best_cfg.to_dict() if best_cfg is not None else None}
        atomic_write_text(out / "sweep.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return SweepResult(best_trial, best_cfg, rows, pre_records + records)


def load_model_and_data(ckpt, data_csv) -> tuple[ModelParams, LabeledSet]:
    params = load_checkpoint(ckpt)
    data = load_csv(data_csv, True, "target", params.n_classes)
    if data.dim != params.in_dim:
        raise ValueError(f"{data_csv} has {data.dim} features; the model expects {params.in_dim}")
    return params, data


__all__ = [
    "CSV_HEADER",
    "DatasetSpec",
    "ExperimentConfig",
    "ExperimentError",
    "MetricsRecord",
    "RunResult",
    "SearchSpace",
    "Seeds",
    "SweepResult",
    "alpha_sweep_rows",
    "evaluate",
    "evaluate_linear_exact",
    "grid_robust_accuracy",
    "load_model_and_data",
    "random_search",
    "run_alpha_sweep",
    "run_experiment",
    "sample_configs",
]
