"""MLP components g (features), f (classifier), d (domain discriminator)
and the pseudo-label predictor h_p, with JSON checkpoints."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, Tensor, apply_primitive

CKPT_FORMAT = "dartlab-ckpt-v1"
COMPONENTS = ("g", "f", "d", "h_p")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, input first.  ReLU between layers, raw output."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]


def default_specs(in_dim: int, n_classes: int) -> tuple[MlpSpec, MlpSpec, MlpSpec]:
    return MlpSpec((in_dim, 32, 16)), MlpSpec((16, n_classes)), MlpSpec((16, 16, 1))


Layer = tuple[np.ndarray, np.ndarray]


class ModelParams:
    """Named collection ``{component: [(W, b), ...]}``.

    ``h_p`` (when present) holds the layers of g followed by those of f, and
    runs with the same activation pattern as ``f∘g``.
    """

    def __init__(self, components: dict[str, list[Layer]]):
        self.components = components
        self.validate()

    def __getitem__(self, name: str) -> list[Layer]:
        return self.components[name]

    def __contains__(self, name: str) -> bool:
        return name in self.components

    @property
    def n_classes(self) -> int:
        return self.components["f"][-1][0].shape[1]

    @property
    def in_dim(self) -> int:
        return self.components["g"][0][0].shape[0]

    def validate(self):
        for name, layers in self.components.items():
            if name not in COMPONENTS:
                raise ValueError(f"unknown component {name!r}")
            if not layers:
                raise ValueError(f"component {name!r} has no layers")
            for k, (w, b) in enumerate(layers):
                if w.ndim != 2 or b.shape != (w.shape[1],):
                    raise ValueError(f"{name}[{k}]: weight {w.shape} vs bias {b.shape}")
                if k and layers[k - 1][0].shape[1] != w.shape[0]:
                    raise ValueError(f"{name}[{k}]: widths do not chain")
        g_out = self.components["g"][-1][0].shape[1]
        for name in ("f", "d"):
            if name in self.components and self.components[name][0][0].shape[0] != g_out:
                raise ValueError(f"{name} consumes width {self.components[name][0][0].shape[0]}, g emits {g_out}")
        if "d" in self.components and self.components["d"][-1][0].shape[1] != 1:
            raise ValueError("discriminator must emit a single logit")
        if "h_p" in self.components:
            ref = self.components["g"] + self.components["f"]
            hp = self.components["h_p"]
            if [w.shape for w, _ in hp] != [w.shape for w, _ in ref]:
                raise ValueError("h_p shapes must equal those of g followed by f")

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: [(w.copy(), b.copy()) for w, b in layers] for n, layers in self.components.items()}
        )

    def arrays(self, names=None):
        """Yield ``(component, layer index, 'W'|'b', array)`` in a fixed order."""
        for name in names or COMPONENTS:
            for k, (w, b) in enumerate(self.components.get(name, ())):
                yield name, k, "W", w
                yield name, k, "b", b

    def copy_weights_to_predictor(self):
        """h_p <- f∘g (fresh arrays)."""
        self.components["h_p"] = [(w.copy(), b.copy()) for w, b in self.components["g"] + self.components["f"]]

    def equals(self, other: "ModelParams") -> bool:
        if self.components.keys() != other.components.keys():
            return False
        return all(
            np.array_equal(a, b) for (_, _, _, a), (_, _, _, b) in zip(self.arrays(), other.arrays())
        )


def init_params(spec_g: MlpSpec, spec_f: MlpSpec, spec_d: MlpSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    if spec_f.in_dim != spec_g.out_dim:
        raise ValueError(f"f input width {spec_f.in_dim} != g output width {spec_g.out_dim}")
    if spec_d.in_dim != spec_g.out_dim:
        raise ValueError(f"d input width {spec_d.in_dim} != g output width {spec_g.out_dim}")
    if spec_d.out_dim != 1:
        raise ValueError("discriminator must emit a single logit")
    rng = np.random.default_rng(seed)
    comps = {}
    for name, spec in (("g", spec_g), ("f", spec_f), ("d", spec_d)):
        layers = []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
        comps[name] = layers
    return ModelParams(comps)


def _mlp(layers: list[Layer], x: Tensor, graph: Graph) -> Tensor:
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        x = apply_primitive("add", [apply_primitive("matmul", [x, graph.param(w)]), graph.param(b)])
        if k < last:
            x = apply_primitive("relu", [x])
    return x


def _check_width(layers, x_shape, component):
    if len(x_shape) != 2 or x_shape[1] != layers[0][0].shape[0]:
        raise ValueError(f"{component} expects width {layers[0][0].shape[0]}, got input {x_shape}")


def forward(params: ModelParams, component: str, x, graph: Graph | None = None) -> Tensor:
    """Logits of ``component`` on batch ``x``, recorded on the active graph.

    ``component`` is one of g, f, d, h_p or ``"fg"`` for the composition f∘g.
    """
    if isinstance(x, Tensor):
        if graph is not None and graph is not x.graph:
            raise ValueError("x lives on a different graph")
        graph = x.graph
    else:
        graph = Graph() if graph is None else graph
        x = graph.constant(x)
    if component == "fg":
        return forward(params, "f", forward(params, "g", x))
    if component not in params:
        raise KeyError(f"no component {component!r}")
    layers = params[component]
    _check_width(layers, x.shape, component)
    if component == "h_p":
        n_g = len(params["g"])
        return _mlp(layers[n_g:], _mlp(layers[:n_g], x, graph), graph)
    return _mlp(layers, x, graph)


def _mlp_numpy(layers, x):
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        x = x @ w + b
        if k < last:
            x = x * (x > 0)
    return x


def predict_logits(params: ModelParams, component: str, x: np.ndarray) -> np.ndarray:
    """Tape-free evaluation; same arithmetic as :func:`forward`."""
    x = np.asarray(x, dtype=np.float64)
    if component == "fg":
        return predict_logits(params, "f", predict_logits(params, "g", x))
    layers = params[component]
    _check_width(layers, x.shape, component)
    if component == "h_p":
        n_g = len(params["g"])
        return _mlp_numpy(layers[n_g:], _mlp_numpy(layers[:n_g], x))
    return _mlp_numpy(layers, x)


def predict_labels(params: ModelParams, x: np.ndarray, component: str = "fg") -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(predict_logits(params, component, x), axis=1)


def effective_linear(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Collapse f∘g to ``(W, b)`` when neither component has a hidden layer."""
    if len(params["g"]) != 1 or len(params["f"]) != 1:
        raise ValueError("f∘g is not linear: hidden ReLU layers present")
    (wg, bg), (wf, bf) = params["g"][0], params["f"][0]
    return wg @ wf, bg @ wf + bf


# --------------------------------------------------------------------------
# checkpoints


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(a: np.ndarray) -> dict:
    shape = list(a.shape) if a.ndim == 2 else [a.shape[0]]
    return {"shape": shape, "data": [format(v, ".17g") for v in a.reshape(-1).tolist()]}


def _decode(entry, where) -> np.ndarray:
    try:
        shape = [int(s) for s in entry["shape"]]
        data = np.array([float(v) for v in entry["data"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}: malformed tensor entry ({exc})") from None
    if int(np.prod(shape)) != data.size:
        raise CheckpointError(f"{where}: shape {shape} needs {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


def checkpoint_document(params: ModelParams) -> dict:
    comps = {}
    for name, layers in params.components.items():
        entries = []
        for w, b in layers:
            entries.append(_encode(w))
            entries.append(_encode(b))
        comps[name] = entries
    return {"format": CKPT_FORMAT, "components": comps}


def params_from_document(doc) -> ModelParams:
    if not isinstance(doc, dict) or doc.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"not a {CKPT_FORMAT} document")
    comps = doc.get("components")
    if not isinstance(comps, dict) or "g" not in comps or "f" not in comps:
        raise CheckpointError("checkpoint must contain at least components g and f")
    out = {}
    for name, entries in comps.items():
        if not isinstance(entries, list) or len(entries) % 2:
            raise CheckpointError(f"{name}: expected alternating weight/bias entries")
        arrays = [_decode(e, f"{name}[{i}]") for i, e in enumerate(entries)]
        out[name] = list(zip(arrays[0::2], arrays[1::2]))
    try:
        return ModelParams(out)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None


def save_checkpoint(params: ModelParams, path):
    atomic_write_text(path, json.dumps(checkpoint_document(params)))


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON ({exc})") from None
    return params_from_document(doc)
