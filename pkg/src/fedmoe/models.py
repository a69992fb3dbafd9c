"""Model zoo (LeNet-5 and a small MLP) as an extractor/classifier split,
plus the per-client linear gating network and expert-output mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import graph, kernels
from .numerics.tensor import Tensor

ARCHITECTURES = ("lenet5", "mlp")
GATE_INPUT_MODES = ("raw", "feature")

LENET5_FEATURE_DIM = 400  # 16 filters x 5 x 5 after the second pool


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    channels: int = 1
    side: int = 32
    classes: int = 10
    hidden_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture: unsupported {self.architecture!r}, expected one of {ARCHITECTURES}")
        if self.channels < 1:
            raise ConfigError(f"channels: must be positive, got {self.channels}")
        if self.classes < 2:
            raise ConfigError(f"classes: need at least 2, got {self.classes}")
        if self.architecture == "lenet5" and self.side != 32:
            raise ConfigError(f"side: lenet5 expects 32x32 inputs, got {self.side}")
        if self.architecture == "mlp" and not self.hidden_sizes:
            raise ConfigError("hidden_sizes: mlp needs at least one hidden layer")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.side, self.side)

    @property
    def raw_input_dim(self) -> int:
        return self.channels * self.side * self.side

    @property
    def feature_dim(self) -> int:
        """Width of the activations between extractor and classifier."""
        if self.architecture == "lenet5":
            return LENET5_FEATURE_DIM
        return self.hidden_sizes[-1]


@dataclass(frozen=True)
class ModelParams:
    """Ordered, named parameter tensors for one ModelSpec."""

    spec: ModelSpec
    tensors: dict[str, Tensor]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)


@dataclass(frozen=True)
class SplitModel:
    """A model divided into a shared feature extractor and a classifier head."""

    spec: ModelSpec
    extractor: dict[str, Tensor]
    classifier: dict[str, Tensor]

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim


@dataclass(frozen=True)
class GatingParams:
    """Per-client linear gate emitting the global expert's mixing weight."""

    weights: Tensor  # (input_dim, 1)
    bias: float
    input_mode: str

    def __post_init__(self):
        if self.input_mode not in GATE_INPUT_MODES:
            raise ConfigError(f"input_mode: expected one of {GATE_INPUT_MODES}, got {self.input_mode!r}")
        if self.weights.ndim != 2 or self.weights.shape[1] != 1:
            raise DimensionError(f"gate weights must have shape (input_dim, 1), got {self.weights.shape}")

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]


# Layer plans. Each entry is (kind, name, meta): conv (filters, kernel),
# dense (in, out), and parameter-free relu / pool / flatten steps.


def _layer_plan(spec: ModelSpec) -> tuple[list, list]:
    if spec.architecture == "lenet5":
        extractor = [
            ("conv", "conv1", (6, spec.channels, 5)),
            ("relu", None, None),
            ("pool", None, None),
            ("conv", "conv2", (16, 6, 5)),
            ("relu", None, None),
            ("pool", None, None),
            ("flatten", None, None),
        ]
        classifier = [
            ("dense", "fc1", (LENET5_FEATURE_DIM, 120)),
            ("relu", None, None),
            ("dense", "fc2", (120, 84)),
            ("relu", None, None),
            ("dense", "fc3", (84, spec.classes)),
        ]
        return extractor, classifier
    extractor = [("flatten", None, None)]
    prev = spec.raw_input_dim
    for i, width in enumerate(spec.hidden_sizes, start=1):
        extractor.append(("dense", f"hidden{i}", (prev, width)))
        extractor.append(("relu", None, None))
        prev = width
    classifier = [("dense", "out", (prev, spec.classes))]
    return extractor, classifier


def _init_layer(kind: str, meta, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if kind == "conv":
        filters, in_ch, k = meta
        fan_in = in_ch * k * k
        bound = 1.0 / np.sqrt(fan_in)
        return {
            "weight": rng.uniform(-bound, bound, size=(filters, in_ch, k, k)),
            "bias": np.zeros(filters),
        }
    fan_in, out = meta
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "weight": rng.uniform(-bound, bound, size=(fan_in, out)),
        "bias": np.zeros(out),
    }


def build_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Initialize parameters: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for kind, name, meta in _layer_plan(spec)[0] + _layer_plan(spec)[1]:
        if name is None:
            continue
        for pname, arr in _init_layer(kind, meta, rng).items():
            tensors[f"{name}.{pname}"] = Tensor._wrap(arr)
    return ModelParams(spec, tensors)


def parameter_count(spec: ModelSpec) -> int:
    """Analytic parameter count for a spec."""
    total = 0
    for kind, name, meta in _layer_plan(spec)[0] + _layer_plan(spec)[1]:
        if name is None:
            continue
        if kind == "conv":
            filters, in_ch, k = meta
            total += filters * in_ch * k * k + filters
        else:
            fan_in, out = meta
            total += fan_in * out + out
    return total


def split_model(params: ModelParams) -> SplitModel:
    """Divide a model into (extractor, classifier); the halves share tensors."""
    ext_plan, cls_plan = _layer_plan(params.spec)
    ext_names = {name for _, name, _ in ext_plan if name}
    extractor: dict[str, Tensor] = {}
    classifier: dict[str, Tensor] = {}
    for key, t in params.tensors.items():
        base = key.split(".", 1)[0]
        (extractor if base in ext_names else classifier)[key] = t
    return SplitModel(params.spec, extractor, classifier)


def merge_model(split: SplitModel) -> ModelParams:
    """Inverse of split_model; reproduces the original tensor order bit-exactly."""
    tensors: dict[str, Tensor] = {}
    tensors.update(split.extractor)
    tensors.update(split.classifier)
    return ModelParams(split.spec, tensors)


def _run_plan(plan: list, values: dict[str, graph.Value], x: graph.Value) -> graph.Value:
    out = x
    for kind, name, _ in plan:
        if kind == "conv":
            out = graph.conv2d(out, values[f"{name}.weight"], values[f"{name}.bias"])
        elif kind == "dense":
            out = graph.dense(out, values[f"{name}.weight"], values[f"{name}.bias"])
        elif kind == "relu":
            out = graph.relu(out)
        elif kind == "pool":
            out = graph.max_pool2x2(out)
        else:
            out = graph.flatten(out)
    return out


def param_leaves(tensors: dict[str, Tensor]) -> dict[str, graph.Value]:
    """Fresh graph leaves for a parameter dict (one training batch's worth)."""
    return {name: graph.leaf(t) for name, t in tensors.items()}


def extract_graph(spec: ModelSpec, values: dict[str, graph.Value], x: graph.Value) -> graph.Value:
    return _run_plan(_layer_plan(spec)[0], values, x)


def classify_graph(spec: ModelSpec, values: dict[str, graph.Value], a: graph.Value) -> graph.Value:
    return _run_plan(_layer_plan(spec)[1], values, a)


def forward_graph(spec: ModelSpec, values: dict[str, graph.Value], x: graph.Value) -> graph.Value:
    return classify_graph(spec, values, extract_graph(spec, values, x))


def _check_input(spec: ModelSpec, x: Tensor) -> tuple[np.ndarray, bool]:
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    if data.ndim != 4 or data.shape[1:] != spec.input_shape:
        raise DimensionError(f"model input {x.shape} does not match spec {spec.input_shape}")
    return data, single


def forward(model: ModelParams, x: Tensor) -> Tensor:
    """Raw logits for a batch (B,C,S,S) or a single example (C,S,S)."""
    data, single = _check_input(model.spec, x)
    out = forward_graph(model.spec, param_leaves(model.tensors), graph.leaf(data)).data
    return Tensor._wrap(out[0] if single else out)


def extract_features(split: SplitModel, x: Tensor) -> Tensor:
    """Activations between extractor and classifier (length feature_dim)."""
    data, single = _check_input(split.spec, x)
    out = extract_graph(split.spec, param_leaves(split.extractor), graph.leaf(data)).data
    return Tensor._wrap(out[0] if single else out)


def classify(split: SplitModel, a: Tensor, classifier: dict[str, Tensor] | None = None) -> Tensor:
    """Classifier logits from features; ``classifier`` overrides the global head."""
    head = split.classifier if classifier is None else classifier
    single = a.ndim == 1
    data = a.data[None] if single else a.data
    if data.ndim != 2 or data.shape[1] != split.feature_dim:
        raise DimensionError(f"features {a.shape} do not match feature_dim {split.feature_dim}")
    out = classify_graph(split.spec, param_leaves(head), graph.leaf(data)).data
    return Tensor._wrap(out[0] if single else out)


def gate_input_dim(spec: ModelSpec, input_mode: str) -> int:
    if input_mode == "raw":
        return spec.raw_input_dim
    if input_mode == "feature":
        return spec.feature_dim
    raise ConfigError(f"input_mode: expected one of {GATE_INPUT_MODES}, got {input_mode!r}")


def init_gate(spec: ModelSpec, input_mode: str) -> GatingParams:
    """Zero-initialized gate, so the first mixing weight is 0.5 everywhere."""
    dim = gate_input_dim(spec, input_mode)
    return GatingParams(Tensor._wrap(np.zeros((dim, 1))), 0.0, input_mode)


def gate_forward(gate: GatingParams, v: Tensor):
    """Mixing weight g = sigmoid(w.v + b); scalar for a vector input,
    a (B,) tensor for a (B, input_dim) batch."""
    single = v.ndim == 1
    data = v.data[None] if single else v.data
    if data.ndim != 2 or data.shape[1] != gate.input_dim:
        raise DimensionError(f"gate input {v.shape} does not match gate dim {gate.input_dim}")
    g = kernels.sigmoid(data @ gate.weights.data[:, 0] + gate.bias)
    return float(g[0]) if single else Tensor._wrap(g)


def mix_outputs(g, global_out: Tensor, local_out: Tensor) -> Tensor:
    """Convex combination of expert outputs on logits: g*global + (1-g)*local."""
    if global_out.shape != local_out.shape:
        raise DimensionError(f"expert outputs {global_out.shape} and {local_out.shape} differ")
    if isinstance(g, Tensor):
        gv = g.data
        if gv.ndim != 1 or global_out.ndim != 2 or gv.shape[0] != global_out.shape[0]:
            raise DimensionError(f"gate weights {g.shape} do not match outputs {global_out.shape}")
        gv = gv[:, None]
    else:
        gv = float(g)
        if not 0.0 <= gv <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {gv}")
    return Tensor._wrap(gv * global_out.data + (1.0 - gv) * local_out.data)
