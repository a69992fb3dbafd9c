"""Per-client personalization: local baseline, full fine-tuning, freeze-base
fine-tuning, and the two expert-mixing variants with a trained linear gate.

The expert-mixing algorithms alternate, within every epoch, one adaptation
pass over the client's adaptation subset (updating only the personalized
classifier) with one gating pass over the gate subset (updating only the
gate weights, both experts frozen).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, UsageError
from .federation import sgd_epochs
from .models import (
    GatingParams,
    ModelParams,
    ModelSpec,
    SplitModel,
    build_model,
    classify,
    classify_graph,
    extract_features,
    forward,
    gate_forward,
    init_gate,
    mix_outputs,
    param_leaves,
    split_model,
)
from .numerics import graph
from .numerics.optim import OptimizerState, SgdConfig, sgd_step
from .numerics.tensor import Tensor

ALGORITHMS = ("local", "pfl_ft", "pfl_fb", "pfl_mf", "pfl_mfe")
MOE_ALGORITHMS = ("pfl_mf", "pfl_mfe")

# Local baseline defaults: 300 epochs of SGD with momentum 0.9, lr 0.1,
# weight decay 5e-4, batch 64, lr decayed by 0.1 every 100 epochs.
LOCAL_BASELINE_SGD = SgdConfig(
    learning_rate=0.1, momentum=0.9, weight_decay=0.0005, lr_decay_factor=0.1, lr_decay_every=100
)
LOCAL_BASELINE_EPOCHS = 300
LOCAL_BASELINE_BATCH = 64


@dataclass(frozen=True)
class PersonalizationConfig:
    algorithm: str
    epochs: int = 200
    adapt_lr: float = 0.001
    gate_lr: float = 0.001
    batch_size: int = 64
    split_ratio: float = 0.8
    adapt_momentum: float = 0.9
    adapt_weight_decay: float = 0.0005

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        min_epochs = 0 if self.algorithm == "local" else 1
        if self.epochs < min_epochs:
            raise ConfigError(f"epochs: need at least {min_epochs} for {self.algorithm}, got {self.epochs}")
        if not self.adapt_lr > 0:
            raise ConfigError(f"adapt_lr: must be positive, got {self.adapt_lr}")
        if not self.gate_lr > 0:
            raise ConfigError(f"gate_lr: must be positive, got {self.gate_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be positive, got {self.batch_size}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio: must lie in (0, 1), got {self.split_ratio}")

    def adapt_sgd(self) -> SgdConfig:
        # Fixed small lr, no decay, over the adaptation epochs.
        return SgdConfig(
            learning_rate=self.adapt_lr,
            momentum=self.adapt_momentum,
            weight_decay=self.adapt_weight_decay,
        )

    def gate_sgd(self) -> SgdConfig:
        return SgdConfig(learning_rate=self.gate_lr)


@dataclass(frozen=True)
class PersonalizedClient:
    """One client's personalization output plus its frozen global reference."""

    client_id: int
    algorithm: str
    personalized: dict[str, Tensor]  # full model (pfl_ft) or classifier head (fb/mf/mfe)
    gate: GatingParams | None
    split: SplitModel

    def __post_init__(self):
        if (self.gate is not None) != (self.algorithm in MOE_ALGORITHMS):
            raise ConfigError(f"gate must be present exactly for {MOE_ALGORITHMS}, got {self.algorithm}")


def train_local_baseline(
    client_data: LabeledDataset,
    spec: ModelSpec,
    seed: int,
    epochs: int = LOCAL_BASELINE_EPOCHS,
    sgd: SgdConfig = LOCAL_BASELINE_SGD,
    batch_size: int = LOCAL_BASELINE_BATCH,
) -> ModelParams:
    """From-scratch training on the client's own data only."""
    params = build_model(spec, seed)
    # Shuffle stream must be independent of the init stream, which consumed seed.
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    trained = sgd_epochs(
        params.tensors, spec, client_data.features.data, client_data.labels, epochs, batch_size, sgd, rng
    )
    return ModelParams(spec, trained)


def pfl_ft(
    global_params: ModelParams,
    client_data: LabeledDataset,
    cfg: PersonalizationConfig,
    seed: int,
    client_id: int = 0,
) -> PersonalizedClient:
    """Fine-tune the whole model from the global parameters at a small lr."""
    rng = np.random.default_rng(seed)
    trained = sgd_epochs(
        global_params.tensors,
        global_params.spec,
        client_data.features.data,
        client_data.labels,
        cfg.epochs,
        cfg.batch_size,
        cfg.adapt_sgd(),
        rng,
    )
    return PersonalizedClient(
        client_id=client_id,
        algorithm="pfl_ft",
        personalized=trained,
        gate=None,
        split=split_model(global_params),
    )


def _classifier_epoch(
    classifier: dict[str, Tensor],
    spec: ModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    cfg: SgdConfig,
    state: OptimizerState,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    """One adaptation epoch over precomputed extractor features."""
    names = list(classifier)
    order = rng.permutation(len(labels))
    for start in range(0, len(labels), batch_size):
        batch = order[start : start + batch_size]
        leaves = param_leaves(classifier)
        logits = classify_graph(spec, leaves, graph.leaf(features[batch]))
        loss = graph.cross_entropy(logits, labels[batch])
        grads = graph.gradient(loss, [leaves[k] for k in names])
        classifier = sgd_step(classifier, dict(zip(names, grads)), state, cfg)
    state.epoch += 1
    return classifier


def pfl_fb(
    split: SplitModel,
    client_data: LabeledDataset,
    cfg: PersonalizationConfig,
    seed: int,
    client_id: int = 0,
) -> PersonalizedClient:
    """Freeze-base fine-tuning: extractor untouched, classifier adapted.

    The extractor is frozen, so its activations are computed once and the
    adaptation epochs run on the classifier head alone.
    """
    features = extract_features(split, client_data.features).data
    classifier = dict(split.classifier)
    state = OptimizerState()
    rng = np.random.default_rng(seed)
    sgd = cfg.adapt_sgd()
    for _ in range(cfg.epochs):
        classifier = _classifier_epoch(
            classifier, split.spec, features, client_data.labels, cfg.batch_size, sgd, state, rng
        )
    return PersonalizedClient(
        client_id=client_id, algorithm="pfl_fb", personalized=classifier, gate=None, split=split
    )


def _gate_pass(
    gate_w: Tensor,
    gate_b: Tensor,
    gate_inputs: np.ndarray,
    global_logits: np.ndarray,
    local_logits: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    cfg: SgdConfig,
    state: OptimizerState,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor]:
    """One gating epoch: SGD on the gate alone, both experts frozen."""
    order = rng.permutation(len(labels))
    params = {"weight": gate_w, "bias": gate_b}
    for start in range(0, len(labels), batch_size):
        batch = order[start : start + batch_size]
        leaves = param_leaves(params)
        score = graph.reshape(
            graph.dense(graph.leaf(gate_inputs[batch]), leaves["weight"], leaves["bias"]),
            (len(batch),),
        )
        mixed = graph.mix(
            graph.sigmoid(score), graph.leaf(global_logits[batch]), graph.leaf(local_logits[batch])
        )
        loss = graph.cross_entropy(mixed, labels[batch])
        grads = graph.gradient(loss, [leaves["weight"], leaves["bias"]])
        params = sgd_step(params, {"weight": grads[0], "bias": grads[1]}, state, cfg)
    state.epoch += 1
    return params["weight"], params["bias"]


def _gate_inputs_for(mode: str, raw: np.ndarray, features: np.ndarray | None) -> np.ndarray:
    if mode == "raw":
        return raw.reshape(len(raw), -1)
    return features


def train_gate(
    global_expert: ModelParams,
    local_expert: ModelParams,
    gate_data: LabeledDataset,
    cfg: PersonalizationConfig,
    input_mode: str,
    seed: int,
) -> GatingParams:
    """Train a zero-initialized linear gate to mix two frozen full-model experts.

    Feature-mode gate inputs come from the global expert's extractor (the
    shared base); neither expert's parameters change here.
    """
    if len(gate_data) == 0:
        raise ConfigError("train_gate: gate dataset is empty")
    spec = global_expert.spec
    global_split = split_model(global_expert)
    global_logits = forward(global_expert, gate_data.features).data
    local_logits = forward(local_expert, gate_data.features).data
    feats = (
        extract_features(global_split, gate_data.features).data if input_mode == "feature" else None
    )
    inputs = _gate_inputs_for(input_mode, gate_data.features.data, feats)

    gate = init_gate(spec, input_mode)
    w, b = gate.weights, Tensor._wrap(np.zeros(1))
    state = OptimizerState()
    rng = np.random.default_rng(seed)
    for _ in range(cfg.epochs):
        w, b = _gate_pass(
            w, b, inputs, global_logits, local_logits, gate_data.labels,
            cfg.batch_size, cfg.gate_sgd(), state, rng,
        )
    return GatingParams(w, float(b.data[0]), input_mode)


def _run_moe(
    client_id: int,
    per_data: LabeledDataset,
    gate_data: LabeledDataset,
    split: SplitModel,
    cfg: PersonalizationConfig,
    input_mode: str,
    seed: int,
) -> PersonalizedClient:
    """Shared body of the two expert-mixing algorithms.

    Per epoch: one adaptation pass over the adaptation subset (classifier
    only), then one gating pass over the gate subset with the experts as they
    stand after that adaptation pass. The global classifier and the extractor
    never change; the extractor being shared lets every pass reuse cached
    activations.
    """
    spec = split.spec
    per_feats = extract_features(split, per_data.features).data
    gate_feats = extract_features(split, gate_data.features).data
    global_logits = classify(split, Tensor._wrap(gate_feats)).data
    gate_inputs = _gate_inputs_for(input_mode, gate_data.features.data, gate_feats)

    classifier = dict(split.classifier)
    w = init_gate(spec, input_mode).weights
    b = Tensor._wrap(np.zeros(1))
    adapt_state, gate_state = OptimizerState(), OptimizerState()
    adapt_sgd, gate_sgd = cfg.adapt_sgd(), cfg.gate_sgd()
    rng = np.random.default_rng(seed)
    for _ in range(cfg.epochs):
        classifier = _classifier_epoch(
            classifier, spec, per_feats, per_data.labels, cfg.batch_size, adapt_sgd, adapt_state, rng
        )
        local_logits = classify(split, Tensor._wrap(gate_feats), classifier=classifier).data
        w, b = _gate_pass(
            w, b, gate_inputs, global_logits, local_logits, gate_data.labels,
            cfg.batch_size, gate_sgd, gate_state, rng,
        )
    return PersonalizedClient(
        client_id=client_id,
        algorithm="pfl_mf" if input_mode == "raw" else "pfl_mfe",
        personalized=classifier,
        gate=GatingParams(w, float(b.data[0]), input_mode),
        split=split,
    )


def run_pfl_mf(
    client_id: int,
    per_data: LabeledDataset,
    gate_data: LabeledDataset,
    split: SplitModel,
    cfg: PersonalizationConfig,
    seed: int,
) -> PersonalizedClient:
    """Expert mixing with the gate reading raw (flattened) inputs."""
    return _run_moe(client_id, per_data, gate_data, split, cfg, "raw", seed)


def run_pfl_mfe(
    client_id: int,
    per_data: LabeledDataset,
    gate_data: LabeledDataset,
    split: SplitModel,
    cfg: PersonalizationConfig,
    seed: int,
) -> PersonalizedClient:
    """Expert mixing with the gate reading extractor activations."""
    return _run_moe(client_id, per_data, gate_data, split, cfg, "feature", seed)


def moe_predict(x: Tensor, client: PersonalizedClient, gate_override: float | None = None) -> Tensor:
    """Single-pass mixture inference: shared features, two classifier heads,
    per-example gate weight. ``gate_override`` clamps g for boundary checks."""
    if client.gate is None:
        raise UsageError(f"client {client.client_id} ({client.algorithm}) has no gating network")
    single = x.ndim == 3
    xb = Tensor._wrap(x.data[None]) if single else x
    feats = extract_features(client.split, xb)
    global_out = classify(client.split, feats)
    local_out = classify(client.split, feats, classifier=client.personalized)
    if gate_override is not None:
        g = gate_override
    else:
        v = xb.data.reshape(len(xb.data), -1) if client.gate.input_mode == "raw" else feats.data
        g = gate_forward(client.gate, Tensor._wrap(v))
    mixed = mix_outputs(g, global_out, local_out)
    return Tensor._wrap(mixed.data[0]) if single else mixed


def mean_gate_weight(client: PersonalizedClient, gate_data: LabeledDataset) -> float:
    """Average mixing weight g over a gate set; the global expert's share."""
    if client.gate is None:
        raise UsageError(f"client {client.client_id} ({client.algorithm}) has no gating network")
    if client.gate.input_mode == "raw":
        v = gate_data.features.data.reshape(len(gate_data), -1)
    else:
        v = extract_features(client.split, gate_data.features).data
    g = gate_forward(client.gate, Tensor._wrap(v))
    return float(g.data.mean())
