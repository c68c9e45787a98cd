"""Model assembly, losses with per-layer supervision, and the training loop.

Each word-level layer carries its own pointer/classifier heads. Per training
step, labels are assigned to queries dynamically (or statically in the
ablation), boundary and classification losses are summed over layers, and
sentence losses are averaged per batch. Inference decodes the final layer
only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .assignment import (
    QuantityVector,
    allocate_quantities,
    compute_cost_matrix,
    labels_from_assignment,
    solve_one_to_many_lap,
)
from .data import AnnotationError, DatasetMeta, EntityAnnotation, SentenceExample
from .encoder import (
    EmbeddingTables,
    LayerOutputs,
    ModelConfig,
    TransformerLayer,
    build_input,
    build_one_way_mask,
    encode,
    one_way_self_attention,
)
from .evaluation import EvalReport, evaluate_corpus
from .heads import (
    BoundaryScores,
    LayerHeads,
    Prediction,
    TypeDistribution,
    boundary_pointer,
    decode_entities,
    entity_classifier,
)
from .tensor import (
    NumericError,
    Tensor,
    add,
    backward,
    bce_with_logits,
    grad_check,
    mul,
    narrow,
    no_grad,
    softmax_cross_entropy,
)

CHECKPOINT_FORMAT = "iqner-checkpoint-v1"


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    """Optimization and label-assignment settings."""

    epochs: int = 50
    learning_rate: float = 4e-3
    warmup_fraction: float = 0.1
    batch_size: int = 8
    seed: int = 0
    loc_threshold: float = 0.6
    cls_threshold: float = 0.8
    assignment_mode: str = "dynamic"
    quantity_mode: str = "one_to_many"
    ratio: float = 0.75
    share_final_assignment: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.loc_threshold <= 1.0 or not 0.0 <= self.cls_threshold <= 1.0:
            raise ValueError("decode thresholds must be in [0, 1]")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.assignment_mode not in ("dynamic", "static"):
            raise ValueError(f"unknown assignment mode {self.assignment_mode!r}")
        if self.quantity_mode not in ("one_to_many", "one_to_one"):
            raise ValueError(f"unknown quantity mode {self.quantity_mode!r}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class LossReport:
    """Per-layer boundary and classification loss values."""

    boundary: list[float] = field(default_factory=list)
    classification: list[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return total_loss(self)


def total_loss(report: LossReport) -> float:
    """Sum of boundary and classification losses over all layers."""
    return float(sum(report.boundary) + sum(report.classification))


class Model:
    """Embedding tables, encoder layers, and per-layer prediction heads."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.tables = EmbeddingTables.init(config, rng)
        self.layers = [
            TransformerLayer.init(config.hidden, rng)
            for _ in range(config.base_layers + config.word_layers)
        ]
        self.heads = [
            LayerHeads.init(config.hidden, config.type_count, rng)
            for _ in range(config.word_layers)
        ]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.tables.named("emb")
        for i, layer in enumerate(self.layers):
            out += layer.named(f"layer{i}")
        for i, heads in enumerate(self.heads):
            out += heads.named(f"head{i}")
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def forward(
        self, token_ids
    ) -> tuple[LayerOutputs, list[tuple[BoundaryScores, TypeDistribution]]]:
        """Encode and run every word-level layer's heads."""
        outputs = encode(build_input(token_ids, self.tables), len(token_ids),
                         self.layers, self.config)
        head_outs = []
        for h_w, h_q, heads in zip(outputs.word, outputs.query, self.heads):
            scores = boundary_pointer(h_q, h_w, heads)
            types = entity_classifier(h_q, h_w, scores, heads)
            head_outs.append((scores, types))
        return outputs, head_outs

    def predict(self, token_ids, loc_threshold: float, cls_threshold: float) -> list[Prediction]:
        """Decode entities from the final layer only."""
        with no_grad():
            _, head_outs = self.forward(token_ids)
        scores, types = head_outs[-1]
        return decode_entities(scores, types, loc_threshold, cls_threshold)


# ---------------------------------------------------------------------------
# losses


def boundary_loss(
    scores: BoundaryScores,
    labels: list[EntityAnnotation | None],
    sentence_length: int,
) -> Tensor:
    """Binary cross entropy of both boundary maps against one-hot targets.

    Queries labeled None carry no boundary target and are excluded; the
    classification loss alone supervises them.
    """
    m, n = scores.left.shape
    if n != sentence_length:
        raise AnnotationError(f"scores cover {n} words, sentence has {sentence_length}")
    row_mask = np.zeros((m, 1))
    left_target = np.zeros((m, n))
    right_target = np.zeros((m, n))
    for i, label in enumerate(labels):
        if label is None:
            continue
        if label.right >= n:
            raise AnnotationError(f"label span ({label.left}, {label.right}) outside {n} words")
        row_mask[i, 0] = 1.0
        left_target[i, label.left] = 1.0
        right_target[i, label.right] = 1.0
    if not row_mask.any():
        return Tensor(0.0)
    return add(
        bce_with_logits(scores.left_logits, left_target, row_mask),
        bce_with_logits(scores.right_logits, right_target, row_mask),
    )


def classification_loss(
    types: TypeDistribution, labels: list[EntityAnnotation | None]
) -> Tensor:
    """Cross entropy over the type inventory plus None, summed over queries."""
    m, classes = types.logits.shape
    none_id = classes - 1
    one_hot = np.zeros((m, classes))
    for i, label in enumerate(labels):
        target = none_id if label is None else label.type_id
        if target >= classes:
            raise AnnotationError(f"label type {target} outside {classes} classes")
        one_hot[i, target] = 1.0
    return softmax_cross_entropy(types.logits, one_hot)


def sentence_loss(
    head_outs: list[tuple[BoundaryScores, TypeDistribution]],
    labels_per_layer: list[list[EntityAnnotation | None]],
    sentence_length: int,
) -> tuple[Tensor, LossReport]:
    """Total per-sentence loss: boundary + classification at every layer."""
    report = LossReport()
    total: Tensor | None = None
    for (scores, types), labels in zip(head_outs, labels_per_layer):
        l_b = boundary_loss(scores, labels, sentence_length)
        l_t = classification_loss(types, labels)
        report.boundary.append(l_b.item())
        report.classification.append(l_t.item())
        layer_total = add(l_b, l_t)
        total = layer_total if total is None else add(total, layer_total)
    assert total is not None
    return total, report


# ---------------------------------------------------------------------------
# label assignment orchestration


def _occurrence_order(gold: list[EntityAnnotation]) -> list[EntityAnnotation]:
    return sorted(gold, key=lambda e: (e.left, e.right, e.type_id))


def assign_labels_per_layer(
    head_outs: list[tuple[BoundaryScores, TypeDistribution]],
    gold: list[EntityAnnotation],
    config: TrainConfig,
    query_count: int,
    rng: np.random.Generator,
) -> list[list[EntityAnnotation | None]]:
    """Per-layer query labels under the configured assignment scheme.

    Dynamic mode matches each layer's own predictions (or reuses the final
    layer's matching when ``share_final_assignment``); static mode hands
    entity k to query k in occurrence order. Sentences with more entities
    than queries keep the first ``query_count`` in occurrence order.
    """
    depth = len(head_outs)
    if not gold:
        return [[None] * query_count for _ in range(depth)]
    usable = gold
    if len(gold) > query_count:
        usable = _occurrence_order(gold)[:query_count]

    if config.assignment_mode == "static":
        ordered = _occurrence_order(usable)
        labels = [ordered[i] if i < len(ordered) else None for i in range(query_count)]
        return [list(labels) for _ in range(depth)]

    def solve_layer(scores, types):
        if config.quantity_mode == "one_to_one":
            quantities = QuantityVector(np.ones(len(usable), dtype=np.int64))
        else:
            quantities = allocate_quantities(len(usable), query_count, config.ratio, rng)
        cost = compute_cost_matrix(scores, types, usable)
        result = solve_one_to_many_lap(cost, quantities)
        return labels_from_assignment(result, usable)

    if config.share_final_assignment:
        final = solve_layer(*head_outs[-1])
        return [list(final) for _ in range(depth)]
    return [solve_layer(scores, types) for scores, types in head_outs]


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamOptimizer:
    """Adam with per-parameter moment accumulators."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float, max_grad_norm: float | None = None) -> None:
        self.step_count += 1
        grads = {name: p.grad for name, p in self.params if p.grad is not None}
        if max_grad_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > max_grad_norm > 0:
                scale = max_grad_norm / norm
                grads = {name: g * scale for name, g in grads.items()}
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.m:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


def linear_warmup_decay(step: int, total_steps: int, peak: float,
                        warmup_fraction: float) -> float:
    """Ramp linearly to the peak rate, then decay linearly toward zero."""
    warmup = int(round(total_steps * warmup_fraction))
    if step < warmup:
        return peak * (step + 1) / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return peak
    return peak * (1.0 - (step - warmup) / remaining)


# ---------------------------------------------------------------------------
# training loop


def train_epoch(
    model: Model,
    encoded: list[np.ndarray],
    golds: list[list[EntityAnnotation]],
    optimizer: AdamOptimizer,
    config: TrainConfig,
    rng: np.random.Generator,
    epoch: int,
    step_offset: int,
    total_steps: int,
) -> tuple[dict, int]:
    """One pass over seeded-shuffled batches; returns epoch metrics.

    The reported train F1 is decoded from the final-layer outputs of the
    training forward passes (the model as it moves through the epoch).
    """
    order = rng.permutation(len(encoded))
    step = step_offset
    losses = []
    predictions: list[list[Prediction]] = [[] for _ in encoded]
    lr = linear_warmup_decay(step, total_steps, config.learning_rate, config.warmup_fraction)
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        model.zero_grad()
        batch_total: Tensor | None = None
        for idx in batch:
            _, head_outs = model.forward(encoded[idx])
            labels = assign_labels_per_layer(
                head_outs, golds[idx], config, model.config.queries, rng
            )
            loss, _ = sentence_loss(head_outs, labels, len(encoded[idx]))
            batch_total = loss if batch_total is None else add(batch_total, loss)
            final_scores, final_types = head_outs[-1]
            predictions[idx] = decode_entities(
                final_scores, final_types, config.loc_threshold, config.cls_threshold
            )
        assert batch_total is not None
        batch_mean = mul(batch_total, 1.0 / len(batch))
        value = batch_mean.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
        backward(batch_mean)
        lr = linear_warmup_decay(step, total_steps, config.learning_rate, config.warmup_fraction)
        optimizer.step(lr, config.max_grad_norm)
        losses.append(value)
        step += 1
    report = evaluate_corpus(predictions, golds)
    metrics = {
        "epoch": epoch,
        "loss": float(np.mean(losses)),
        "f1": report.ner.f1,
        "lr": lr,
    }
    return metrics, step


def train(
    model: Model,
    examples: list[SentenceExample],
    meta: DatasetMeta,
    config: TrainConfig,
    on_epoch=None,
    stop_f1: float | None = None,
    optimizer: AdamOptimizer | None = None,
) -> list[dict]:
    """Full training run; deterministic given the config seed.

    ``stop_f1`` optionally ends training early once the epoch's train F1
    reaches the given value. Passing an optimizer lets the caller keep its
    moment state (for checkpointing).
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    encoded = [meta.encode(ex.tokens) for ex in examples]
    golds = [list(ex.entities) for ex in examples]
    rng = np.random.default_rng(config.seed)
    if optimizer is None:
        optimizer = AdamOptimizer(model.named_parameters())
    batches_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    history = []
    step = 0
    for epoch in range(config.epochs):
        metrics, step = train_epoch(
            model, encoded, golds, optimizer, config, rng, epoch, step, total_steps
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        if stop_f1 is not None and metrics["f1"] >= stop_f1:
            break
    return history


def evaluate_model(
    model: Model,
    examples: list[SentenceExample],
    meta: DatasetMeta,
    loc_threshold: float,
    cls_threshold: float,
) -> tuple[EvalReport, list[list[Prediction]]]:
    """Decode every sentence at the final layer and score against gold."""
    predictions = [
        model.predict(meta.encode(ex.tokens), loc_threshold, cls_threshold)
        for ex in examples
    ]
    report = evaluate_corpus(predictions, [list(ex.entities) for ex in examples])
    return report, predictions


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: Model, meta: DatasetMeta,
                    optimizer: AdamOptimizer | None = None) -> None:
    """Single-file archive: format tag, config, vocabulary, parameters,
    and (when given) optimizer state."""
    words = [None] * len(meta.vocab)
    for word, idx in meta.vocab.items():
        words[idx] = word
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "types": meta.types,
        "words": words,
    }
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        header["optimizer_step"] = optimizer.step_count
        for name in optimizer.m:
            arrays[f"adam_m/{name}"] = optimizer.m[name]
            arrays[f"adam_v/{name}"] = optimizer.v[name]
    arrays["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Model, DatasetMeta, dict | None]:
    """Rebuild the model, metadata, and optional optimizer state."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if "header" not in archive:
        raise CheckpointError(f"{path} is not a model checkpoint")
    header = json.loads(bytes(archive["header"].tobytes()).decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    config = ModelConfig(**header["config"])
    model = Model(config)
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in archive:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        p.data[...] = archive[key]
    meta = DatasetMeta(
        types=list(header["types"]),
        vocab={word: idx for idx, word in enumerate(header["words"])},
    )
    opt_state = None
    if "optimizer_step" in header:
        opt_state = {
            "step": header["optimizer_step"],
            "m": {name: archive[f"adam_m/{name}"] for name, _ in model.named_parameters()},
            "v": {name: archive[f"adam_v/{name}"] for name, _ in model.named_parameters()},
        }
    return model, meta, opt_state


# ---------------------------------------------------------------------------
# full-loss gradient verification


def model_gradcheck(
    seed: int,
    eps: float = 1e-5,
    tokens: int = 3,
    queries: int = 2,
    type_count: int = 2,
    hidden: int = 8,
    base_layers: int = 1,
    word_layers: int = 2,
    inject_error: bool = False,
) -> float:
    """Max relative error of the full multi-layer loss over every parameter.

    The label assignment is computed once at the evaluation point and then
    frozen: within a training step the assignment is a constant, and freezing
    it keeps the checked function smooth. Parameters are resampled to a
    generic O(1) scale so no coordinate sits at the finite-difference noise
    floor. ``inject_error`` adds a value-only dependence on one parameter
    (a deliberately missing gradient rule) as a negative control.

    Pipeline stages that are constants with respect to the checked parameter
    (layer prefixes, other layers' losses) are cached; recomputing them would
    produce bitwise-identical values, so the reported errors are unchanged.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        hidden=hidden,
        queries=queries,
        base_layers=base_layers,
        word_layers=word_layers,
        heads=1,
        vocab_size=tokens + 2,
        max_len=tokens,
        type_count=type_count,
        seed=seed,
    )
    model = Model(config, rng)
    for name, p in model.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = 1.0 + rng.normal(0.0, 0.2, size=p.shape)
        else:
            p.data[...] = rng.normal(0.0, 0.35, size=p.shape)
    token_ids = rng.integers(2, config.vocab_size, size=tokens)
    gold = [
        EntityAnnotation(0, tokens - 1, int(rng.integers(type_count))),
        EntityAnnotation(1, 1, int(rng.integers(type_count))),
    ]
    train_config = TrainConfig(seed=seed)
    _, head_outs = model.forward(token_ids)
    labels = assign_labels_per_layer(
        head_outs, gold, train_config, queries, np.random.default_rng(seed)
    )
    mask = build_one_way_mask(tokens, queries, config.query_interaction, config.one_way)
    depth = len(model.layers)
    leak = model.layers[0].wq

    def layer_loss(tau: int, h_w, h_q) -> Tensor:
        heads = model.heads[tau]
        scores = boundary_pointer(h_q, h_w, heads)
        types = entity_classifier(h_q, h_w, scores, heads)
        return add(boundary_loss(scores, labels[tau], tokens),
                   classification_loss(types, labels[tau]))

    def run(x, start: int, live_head: int | None) -> Tensor:
        """Loss with layers [start, depth) live and earlier stages constant.

        ``live_head`` recomputes that layer's loss from its cached encoding
        (for checking head parameters, which the encoder does not see).
        """
        total: Tensor | None = None
        for tau in range(word_layers):
            index = base_layers + tau
            if index >= start:
                while start <= index:
                    x = one_way_self_attention(x, mask, model.layers[start], config.heads)
                    start += 1
                piece = layer_loss(tau, narrow(x, 0, 0, tokens), narrow(x, 0, tokens, queries))
            elif tau == live_head:
                h = entering[index + 1]
                piece = layer_loss(tau, narrow(h, 0, 0, tokens), narrow(h, 0, tokens, queries))
            else:
                piece = Tensor(cached_losses[tau])
            total = piece if total is None else add(total, piece)
        assert total is not None
        if inject_error:
            total = add(total, Tensor(0.05 * float(leak.data.sum())))
        return total

    def stage_cache():
        """Activations entering each layer plus per-layer loss values."""
        with no_grad():
            x = build_input(token_ids, model.tables)
            acts = [x]
            losses = []
            for index, layer in enumerate(model.layers):
                x = one_way_self_attention(x, mask, layer, config.heads)
                acts.append(x)
                if index >= base_layers:
                    tau = index - base_layers
                    losses.append(
                        layer_loss(tau, narrow(x, 0, 0, tokens),
                                   narrow(x, 0, tokens, queries)).item()
                    )
        return acts, losses

    entering, cached_losses = stage_cache()

    def make_loss_fn(start: int, live_head: int | None):
        if start == 0:
            return lambda _: run(build_input(token_ids, model.tables), 0, None)
        return lambda _: run(entering[start].detach(), start, live_head)

    worst = 0.0
    for name, p in model.named_parameters():
        if name.startswith("emb."):
            start, live_head = 0, None
        elif name.startswith("layer"):
            start, live_head = int(name.split(".")[0][len("layer"):]), None
        else:
            start, live_head = depth, int(name.split(".")[0][len("head"):])
        err = grad_check(make_loss_fn(start, live_head), p, eps)
        worst = max(worst, err)
    return worst
