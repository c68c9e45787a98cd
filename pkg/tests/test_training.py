import math

import numpy as np
import pytest

from iqner.data import (
    AnnotationError,
    DatasetMeta,
    EntityAnnotation,
    SyntheticSpec,
    generate_synthetic,
)
from iqner.encoder import ModelConfig
from iqner.heads import BoundaryScores, TypeDistribution
from iqner.tensor import Tensor, backward, tsum, mul
from iqner.training import (
    AdamOptimizer,
    LossReport,
    Model,
    TrainConfig,
    assign_labels_per_layer,
    boundary_loss,
    classification_loss,
    linear_warmup_decay,
    load_checkpoint,
    model_gradcheck,
    save_checkpoint,
    sentence_loss,
    total_loss,
    train,
    CheckpointError,
)


def scores_from_logits(left, right):
    from iqner.tensor import sigmoid

    lt = Tensor(np.asarray(left, dtype=np.float64))
    rt = Tensor(np.asarray(right, dtype=np.float64))
    return BoundaryScores(left_logits=lt, right_logits=rt, left=sigmoid(lt), right=sigmoid(rt))


def types_from_logits(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return TypeDistribution(logits=Tensor(logits), probs=e / e.sum(axis=-1, keepdims=True))


def test_boundary_loss_zero_at_perfect_prediction():
    n = 4
    left = np.full((1, n), -1000.0)
    right = np.full((1, n), -1000.0)
    left[0, 1] = 1000.0
    right[0, 2] = 1000.0
    scores = scores_from_logits(left, right)
    loss = boundary_loss(scores, [EntityAnnotation(1, 2, 0)], n)
    assert loss.item() == 0.0


def test_boundary_loss_closed_form_at_half():
    n = 6
    scores = scores_from_logits(np.zeros((3, n)), np.zeros((3, n)))
    labels = [EntityAnnotation(0, 2, 0), None, None]
    loss = boundary_loss(scores, labels, n)
    assert loss.item() == pytest.approx(2 * n * math.log(2), abs=1e-9)


def test_boundary_loss_all_none_is_zero():
    scores = scores_from_logits(np.zeros((2, 3)), np.zeros((2, 3)))
    assert boundary_loss(scores, [None, None], 3).item() == 0.0


def test_boundary_loss_rejects_out_of_range_label():
    scores = scores_from_logits(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(AnnotationError):
        boundary_loss(scores, [EntityAnnotation(0, 5, 0)], 3)


def test_classification_loss_zero_at_one_hot():
    logits = np.zeros((2, 3))
    logits[0, 1] = 1000.0
    logits[1, 2] = 1000.0
    types = types_from_logits(logits)
    labels = [EntityAnnotation(0, 0, 1), None]
    assert classification_loss(types, labels).item() == pytest.approx(0.0, abs=1e-12)


def test_classification_loss_uniform_closed_form():
    m, classes = 5, 4  # three types plus None
    types = types_from_logits(np.zeros((m, classes)))
    labels = [None] * m
    assert classification_loss(types, labels).item() == pytest.approx(
        m * math.log(classes), abs=1e-9
    )


def test_classification_loss_single_query_half():
    types = types_from_logits(np.zeros((1, 2)))
    assert classification_loss(types, [EntityAnnotation(0, 0, 0)]).item() == pytest.approx(
        math.log(2), abs=1e-12
    )


def test_total_loss_arithmetic():
    assert total_loss(LossReport(boundary=[1.0], classification=[2.0])) == 3.0
    assert total_loss(LossReport(boundary=[0.0, 0.0], classification=[0.0, 0.0])) == 0.0
    assert total_loss(LossReport(boundary=[1.0, 3.0], classification=[2.0, 4.0])) == 10.0


def _stub_head_outs_for_cost():
    # cost matrix [[-0.9, -0.1], [-0.5, -0.6], [-0.2, -0.8]] via type probs only
    left = np.zeros((3, 2))
    right = np.zeros((3, 2))
    scores = BoundaryScores(
        left_logits=Tensor(left), right_logits=Tensor(right),
        left=Tensor(left), right=Tensor(right),
    )
    probs = np.array([[0.9, 0.1, 0.0], [0.5, 0.6, 0.0], [0.2, 0.8, 0.0]])
    types = TypeDistribution(logits=Tensor(np.zeros((3, 3))), probs=probs)
    return [(scores, types)]


GOLD_PAIR = [EntityAnnotation(0, 0, 0), EntityAnnotation(1, 1, 1)]


def test_assign_empty_gold_all_none():
    head_outs = _stub_head_outs_for_cost()
    labels = assign_labels_per_layer(head_outs, [], TrainConfig(), 3, np.random.default_rng(0))
    assert labels == [[None, None, None]]


def test_assign_static_mode_order_of_occurrence():
    head_outs = _stub_head_outs_for_cost()
    config = TrainConfig(assignment_mode="static")
    labels = assign_labels_per_layer(head_outs, GOLD_PAIR, config, 5, np.random.default_rng(0))
    assert labels == [[GOLD_PAIR[0], GOLD_PAIR[1], None, None, None]]


def test_assign_dynamic_matches_brute_force_optimum():
    head_outs = _stub_head_outs_for_cost()
    config = TrainConfig(quantity_mode="one_to_one")
    labels = assign_labels_per_layer(head_outs, GOLD_PAIR, config, 3, np.random.default_rng(0))
    assert labels == [[GOLD_PAIR[0], None, GOLD_PAIR[1]]]


def test_assign_one_to_many_counts_match_quantities():
    rng = np.random.default_rng(5)
    m, n, classes = 8, 4, 3
    left = rng.uniform(size=(m, n))
    scores = BoundaryScores(
        left_logits=Tensor(left), right_logits=Tensor(left),
        left=Tensor(left), right=Tensor(rng.uniform(size=(m, n))),
    )
    raw = rng.uniform(size=(m, classes))
    types = TypeDistribution(logits=Tensor(raw), probs=raw / raw.sum(1, keepdims=True))
    gold = [EntityAnnotation(0, 1, 0), EntityAnnotation(2, 3, 1)]
    config = TrainConfig(ratio=0.75)
    labels = assign_labels_per_layer([(scores, types)], gold, config, m, np.random.default_rng(7))
    counts = {id(g): 0 for g in gold}
    for lab in labels[0]:
        if lab is not None:
            counts[id(lab)] += 1
    assert sum(counts.values()) == round(m * 0.75)
    assert all(c >= (round(m * 0.75) // len(gold)) for c in counts.values())

    one = TrainConfig(quantity_mode="one_to_one")
    labels1 = assign_labels_per_layer([(scores, types)], gold, one, m, np.random.default_rng(7))
    for g in gold:
        assert sum(1 for lab in labels1[0] if lab is g) == 1


def test_assign_share_final_assignment():
    head_outs = _stub_head_outs_for_cost() * 3
    config = TrainConfig(quantity_mode="one_to_one", share_final_assignment=True)
    labels = assign_labels_per_layer(head_outs, GOLD_PAIR, config, 3, np.random.default_rng(0))
    assert labels[0] == labels[1] == labels[2]


def test_assign_more_entities_than_queries_keeps_first_by_occurrence():
    left = np.zeros((2, 4))
    scores = BoundaryScores(left_logits=Tensor(left), right_logits=Tensor(left),
                            left=Tensor(left), right=Tensor(left))
    probs = np.full((2, 3), 1 / 3)
    types = TypeDistribution(logits=Tensor(np.zeros((2, 3))), probs=probs)
    gold = [EntityAnnotation(3, 3, 0), EntityAnnotation(0, 0, 1), EntityAnnotation(1, 2, 0)]
    config = TrainConfig(quantity_mode="one_to_one")
    labels = assign_labels_per_layer([(scores, types)], gold, config, 2, np.random.default_rng(1))
    assigned = {lab for lab in labels[0] if lab is not None}
    assert assigned == {gold[1], gold[2]}  # occurrence order: (0,0), (1,2), then (3,3)


def test_linear_warmup_decay_schedule():
    assert linear_warmup_decay(0, 100, 1.0, 0.0) == 1.0  # no warmup: starts at peak
    assert linear_warmup_decay(0, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert linear_warmup_decay(9, 100, 1.0, 0.1) == pytest.approx(1.0)
    assert linear_warmup_decay(99, 100, 1.0, 0.1) == pytest.approx(1.0 / 90)


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([10.0, -4.0]), tracked=True)
    opt = AdamOptimizer([("w", w)])
    for _ in range(400):
        w.zero_grad()
        diff = w - Tensor([3.0, 1.0])
        backward(tsum(mul(diff, diff)))
        opt.step(0.1)
    assert np.allclose(w.data, [3.0, 1.0], atol=1e-3)


def _tiny_fixture():
    spec = SyntheticSpec(sentences=8, vocab_size=20, min_length=5, max_length=7,
                         type_count=2, nesting_ratio=0.2, max_entities=2)
    examples, meta = generate_synthetic(spec, seed=0)
    config = ModelConfig(hidden=16, queries=4, base_layers=1, word_layers=1, heads=2,
                         vocab_size=meta.vocab_size, max_len=8, type_count=meta.type_count,
                         seed=0)
    return examples, meta, config


def test_train_is_deterministic_and_loss_decreases():
    examples, meta, config = _tiny_fixture()
    tconfig = TrainConfig(epochs=8, learning_rate=3e-3, batch_size=4, seed=1)
    h1 = train(Model(config), examples, meta, tconfig)
    h2 = train(Model(config), examples, meta, tconfig)
    assert h1 == h2
    assert h1[-1]["loss"] < h1[0]["loss"]


def test_train_rejects_empty_dataset():
    _, meta, config = _tiny_fixture()
    with pytest.raises(ValueError):
        train(Model(config), [], meta, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    examples, meta, config = _tiny_fixture()
    model = Model(config)
    tconfig = TrainConfig(epochs=2, batch_size=4, seed=3)
    history = train(model, examples, meta, tconfig)
    assert history
    path = tmp_path / "model.npz"
    opt = AdamOptimizer(model.named_parameters())
    opt.step_count = 17
    save_checkpoint(path, model, meta, opt)
    loaded, loaded_meta, opt_state = load_checkpoint(path)
    assert loaded_meta.types == meta.types
    assert loaded_meta.vocab == meta.vocab
    assert opt_state["step"] == 17
    for (name_a, a), (name_b, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(a.data, b.data)
    ids = meta.encode(examples[0].tokens)
    assert model.predict(ids, 0.0, 0.0) == loaded.predict(ids, 0.0, 0.0)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_model_gradcheck_passes_and_negative_control_fails():
    assert model_gradcheck(seed=0) < 1e-4
    assert model_gradcheck(seed=0, inject_error=True) > 1e-2


def test_model_gradcheck_rejects_bad_eps():
    with pytest.raises(ValueError):
        model_gradcheck(seed=0, eps=0.0)


def test_inference_uses_only_the_final_layer():
    examples, meta, config = _tiny_fixture()
    config2 = ModelConfig(**{**config.__dict__, "word_layers": 2})
    model = Model(config2)
    ids = meta.encode(examples[0].tokens)
    before = model.predict(ids, 0.0, 0.0)
    for _, p in model.heads[0].named("head0"):
        p.data[...] += 7.5  # earlier layer's head parameters are inference-dead
    after = model.predict(ids, 0.0, 0.0)
    assert before == after
