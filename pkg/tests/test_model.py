import hashlib
import math

import numpy as np
import pytest

from clwf.errors import ContractError, DimensionError, DuplicateTaskError, UnknownTaskError
from clwf.factorized import param_overhead
from clwf.gradcheck import check_model
from clwf.model import ModelConfig, ToyEncoderClassifier
from oracles import dense_reference

SMALL = ModelConfig(d_in=6, d_model=16, n_blocks=2, n_classes=5, k=2)


def _model(cfg=SMALL, tasks=("a", "b"), scale=0.3):
    model = ToyEncoderClassifier(cfg, seed=1)
    for i, task in enumerate(tasks):
        model.add_language(task, scale, np.random.default_rng(10 + i))
    return model


def _param_hash(model):
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def test_zero_network_gives_uniform_logits():
    model = _model(scale=0.0)
    for t in model.named_parameters().values():
        t.data[...] = 0.0
    logits = model.logits(np.random.default_rng(0).normal(size=(3, 4, 6)), "a")
    assert np.array_equal(logits, np.zeros((3, 5)))


@pytest.mark.parametrize("use_attention", [False, True])
def test_dense_folding_reproduces_logits(use_attention):
    cfg = ModelConfig(d_in=6, d_model=16, n_blocks=2, n_classes=5, k=2, use_attention=use_attention)
    model = _model(cfg)
    model.add_language("plain", factorized=False)
    x = np.random.default_rng(2).normal(size=(100, 4, 6))
    for task in ("a", "b", "plain"):
        assert np.max(np.abs(model.logits(x, task) - dense_reference(model, x, task))) <= 1e-9


def test_frame_permutation_invariance_without_attention():
    model = _model()
    x = np.random.default_rng(3).normal(size=(2, 5, 6))
    perm = np.random.default_rng(4).permutation(5)
    assert np.allclose(model.logits(x, "a"), model.logits(x[:, perm], "a"), atol=1e-12)


def test_single_sequence_gives_one_row():
    model = _model()
    x = np.random.default_rng(5).normal(size=(4, 6))
    assert model.logits(x, "a").shape == (1, 5)
    assert isinstance(model.predict(x, "a"), int)


def test_uniform_logits_loss_is_log_classes():
    cfg = ModelConfig(d_in=3, d_model=4, n_blocks=1, n_classes=10, k=1)
    model = ToyEncoderClassifier(cfg)
    model.add_language("a", 0.0)
    model.out_w.data[...] = 0.0
    loss = model.loss(np.ones((2, 3, 3)), [1, 7], "a").item()
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_confident_logits_drive_loss_to_zero():
    cfg = ModelConfig(d_in=3, d_model=4, n_blocks=1, n_classes=3, k=1)
    model = ToyEncoderClassifier(cfg)
    model.add_language("a", 0.0)
    model.out_w.data[...] = 0.0
    model.out_b.data[:] = [0.0, 60.0, 0.0]
    assert model.loss(np.ones((1, 3, 3)), [1], "a").item() < 1e-20


def test_loss_rejects_empty_batch_and_bad_inputs():
    model = _model()
    with pytest.raises(ContractError):
        model.loss(np.zeros((0, 4, 6)), [], "a")
    with pytest.raises(UnknownTaskError):
        model.logits(np.zeros((1, 4, 6)), "zz")
    with pytest.raises(DimensionError):
        model.logits(np.zeros((1, 4, 7)), "a")


@pytest.mark.parametrize("use_attention", [False, True])
def test_model_gradients_match_finite_differences(use_attention):
    cfg = ModelConfig(d_in=6, d_model=16, n_blocks=2, n_classes=5, k=2, use_attention=use_attention)
    err, n = check_model(np.random.default_rng(7), cfg, coords=20, eps=1e-5)
    assert n > 0
    assert err <= 1e-4


def test_add_language_isolation_and_count():
    model = _model()
    x = np.random.default_rng(6).normal(size=(3, 4, 6))
    before_hash = _param_hash(model)
    before_logits = model.logits(x, "a").copy()
    before_count = model.num_parameters()
    names = set(model.named_parameters())
    model.add_language("c", 0.5, np.random.default_rng(0))
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters().items()):
        if name in names:
            h.update(name.encode())
            h.update(t.data.tobytes())
    assert h.hexdigest() == before_hash
    assert model.logits(x, "a").tobytes() == before_logits.tobytes()
    expected = sum(param_overhead(l.k, l.d_in, l.d_out).added_per_task for l in model.factorized_layers())
    assert model.num_parameters() - before_count == expected == model.language_overhead()


def test_duplicate_language_leaves_model_untouched():
    model = _model()
    before = _param_hash(model)
    with pytest.raises(DuplicateTaskError):
        model.add_language("a", 0.5, np.random.default_rng(0))
    assert _param_hash(model) == before


def test_output_projection_is_never_factorized():
    model = _model()
    assert all(not name.startswith("output_proj") for name in model.factor_parameters("a"))


def test_predict_argmax_and_ties():
    cfg = ModelConfig(d_in=2, d_model=2, n_blocks=1, n_classes=3, k=1)
    model = ToyEncoderClassifier(cfg)
    model.add_language("a", 0.0)
    model.out_w.data[...] = 0.0
    model.out_b.data[:] = [0.1, 0.9, 0.3]
    assert model.predict(np.zeros((2, 2)), "a") == 1
    model.out_b.data[:] = [0.5, 0.5, 0.1]
    assert model.predict(np.zeros((2, 2)), "a") == 0


def test_predict_agrees_with_softmax_argmax():
    model = _model()
    x = np.random.default_rng(8).normal(size=(20, 4, 6))
    logits = model.logits(x, "b")
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    assert np.array_equal(model.predict(x, "b"), probs.argmax(axis=1))


def test_unfactorized_task_uses_shared_weights_only():
    model = _model()
    model.add_language("shared", factorized=False)
    assert model.factor_parameters("shared") == {}
    for layer in model.factorized_layers():
        assert "shared" not in layer.factors


def test_dropout_is_off_by_default_and_validated():
    assert SMALL.dropout == 0.0
    with pytest.raises(ContractError):
        ModelConfig(dropout=1.0)
    cfg = ModelConfig(d_in=6, d_model=16, n_blocks=2, n_classes=5, k=2, dropout=0.3)
    model = _model(cfg)
    x = np.random.default_rng(9).normal(size=(4, 4, 6))
    noisy = model.forward(x, "a", dropout_rng=np.random.default_rng(0)).data
    assert not np.allclose(noisy, model.logits(x, "a"))
