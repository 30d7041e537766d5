import numpy as np
import pytest

from varikit.backbone import TrainingError, encode
from varikit.plugin import ARRAY_ORDER, identity_bundle, init_plugin, plugged_forward
from varikit.tensor import ContractError, Tape, Tensor
from varikit.toy import MARKER, make_toy_corpus, make_toy_task
from varikit.training import (
    TrainingConfig,
    adapt_plugin,
    combine_losses,
    distill_loss,
    evaluate_accuracy,
    evaluate_distill,
    pretrain_plugin,
)

from conftest import assert_grad_close, numeric_grad


def test_distill_loss_examples():
    out = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert distill_loss(out, out).item() == 0.0
    assert distill_loss(Tensor(np.zeros((2, 5, 3))), Tensor(np.ones((2, 5, 3)))).item() == 1.0
    with pytest.raises(ContractError):
        distill_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_teacher_receives_no_gradient():
    teacher = Tensor(np.zeros(4), requires_grad=True)
    student = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = distill_loss(teacher, student)
    tape.backward(loss)
    assert teacher.grad is None
    np.testing.assert_allclose(student.grad, 0.5)


def test_zero_lambda_total_equals_distill():
    ld, lt = Tensor(0.3), Tensor(2.0)
    assert combine_losses(ld, lt, 0.0).item() == ld.item()
    assert combine_losses(ld, lt, 0.5).item() == pytest.approx(1.3)


def _replaced(bundle, layer, name, arr):
    out = bundle.copy()
    setattr(out.layers[layer], name, Tensor(arr, dtype=np.float64))
    return out


@pytest.mark.parametrize("site", ["FFN", "ATT", "ATT_KV"])
def test_plugin_gradients_match_finite_differences(tiny_weights, site):
    rng = np.random.default_rng(11)
    bundle = init_plugin(8, 2, 4, site, 2, rng, dtype=np.float64)
    # nonzero biases so every path is exercised
    for lp in bundle.layers:
        for name in ARRAY_ORDER:
            t = getattr(lp, name)
            if t is not None and name.startswith("b_"):
                setattr(lp, name, Tensor(rng.normal(size=t.shape) * 0.1, dtype=np.float64))
    toks = rng.integers(0, 16, size=(2, 5))
    teacher = encode(toks, tiny_weights)

    def loss_of(b):
        return distill_loss(teacher, plugged_forward(toks, tiny_weights, b)).item()

    bundle.set_trainable(True)
    with Tape() as tape:
        loss = distill_loss(teacher, plugged_forward(toks, tiny_weights, bundle))
    tape.backward(loss)
    for l, lp in enumerate(bundle.layers):
        for name in ARRAY_ORDER:
            t = getattr(lp, name)
            if t is None:
                continue
            fd = numeric_grad(lambda a: loss_of(_replaced(bundle, l, name, a)), t.data.copy(), step=1e-6)
            assert_grad_close(t.grad, fd, rel=1e-4, floor=1e-8)


def test_zero_steps_leave_bundle_unchanged(tiny_weights):
    corpus = make_toy_corpus(0, 32, seq_len=8)
    corpus = type(corpus)(corpus.tokens % 16)
    b = init_plugin(8, 2, 4, "FFN", 2, np.random.default_rng(0), dtype=np.float64)
    out = pretrain_plugin(corpus, tiny_weights, b, TrainingConfig(stage="pretrain", steps=0))
    assert out.trained_stage == "pretrained"
    out.trained_stage = b.trained_stage
    assert out == b


def test_identity_plugin_has_zero_loss_every_step(tiny_weights):
    corpus = make_toy_corpus(0, 32, seq_len=8)
    corpus = type(corpus)(corpus.tokens % 16)
    b = identity_bundle(8, 4, "FFN", 2, dtype=np.float64)
    log = []
    out = pretrain_plugin(corpus, tiny_weights, b, TrainingConfig(stage="pretrain", steps=5, batch_size=4),
                          log.append)
    assert [r["distill_loss"] for r in log] == [0.0] * 5
    for a, c in zip(out.parameters(), b.parameters()):
        np.testing.assert_allclose(a.data, c.data, atol=1e-12)


def test_training_does_not_touch_backbone(tiny_weights):
    corpus = type(make_toy_corpus(0, 32, seq_len=8))(make_toy_corpus(0, 32, seq_len=8).tokens % 16)
    before = tiny_weights.checksum()
    b = init_plugin(8, 2, 4, "FFN", 2, np.random.default_rng(0), dtype=np.float64)
    out = pretrain_plugin(corpus, tiny_weights, b, TrainingConfig(stage="pretrain", steps=3, batch_size=4))
    assert tiny_weights.checksum() == before
    assert out != b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(tiny_weights):
    corpus = type(make_toy_corpus(0, 32, seq_len=8))(make_toy_corpus(0, 32, seq_len=8).tokens % 16)
    b = init_plugin(8, 2, 4, "FFN", 2, np.random.default_rng(0), dtype=np.float64)
    cfg = TrainingConfig(stage="pretrain", steps=10, batch_size=4, learning_rate=1e300)
    with pytest.raises(TrainingError) as exc:
        pretrain_plugin(corpus, tiny_weights, b, cfg)
    assert exc.value.step is not None and exc.value.step > 0


def test_stage_rules(tiny_weights):
    task = make_toy_task("token_tag", 0, 8, seq_len=8)
    task = type(task)(task.kind, task.tokens % 16, task.labels, 2)
    b = init_plugin(8, 2, 4, "FFN", 2, np.random.default_rng(0), dtype=np.float64)
    model = tiny_weights.with_head("token_tag", 2, np.random.default_rng(0)).freeze()
    done = adapt_plugin(task, model, b, TrainingConfig(steps=1, batch_size=2))
    assert done.trained_stage == "adapted"
    with pytest.raises(ValueError):
        adapt_plugin(task, model, done)
    with pytest.raises(ValueError):
        pretrain_plugin(None, tiny_weights, done)
    with pytest.raises(ValueError):
        TrainingConfig(lambda_task=-1)


def test_datasets_are_deterministic_and_balanced():
    a = make_toy_task("seq_cls", 5, 100)
    b = make_toy_task("seq_cls", 5, 100)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)
    assert a.labels.sum() == 50
    c1, c2 = make_toy_corpus(3, 20), make_toy_corpus(3, 20)
    assert np.array_equal(c1.tokens, c2.tokens)


def test_seq_cls_labels_are_majority_symbol():
    task = make_toy_task("seq_cls", 1, 200)
    ones = (task.tokens == 1).sum(axis=1)
    twos = (task.tokens == 2).sum(axis=1)
    assert (ones != twos).all()
    assert np.array_equal(task.labels, (ones > twos).astype(int))


def test_token_tag_labels_recount():
    task = make_toy_task("token_tag", 2, 50)
    for row, lab in zip(task.tokens, task.labels):
        seen = 0
        for tok, y in zip(row, lab):
            seen += tok == MARKER
            assert y == seen % 2


def test_evaluation_helpers_on_identity(tiny_weights):
    toks = np.random.default_rng(0).integers(0, 16, size=(6, 8))
    assert evaluate_distill(toks, tiny_weights, identity_bundle(8, 4, "FFN", 2, np.float64)) == 0.0
    assert evaluate_distill(toks, tiny_weights, None) == 0.0


@pytest.mark.slow
def test_pretraining_reduces_loss(trained):
    trained.bundle(2)
    pre = [r["distill_loss"] for r in trained.logs[(2, True, "learned", "learned")] if r["stage"] == "pretrain"]
    assert len(pre) == trained.cfg.pretrain_steps
    head = np.mean(pre[:10])
    tail = np.mean(pre[-10:])
    assert tail < 0.25 * head


@pytest.mark.slow
def test_identity_plugin_keeps_baseline_accuracy(trained):
    b = identity_bundle(trained.cfg.backbone.d, trained.cfg.r, "FFN", trained.cfg.backbone.n_layers)
    assert evaluate_accuracy(trained.data.eval, trained.task_model, b) == trained.baseline
