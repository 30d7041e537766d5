import numpy as np
import pytest

from varikit.backbone import (
    BackboneConfig,
    BackboneTrainConfig,
    FormatError,
    InputError,
    Taps,
    TrainingError,
    accuracy,
    encode,
    init_weights,
    load_backbone,
    save_backbone,
    train_backbone,
)
from varikit.tensor import Tensor
from varikit.toy import make_toy_task


def test_config_invariants():
    cfg = BackboneConfig(d=12, n_heads=3, ffn_mult=4)
    assert cfg.d_ff == 48
    with pytest.raises(ValueError):
        BackboneConfig(d=10, n_heads=3)


def test_single_token_output_shape(small_weights):
    assert encode([3], small_weights).shape == (1, 16)


def test_batch_output_shape(small_weights):
    assert encode(np.zeros((3, 7), dtype=int), small_weights).shape == (3, 7, 16)


def test_zero_ffn_equals_attention_only_stack(small_weights):
    params = {k: Tensor(v.data) for k, v in small_weights.params.items()}
    for l in range(2):
        for name in ("w1", "b1", "w2", "b2"):
            key = f"layers.{l}.{name}"
            params[key] = Tensor(np.zeros(params[key].shape, dtype=np.float32))
    w = type(small_weights)(small_weights.config, params, frozen=True)

    class AttentionOnly:
        def attention(self, layer, x, sublayer):
            return sublayer(x)

        def ffn(self, layer, x, sublayer):
            return Tensor(np.zeros(x.shape, dtype=x.dtype))

        def keys_values(self, layer, k, v):
            return k, v

    toks = [1, 5, 9, 2]
    assert np.array_equal(encode(toks, w).data, encode(toks, w, hooks=AttentionOnly()).data)


def test_identical_inputs_identical_outputs(small_weights):
    toks = np.array([[4, 8, 15, 16], [4, 8, 15, 16]])
    out = encode(toks, small_weights).data
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out, encode(toks, small_weights).data)


def test_taps_do_not_change_outputs_and_expose_sites(small_weights):
    toks = np.array([[1, 2, 3, 4, 5]])
    taps = Taps()
    plain = encode(toks, small_weights).data
    tapped = encode(toks, small_weights, taps=taps).data
    assert np.array_equal(plain, tapped)
    for l in range(2):
        assert taps.get(l, "ffn_pre_act").shape == (1, 5, 64)
        assert taps.get(l, "attn_k").shape == (1, 5, 16)
        probs = taps.get(l, "attn_probs")
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_input_errors(small_weights):
    with pytest.raises(InputError):
        encode(list(range(33)), small_weights)
    with pytest.raises(InputError):
        encode([0, 32], small_weights)
    with pytest.raises(InputError):
        encode([-1], small_weights)


def test_checkpoint_round_trip(tmp_path, small_weights):
    path = tmp_path / "b.vbkb"
    save_backbone(small_weights, path)
    back = load_backbone(path)
    assert back.config == small_weights.config
    assert back.frozen and back.checksum() == small_weights.checksum()
    raw = path.read_bytes()
    assert raw[:4] == b"VBKB"


def test_checkpoint_rejects_corruption(tmp_path, small_weights):
    path = tmp_path / "b.vbkb"
    save_backbone(small_weights, path)
    raw = path.read_bytes()
    (tmp_path / "magic.vbkb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as exc:
        load_backbone(tmp_path / "magic.vbkb")
    assert exc.value.offset == 0
    (tmp_path / "short.vbkb").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_backbone(tmp_path / "short.vbkb")


def _tiny_task():
    return make_toy_task("seq_cls", 0, 64, seq_len=8)


def test_zero_steps_returns_initialisation():
    cfg = BackboneConfig(d=16, n_heads=2)
    task = _tiny_task()
    a = train_backbone(task, cfg, BackboneTrainConfig(steps=0), seed=3)
    b = init_weights(cfg, np.random.default_rng(3), "seq_cls", 2)
    assert a.frozen
    assert a.checksum() == b.checksum()


def test_training_is_deterministic():
    cfg = BackboneConfig(d=16, n_heads=2)
    task = _tiny_task()
    hyper = BackboneTrainConfig(steps=5, batch_size=8)
    assert train_backbone(task, cfg, hyper, 7).checksum() == train_backbone(task, cfg, hyper, 7).checksum()


def test_divergence_raises_with_step():
    cfg = BackboneConfig(d=16, n_heads=2)
    with pytest.raises(TrainingError) as exc:
        train_backbone(_tiny_task(), cfg, BackboneTrainConfig(steps=50, learning_rate=float("nan")), 0)
    assert exc.value.step is not None


@pytest.mark.slow
def test_seq_cls_backbone_beats_majority():
    cfg = BackboneConfig()
    train = make_toy_task("seq_cls", 11, 2000)
    evalset = make_toy_task("seq_cls", 12, 500)
    weights = train_backbone(train, cfg, BackboneTrainConfig(steps=600), seed=0)
    acc = accuracy(weights, evalset)
    assert acc >= 0.95 > evalset.majority_baseline()
