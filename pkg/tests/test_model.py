import numpy as np
import pytest

from xmac_edge import autodiff as ad
from xmac_edge.autodiff import Rng, Tensor
from xmac_edge.model import (
    AttentionSpec,
    ConfigError,
    IndexStageSpec,
    ModelConfig,
    StageSpec,
    build_model,
    forward,
    parameter_count,
    self_attention_block,
)

from conftest import numeric_grad, rel_error

S = 32  # small input keeps these tests fast


def cfg(**kw):
    kw.setdefault("input_size", (S, S))
    return ModelConfig(**kw)


def inputs(n=2, size=S, seed=0):
    r = np.random.default_rng(seed)
    return r.random((n, 3, size, size)).astype(np.float32), r.random((n, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------- parameters


def _conv(cin, cout, k):
    return cin * cout * k * k


def _bn(c):
    return 2 * c


def toy_count_by_hand() -> int:
    """Layer-by-layer count of the toy preset written out from the stage table."""
    total = _conv(3, 16, 3) + _bn(16)  # stem
    # fused stages: 3x3 expand to cin*2, 1x1 project
    for cin, cout in [(16, 24), (24, 24), (24, 48), (48, 48)]:
        hidden = cin * 2
        total += _conv(cin, hidden, 3) + _bn(hidden) + _conv(hidden, cout, 1) + _bn(cout)
    # separable stage: 1x1 expand to cin*4, depthwise 3x3, 1x1 project
    for cin, cout in [(48, 96), (96, 96)]:
        hidden = cin * 4
        total += _conv(cin, hidden, 1) + _bn(hidden) + hidden * 9 + _bn(hidden) + _conv(hidden, cout, 1) + _bn(cout)
    # index branch
    total += _conv(3, 16, 3) + _bn(16) + _conv(16, 32, 3) + _bn(32) + _conv(32, 96, 5) + _bn(96)
    total += _conv(192, 96, 1) + _bn(96)  # fusion
    total += 2 * (96 * 12 + 12) + (96 * 96 + 96) + 1  # attention q, k, v, gamma
    total += 96 * 6 + 6  # head
    return total


def test_toy_parameter_count_matches_hand_sum():
    m = build_model(ModelConfig(input_size=(64, 64)), 0)
    assert toy_count_by_hand() == 299_071
    assert parameter_count(m) == toy_count_by_hand()
    assert parameter_count(m) < 1_000_000


def test_parameter_count_single_linear():
    c = ModelConfig(input_size=(S, S), rgb_stages=[], stem_channels=10, index_branch_enabled=False,
                    attention=AttentionSpec(enabled=False))
    m = build_model(c, 0)
    head = m.params["head.weight"].size + m.params["head.bias"].size
    assert head == 66


def test_attention_adds_parameters():
    a = parameter_count(build_model(cfg(), 0))
    b = parameter_count(build_model(cfg(attention=AttentionSpec(enabled=False)), 0))
    assert b < a


def test_build_deterministic_and_num_classes():
    a, b = build_model(cfg(), 3), build_model(cfg(), 3)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert build_model(cfg(num_classes=2), 0).params["head.weight"].shape[0] == 2
    c = build_model(cfg(), 4)
    assert not np.array_equal(a.params["stem.conv.weight"].data, c.params["stem.conv.weight"].data)


def test_config_validation():
    with pytest.raises(ConfigError, match="RGB branch gives 4x4.*index branch gives 2x2"):
        cfg(input_size=(64, 64), index_stages=[IndexStageSpec(16, 2), IndexStageSpec(32, 2), IndexStageSpec(96, 8)]).validate()
    with pytest.raises(ConfigError):
        cfg(num_classes=1).validate()
    with pytest.raises(ConfigError):
        cfg(attention=AttentionSpec(reduction=7)).validate()
    with pytest.raises(ConfigError):
        cfg(rgb_stages=[StageSpec("mbconv", 1, 8, 1)]).validate()


def test_config_dict_roundtrip():
    c = cfg(index_branch_enabled=False, attention=AttentionSpec(enabled=False, reduction=4))
    assert ModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- forward


def test_probabilities_sum_to_one_and_shapes():
    m = build_model(cfg(), 0)
    rgb, idx = inputs(3)
    out = forward(m, rgb, idx)
    assert out.logits.shape == (3, 6)
    np.testing.assert_allclose(out.probabilities.data.sum(axis=1), 1.0, atol=1e-6)
    assert out.attended_features.shape == (3, 96, 2, 2)
    np.testing.assert_allclose(out.attention_weights.sum(axis=-1), 1.0, atol=1e-6)


def test_infer_is_deterministic():
    m = build_model(cfg(), 1)
    rgb, idx = inputs()
    assert np.array_equal(forward(m, rgb, idx).logits.data, forward(m, rgb, idx).logits.data)


def test_train_mode_reproducible_with_seed():
    rgb, idx = inputs()
    a = forward(build_model(cfg(), 1), rgb, idx, mode="train", rng=Rng(9)).logits.data
    b = forward(build_model(cfg(), 1), rgb, idx, mode="train", rng=Rng(9)).logits.data
    assert np.array_equal(a, b)


def test_ablation_invariance():
    m = build_model(cfg(index_branch_enabled=False), 0)
    rgb, idx = inputs()
    base = forward(m, rgb, idx).logits.data
    assert np.array_equal(base, forward(m, rgb, np.zeros_like(idx)).logits.data)
    assert np.array_equal(base, forward(m, rgb, None).logits.data)
    assert not any(k.startswith(("index.", "fusion.")) for k in m.params)


def test_forward_input_errors():
    m = build_model(cfg(), 0)
    rgb, idx = inputs()
    with pytest.raises(ValueError, match="index"):
        forward(m, rgb, None)
    with pytest.raises(ad.ShapeError):
        forward(m, rgb[:, :, :16, :16], idx[:, :, :16, :16])
    with pytest.raises(ad.ShapeError):
        forward(m, rgb, idx[:1])
    with pytest.raises(ValueError):
        forward(m, rgb, idx, mode="eval")


def test_attention_at_init_is_identity():
    with_att = build_model(cfg(), 5)
    without = build_model(cfg(attention=AttentionSpec(enabled=False)), 5)
    for k, v in with_att.params.items():
        if k in without.params:
            without.params[k] = Tensor(v.data.copy(), requires_grad=True)
    assert with_att.params["attention.gamma"].data.item() == 0.0
    rgb, idx = inputs()
    assert np.array_equal(forward(with_att, rgb, idx).logits.data, forward(without, rgb, idx).logits.data)


def test_self_attention_block_properties():
    r = np.random.default_rng(0)
    c, red = 8, 4
    feats = Tensor(r.normal(size=(2, c, 3, 3)))
    q = (Tensor(r.normal(size=(2, c, 1, 1))), Tensor(r.normal(size=2)))
    k = (Tensor(r.normal(size=(2, c, 1, 1))), Tensor(r.normal(size=2)))
    v = (Tensor(r.normal(size=(c, c, 1, 1))), Tensor(r.normal(size=c)))
    out, attn = self_attention_block(feats, q, k, v, Tensor([0.0]), red)
    assert np.array_equal(out.data, feats.data)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(ConfigError):
        self_attention_block(feats, q, k, v, Tensor([0.0]), 3)


def test_single_position_attention():
    r = np.random.default_rng(1)
    c = 4
    with ad.precision("float64"):
        feats = Tensor(r.normal(size=(1, c, 1, 1)))
        q = (Tensor(r.normal(size=(1, c, 1, 1))), Tensor(r.normal(size=1)))
        k = (Tensor(r.normal(size=(1, c, 1, 1))), Tensor(r.normal(size=1)))
        wv, bv = r.normal(size=(c, c, 1, 1)), r.normal(size=c)
        gamma = 0.7
        out, attn = self_attention_block(feats, q, k, (Tensor(wv), Tensor(bv)), Tensor([gamma]), 4)
    assert attn.data.item() == 1.0
    value = wv[:, :, 0, 0] @ feats.data[0, :, 0, 0] + bv
    np.testing.assert_allclose(out.data[0, :, 0, 0], feats.data[0, :, 0, 0] + gamma * value, rtol=1e-12)


def test_fusion_operand_permutation():
    r = np.random.default_rng(2)
    a = Tensor(r.normal(size=(1, 3, 2, 2)))
    b = Tensor(r.normal(size=(1, 5, 2, 2)))
    w = r.normal(size=(4, 8, 1, 1))
    direct = ad.conv2d(ad.concat_channels(a, b), Tensor(w)).data
    swapped_w = np.concatenate([w[:, 3:], w[:, :3]], axis=1)
    swapped = ad.conv2d(ad.concat_channels(b, a), Tensor(swapped_w)).data
    np.testing.assert_allclose(direct, swapped, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------- whole-model gradient


def tiny_config():
    return ModelConfig(
        input_size=(8, 8), num_classes=3, stem_channels=3, stem_stride=2,
        rgb_stages=[StageSpec("fused", 1, 3, 1, 1), StageSpec("separable", 1, 4, 2, 1)],
        index_stages=[IndexStageSpec(2, 2), IndexStageSpec(2, 2)],
        fusion_channels=4, attention=AttentionSpec(True, 2), dropout_rate=0.0,
    )


def test_tiny_model_loss_gradcheck():
    from xmac_edge.training import cross_entropy_loss

    c = tiny_config()
    with ad.precision("float64"):
        m = build_model(c, 0).astype("float64")
        m.params["attention.gamma"].data[:] = 0.5  # exercise the attention path
    assert parameter_count(m) <= 500
    rng = np.random.default_rng(3)
    rgb, idx = rng.random((4, 3, 8, 8)), rng.random((4, 3, 8, 8))
    y = np.array([0, 1, 2, 1])
    names = list(m.params)

    def loss_value(*arrs):
        for n, a in zip(names, arrs):
            m.params[n].data = a
        with ad.precision("float64"):
            bufs = {k: v.copy() for k, v in m.buffers.items()}
            out = forward(m, rgb, idx, mode="train", rng=Rng(0), grad=False)
            m.buffers.update(bufs)
            return float(cross_entropy_loss(out.logits, y).data)

    with ad.precision("float64"):
        bufs = {k: v.copy() for k, v in m.buffers.items()}
        out = forward(m, rgb, idx, mode="train", rng=Rng(0))
        with out.tape:
            loss = cross_entropy_loss(out.logits, y)
        ad.backward(out.tape, loss)
        m.buffers.update(bufs)
    analytic = {n: m.params[n].grad.copy() for n in names}
    arrays = [m.params[n].data.copy() for n in names]
    for i, n in enumerate(names):
        num = numeric_grad(loss_value, arrays, i)
        assert rel_error(analytic[n], num) <= 1e-5, n
