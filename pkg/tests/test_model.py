import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abcnet import ops
from abcnet.model import ABC, BAM, CLFT, UCDC, ABCConfig, ConvModule, count_flops
from abcnet.tensor import Tensor, no_grad

from conftest import naive_conv2d, np_group_norm


def zero_all(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def np_relu(x):
    return np.maximum(x, 0.0)


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def conv_ref(conv, x, norm):
    pad = conv.dilation * (conv.weight.shape[-1] - 1) // 2
    y = naive_conv2d(x, conv.weight.data, conv.bias.data, padding=pad, dilation=conv.dilation)
    return np_group_norm(y) if norm else y


# -- BAM -----------------------------------------------------------------------

def test_bam_zero_input_gives_uniform_rows():
    bam = BAM(4, 8, 8, rng=np.random.default_rng(0))
    for name, p in bam.named_parameters():
        if name.endswith("bias"):
            p.data[...] = 0.0
    att = bam(Tensor(np.zeros((1, 4, 8, 8)))).data
    assert att.shape == (1, 4, 8, 8)
    assert np.all(att == np.float32(1 / 8))


def test_bam_rows_are_distributions(rng):
    bam = BAM(3, 16, 8, rng=rng)
    att = bam(Tensor(rng.normal(size=(2, 3, 16, 8)))).data
    assert att.shape == (2, 3, 16, 16)
    assert (att >= 0).all()
    np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)


def test_bam_straight_line_recomputation():
    r = np.random.default_rng(5)
    c, h, w = 2, 4, 4
    bam = BAM(c, h, w, rng=r)
    for _, p in bam.named_parameters():
        p.data[...] = r.uniform(-0.5, 0.5, p.shape)
    x = np.zeros((1, c, h, w))
    x[0, 1, 2, 3] = 1.0

    def pw(conv, t):
        return np.einsum("oc,chw->ohw", conv.weight.data[:, :, 0, 0], t) + conv.bias.data[:, None, None]

    q = bam.fc_q.weight.data @ pw(bam.pw_q, x[0]).reshape(-1) + bam.fc_q.bias.data
    k = bam.fc_k.weight.data @ pw(bam.pw_k, x[0]).reshape(-1) + bam.fc_k.bias.data
    raw = np.outer(q, k)
    ref = np_softmax(pw(bam.pw_attn, raw[None]))
    np.testing.assert_allclose(bam(Tensor(x)).data[0], ref, rtol=1e-5, atol=1e-6)


def test_bam_rejects_other_resolution():
    with pytest.raises(ValueError, match="built for"):
        BAM(2, 8, 8)(Tensor(np.zeros((1, 2, 16, 16))))


@settings(max_examples=15)
@given(st.integers(1, 4), st.sampled_from([4, 8, 16]), st.sampled_from([4, 8, 12]), st.integers(0, 1000))
def test_bam_shape_and_normalisation(c, h, w, seed):
    r = np.random.default_rng(seed)
    att = BAM(c, h, w, rng=r)(Tensor(r.normal(size=(1, c, h, w)) * 3)).data
    assert att.shape == (1, c, h, h)
    np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-6)


# -- CLFT ------------------------------------------------------------------------

def test_clft_value_zero_weights_is_zero(rng):
    blk = CLFT(3, 6, 8, 8, rng=rng)
    for conv in blk.conv_branch + blk.dconv_branch:
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    assert not blk.value(Tensor(rng.normal(size=(1, 3, 8, 8)))).data.any()


def test_clft_shapes(rng):
    assert CLFT(8, 16, 16, 16, rng=rng).value(Tensor(np.ones((1, 8, 16, 16)))).shape == (1, 8, 16, 16)
    assert CLFT(16, 32, 32, 32, rng=rng)(Tensor(rng.normal(size=(1, 16, 32, 32)))).shape == (1, 32, 32, 32)


def test_dilation_ones_branch_equals_plain_stack(rng):
    blk = CLFT(2, 4, 8, 8, dilation_rates=(1, 1, 1), rng=rng)
    for plain, dil in zip(blk.conv_branch, blk.dconv_branch):
        dil.weight.data = plain.weight.data.copy()
        dil.bias.data = plain.bias.data.copy()
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))
    a = CLFT._stack(blk.conv_branch, x).data
    b = CLFT._stack(blk.dconv_branch, x).data
    assert np.array_equal(a, b)


def test_alpha_zero_gates_attention_off(rng):
    blk = CLFT(2, 4, 8, 8, rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))
    expected = x.data + blk.value(x).data
    np.testing.assert_array_equal(blk.fuse(x).data, expected)


def test_identity_attention_alpha_one_doubles_value(rng):
    blk = CLFT(2, 4, 8, 8, rng=rng)
    blk.alpha.data[...] = 1.0
    eye = np.broadcast_to(np.eye(8, dtype=np.float32), (1, 2, 8, 8)).copy()
    blk.attention = lambda _x: Tensor(eye)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))
    v = blk.value(x).data
    np.testing.assert_allclose(blk.fuse(x).data, x.data + 2 * v, rtol=1e-6, atol=1e-6)


def test_clft_composed_oracle(rng):
    blk = CLFT(2, 4, 8, 8, rng=rng, norm=False)
    blk.alpha.data[...] = 0.7
    x = rng.normal(size=(1, 2, 8, 8))

    def stack(convs, t):
        t = conv_ref(convs[0], t, False)
        for conv in convs[1:]:
            t = conv_ref(conv, np_relu(t), False)
        return t

    v = stack(blk.conv_branch, x) + stack(blk.dconv_branch, x)
    att = blk.bam(Tensor(x)).data.astype(np.float64)
    o_hat = x + v + 0.7 * np.matmul(att, v)
    ref = conv_ref(blk.ff_conv, o_hat, False) + conv_ref(blk.ff_pw, o_hat, False)
    np.testing.assert_allclose(blk(Tensor(x)).data, ref, rtol=1e-4, atol=1e-4)


# -- UCDC / ConvModule -------------------------------------------------------------

def test_ucdc_zero_and_shape(rng):
    u = UCDC(8, 8, rng=rng)
    x = Tensor(rng.normal(size=(1, 8, 16, 16)))
    assert u(x).shape == (1, 8, 16, 16)
    zero_all(u)
    assert not u(x).data.any()


@pytest.mark.parametrize("norm", [False, True])
def test_ucdc_straight_line(rng, norm):
    u = UCDC(3, 2, rng=rng, norm=norm)
    x = rng.normal(size=(1, 3, 8, 8))
    x1 = np_relu(conv_ref(u.conv1, x, norm))
    x2 = np_relu(conv_ref(u.dconv1, x1, norm))
    x3 = np_relu(conv_ref(u.dconv2, x2, norm))
    x4 = np_relu(conv_ref(u.dconv3, x3, norm)) + x2
    ref = np_relu(conv_ref(u.conv2, x4, norm)) + x1
    assert [u.dconv1.dilation, u.dconv2.dilation, u.dconv3.dilation] == [2, 4, 2]
    np.testing.assert_allclose(u(Tensor(x)).data, ref, rtol=1e-4, atol=1e-4)


def test_conv_module(rng):
    m = ConvModule(1, 8, rng=rng, norm=False)
    x = rng.normal(size=(1, 1, 64, 64))
    ref = np_relu(conv_ref(m.conv2, np_relu(conv_ref(m.conv1, x, False)), False))
    out = m(Tensor(x)).data
    assert out.shape == (1, 8, 64, 64)
    np.testing.assert_allclose(out, ref, rtol=1e-4, atol=1e-4)
    zero_all(m)
    assert not m(Tensor(x)).data.any()


# -- full network ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_net():
    return ABC(ABCConfig(input_dim=8, input_resolution=(64, 64)), seed=0)


def test_abc_resolution_preserved(small_net):
    x = Tensor(np.random.default_rng(0).random((2, 1, 64, 64)))
    with no_grad():
        main, aux = small_net(x)
    assert main.shape == (2, 1, 64, 64)
    assert len(aux) == 3 and all(a.shape == (2, 1, 64, 64) for a in aux)


def test_abc_no_deep_supervision_has_no_aux():
    net = ABC(ABCConfig(input_dim=2, input_resolution=(16, 16), deep_supervision=False))
    _, aux = net(Tensor(np.zeros((1, 1, 16, 16))))
    assert aux == []


def test_abc_zero_params_give_zero_logits():
    net = ABC(ABCConfig(input_dim=4, input_resolution=(32, 32)))
    zero_all(net)
    main, aux = net(Tensor(np.random.default_rng(1).random((1, 1, 32, 32))))
    assert not main.data.any() and not any(a.data.any() for a in aux)


def test_abc_deterministic():
    cfg = ABCConfig(input_dim=4, input_resolution=(32, 32))
    x = Tensor(np.random.default_rng(2).random((1, 1, 32, 32)))
    a = ABC(cfg, seed=11)(x)[0].data
    b = ABC(cfg, seed=11)(x)[0].data
    assert np.array_equal(a, b)


def test_abc_head_prior_sets_initial_probability():
    net = ABC(ABCConfig(input_dim=2, input_resolution=(16, 16), head_prior=0.01))
    assert net.head.bias.data[0] == pytest.approx(np.log(0.01 / 0.99), rel=1e-6)


def test_abc_config_validation():
    with pytest.raises(ValueError, match="multiples of 16"):
        ABCConfig(input_resolution=(8, 8))
    with pytest.raises(ValueError):
        ABCConfig(encoder_first_layer="resnet")
    with pytest.raises(ValueError):
        ABCConfig(normalization="batch")


def test_abc_rejects_wrong_input_size(small_net):
    with pytest.raises(ValueError, match="built for"):
        small_net(Tensor(np.zeros((1, 1, 32, 32))))


@pytest.mark.parametrize("enc,dec", [("clft", "ucdc"), ("conv_module", "conv_module")])
def test_layer_switches_build_and_run(enc, dec):
    net = ABC(ABCConfig(input_dim=2, input_resolution=(16, 16), encoder_first_layer=enc,
                        decoder_first_layer=dec))
    assert net(Tensor(np.zeros((1, 1, 16, 16))))[0].shape == (1, 1, 16, 16)


def test_alpha_zero_network_ignores_bam():
    net = ABC(ABCConfig(input_dim=4, input_resolution=(32, 32)), seed=3)
    x = Tensor(np.random.default_rng(3).random((1, 1, 32, 32)))
    before = net(x)[0].data.copy()
    r = np.random.default_rng(4)
    for blk in net.clft_blocks():
        for _, p in blk.bam.named_parameters():
            p.data += r.normal(size=p.shape).astype(np.float32)
    assert np.abs(net(x)[0].data - before).max() <= 1e-6


# -- FLOPs ------------------------------------------------------------------------

def test_flops_monotone_and_ratio():
    f = [count_flops(ABCConfig(input_dim=c, input_resolution=(256, 256))) for c in (16, 32, 64)]
    assert f[0] < f[1] < f[2]
    assert 3.4 <= f[2] / f[1] <= 4.6 and 3.4 <= f[1] / f[0] <= 4.6


def test_flops_area_scaling():
    big = count_flops(ABCConfig(input_dim=16, input_resolution=(256, 256)))
    small = count_flops(ABCConfig(input_dim=16, input_resolution=(128, 128)))
    # convs scale exactly by 4; the H^2 attention terms by 8, so the total lands just above 4
    assert 4.0 <= big / small < 4.2


def test_flops_match_instrumented_forward():
    from abcnet.tensor import FlopCounter

    cfg = ABCConfig(input_dim=4, input_resolution=(32, 32))
    net = ABC(cfg)
    with FlopCounter() as fc, no_grad():
        net(Tensor(np.zeros((1, 1, 32, 32))))
    assert fc.total == count_flops(cfg)
