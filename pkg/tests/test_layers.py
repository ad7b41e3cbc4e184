import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformwarp.errors import InvalidArgumentError, InvalidStateError
from deformwarp.layers import (LayerSpec, Sequential, block, conv2d_forward, init_params, layer_backward,
                               layer_forward)

from helpers import check_layer_grads, check_sequential_grads


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def params_for(spec, cin, seed=1):
    p = init_params(spec, cin, np.random.default_rng(seed))
    # larger weights than the 0.02 init so finite differences are well scaled
    return {k: (v + np.random.default_rng(seed + 1).normal(0, 0.5, v.shape)) for k, v in p.items()}


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, w) + b
    return out


# -- forward definitions -----------------------------------------------------------

def test_relu_example():
    y, _ = layer_forward(LayerSpec("relu"), {}, np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1))
    assert y.ravel().tolist() == [0.0, 0.0, 2.0]


def test_relu_backward_zeroes_non_positive():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
    _, ctx = layer_forward(LayerSpec("relu"), {}, x)
    g, _ = layer_backward(ctx, np.ones_like(x))
    assert g.ravel().tolist() == [0.0, 0.0, 1.0]


@pytest.mark.parametrize("stride,size,expected", [(2, 8, 4), (1, 8, 8), (2, 7, 3)])
def test_conv_shapes(stride, size, expected):
    spec = LayerSpec("conv", 5, stride)
    y, _ = layer_forward(spec, init_params(spec, 3, np.random.default_rng(0)), rand((2, size, size, 3)))
    assert y.shape == (2, expected, expected, 5)
    assert spec.kernel == (4 if stride == 2 else 3)


def test_upconv_doubles():
    spec = LayerSpec("upconv", 4, 2)
    y, _ = layer_forward(spec, init_params(spec, 3, np.random.default_rng(0)), rand((1, 4, 3, 3)))
    assert y.shape == (1, 8, 6, 4)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(stride):
    x = rand((2, 6, 5, 3))
    k = 3 if stride == 1 else 4
    w, b = rand((k, k, 3, 4), 1), rand(4, 2)
    y, _ = conv2d_forward(x, w, b, stride, 1)
    np.testing.assert_allclose(y, conv_oracle(x, w, b, stride, 1), atol=1e-12)


def test_upconv_is_adjoint_of_strided_conv():
    spec_up = LayerSpec("upconv", 3, 2)
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 4, 3, 5))  # (k, k, cout, cin)
    x = rng.normal(size=(1, 3, 4, 5))
    y, _ = layer_forward(spec_up, {"w": w, "b": np.zeros(3)}, x)
    z = rng.normal(size=y.shape)
    # <up(x), z> == <x, conv(z)> with the same kernel
    cz, _ = conv2d_forward(z, w, np.zeros(5), 2, 1)
    assert float((y * z).sum()) == pytest.approx(float((x * cz).sum()), rel=1e-12)


def test_instance_norm_statistics():
    spec = LayerSpec("instance_norm")
    x = rand((3, 5, 4, 2)) * 3 + 7
    y, _ = layer_forward(spec, init_params(spec, 2, None), x)
    np.testing.assert_allclose(y.mean(axis=(1, 2)), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(1, 2)), 1, atol=1e-5)  # eps = 1e-5 shrinks the variance slightly


def test_instance_norm_channel_mismatch():
    with pytest.raises(InvalidArgumentError):
        layer_forward(LayerSpec("instance_norm"), init_params(LayerSpec("instance_norm"), 3, None), rand((1, 2, 2, 2)))


def test_dropout_train_and_eval():
    spec = LayerSpec("dropout", dropout_rate=0.5)
    x = np.ones((2, 20, 20, 4))
    y_eval, _ = layer_forward(spec, {}, x, "eval")
    np.testing.assert_array_equal(y_eval, x)
    y, _ = layer_forward(spec, {}, x, "train", 5)
    assert set(np.unique(y)) == {0.0, 2.0}
    assert 0.4 < (y == 0).mean() < 0.6
    y2, _ = layer_forward(spec, {}, x, "train", 5)
    np.testing.assert_array_equal(y, y2)
    with pytest.raises(InvalidArgumentError):
        layer_forward(spec, {}, x, "train", None)


def test_concat_backward_splits():
    a, b = rand((1, 2, 2, 3)), rand((1, 2, 2, 2), 1)
    y, ctx = layer_forward(LayerSpec("concat"), {}, [a, b])
    g = rand(y.shape, 2)
    ga, gb = layer_backward(ctx, g)[0]
    np.testing.assert_array_equal(ga, g[..., :3])
    np.testing.assert_array_equal(gb, g[..., 3:])
    with pytest.raises(InvalidStateError):
        layer_backward(ctx, g[..., :4])


def test_unknown_kind_and_mode():
    with pytest.raises(InvalidArgumentError):
        LayerSpec("pool")
    with pytest.raises(InvalidArgumentError):
        layer_forward(LayerSpec("relu"), {}, rand((1, 1, 1, 1)), "test")
    with pytest.raises(InvalidArgumentError):
        LayerSpec("conv", 3, stride=3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(["train", "eval"]))
def test_forward_deterministic(seed, mode):
    specs = block("CD", 4, 2)
    seq = Sequential("s", specs)
    params = {}
    seq.init(3, np.random.default_rng(seed), params, np.float64)
    x = rand((2, 8, 6, 3), seed)
    a, _ = seq.forward(params, x, mode, np.random.default_rng(seed))
    b, _ = seq.forward(params, x, mode, np.random.default_rng(seed))
    np.testing.assert_array_equal(a, b)


# -- gradients -----------------------------------------------------------------------

KIND_CASES = [
    ("conv s1", LayerSpec("conv", 4, 1), 3, (2, 5, 4, 3)),
    ("conv s2", LayerSpec("conv", 4, 2), 3, (2, 6, 4, 3)),
    ("upconv s2", LayerSpec("upconv", 3, 2), 4, (2, 3, 2, 4)),
    ("upconv s1", LayerSpec("upconv", 3, 1), 4, (1, 4, 3, 4)),
    ("instance_norm", LayerSpec("instance_norm"), 3, (2, 4, 3, 3)),
    ("relu", LayerSpec("relu"), 3, (2, 4, 3, 3)),
    ("tanh", LayerSpec("tanh"), 3, (2, 4, 3, 3)),
    ("sigmoid", LayerSpec("sigmoid"), 3, (2, 4, 3, 3)),
    ("dropout", LayerSpec("dropout", dropout_rate=0.5), 3, (2, 4, 3, 3)),
]


@pytest.mark.parametrize("name,spec,cin,shape", KIND_CASES, ids=[c[0] for c in KIND_CASES])
def test_layer_gradients(name, spec, cin, shape):
    params = params_for(spec, cin) if spec.has_params else {}
    assert check_layer_grads(spec, params, rand(shape, 4)) < 1e-5


def test_concat_gradients():
    assert check_layer_grads(LayerSpec("concat"), {}, [rand((2, 3, 3, 2)), rand((2, 3, 3, 3), 1)]) < 1e-5


@pytest.mark.parametrize("notation", ["C", "CN", "CD"])
@pytest.mark.parametrize("stride,up", [(1, False), (2, False), (2, True)])
def test_block_gradients(notation, stride, up):
    seq = Sequential("blk", block(notation, 4, stride, up=up))
    params = {}
    seq.init(3, np.random.default_rng(0), params, np.float64)
    params = {k: v + np.random.default_rng(1).normal(0, 0.5, v.shape) for k, v in params.items()}
    shape = (2, 3, 4, 3) if up else (2, 6, 4, 3)
    assert check_sequential_grads(seq, params, rand(shape, 2)) < 1e-5


def test_block_expansion():
    kinds = [s.kind for s in block("CD", 8, 2, up=True, last="tanh")]
    assert kinds == ["upconv", "instance_norm", "dropout", "tanh"]
    assert [s.kind for s in block("C", 8, 1)] == ["conv", "relu"]
    with pytest.raises(InvalidArgumentError):
        block("CX", 8, 1)


def test_sequential_skip_input_grad_matches_params():
    seq = Sequential("s", block("CN", 4, 2))
    params = {}
    seq.init(3, np.random.default_rng(0), params, np.float64)
    x = rand((2, 8, 8, 3))
    y, ctxs = seq.forward(params, x)
    g = rand(y.shape, 1)
    full, skipped = {}, {}
    seq.backward(ctxs, g, full)
    assert seq.backward(ctxs, g, skipped, need_input=False) is None
    for k in full:
        np.testing.assert_allclose(skipped[k], full[k], atol=1e-12)


@pytest.mark.parametrize("h,w,extra", [(64, 32, False), (64, 64, True)])
def test_encoder_decoder_shape_algebra(h, w, extra):
    from deformwarp.gan import GeneratorConfig

    cfg = GeneratorConfig(height=h, width=w, extra_block=extra)
    sizes = cfg.encoder_sizes()
    n_down = sum(s == 2 for _, _, s in cfg.encoder_blocks())
    assert sizes[-1] == (h // 2 ** n_down, w // 2 ** n_down)
    x = rand((1, h, w, 3))
    for n, m, s in cfg.encoder_blocks():
        seq = Sequential("e", block(n, 2, s))
        p = {}
        seq.init(x.shape[3], np.random.default_rng(0), p, np.float64)
        x, _ = seq.forward(p, x, "eval")
    for n, m, s in cfg.decoder_blocks():
        seq = Sequential("d", block(n, 2, s, up=True))
        p = {}
        seq.init(x.shape[3], np.random.default_rng(0), p, np.float64)
        x, _ = seq.forward(p, x, "eval")
    assert x.shape[1:3] == (h, w)
