import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlq import infer, kernels
from vlq.errors import InvalidArgument, ValidationError
from vlq.infer import (
    ActivationQuantizer,
    accumulator_bound,
    assemble_model,
    batchnorm,
    conv2d_q,
    evaluate,
    forward,
    linear_q,
    quantize_activation,
)
from vlq.model import Architecture, BNParams, HeadParams, LayeredModel, LayerSpec
from vlq.quant import QTensor, QuantParams, dequantize
from vlq.vertical import decompose

from factories import rand_q, random_layered


def qt(values, bits, step=1.0, signed=True):
    return QTensor(np.asarray(values, dtype=np.int32), QuantParams(step, bits, signed))


def reference_conv(x, w, stride, pad):
    # direct loops over output positions, no im2col
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out


@pytest.mark.parametrize("a, expected", [(2.4, 2), (10.0, 3), (-1.0, 0)])
def test_quantize_activation_examples(a, expected):
    assert quantize_activation(a, ActivationQuantizer(1.0, 2)).data == expected


def test_activation_quantizer_rejects_bad_step():
    with pytest.raises(InvalidArgument):
        ActivationQuantizer(0.0, 2)


@pytest.mark.parametrize("z, expected", [(0.0, 0.75), (0.375, 0.84375)])
def test_conv2d_q_scalar_examples(z, expected):
    w = qt(np.full((1, 1, 1, 1), 3), 3, 0.5)
    a = qt(np.full((1, 1, 1, 1), 2), 2, 0.25, signed=False)
    assert conv2d_q(w, a, z, 0.5, 0.25).item() == expected


@pytest.mark.parametrize("z, expected", [(0.0, 0.75), (0.375, 0.84375)])
def test_linear_q_scalar_examples(z, expected):
    w = qt([[3]], 3, 0.5)
    a = qt([[2]], 2, 0.25, signed=False)
    assert linear_q(w, a, z, 0.5, 0.25).item() == expected


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_conv2d_q_matches_float_reference(seed):
    rng = np.random.default_rng(seed)
    c, o = rng.integers(1, 5, size=2)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    h = int(rng.integers(k, 10))
    bits = int(rng.integers(2, 5))
    w = rand_q(rng, (o, c, k, k), bits, 0.013, True)
    a = rand_q(rng, (2, c, h, h), bits, 0.071, False)
    got = conv2d_q(w, a, 0.0, w.step, a.step, stride, pad)
    ref = reference_conv(dequantize(a), dequantize(w), stride, pad)
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_linear_q_matches_float_reference(seed):
    rng = np.random.default_rng(seed)
    f_in, f_out = rng.integers(1, 20, size=2)
    w = rand_q(rng, (f_out, f_in), 4, 0.02, True)
    a = rand_q(rng, (3, f_in), 4, 0.3, False)
    got = linear_q(w, a, 0.0, w.step, a.step)
    assert np.allclose(got, dequantize(a) @ dequantize(w).T, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.375, 0.25, 0.125]))
@settings(max_examples=30, deadline=None)
def test_compensation_folding_is_exact(seed, z):
    rng = np.random.default_rng(seed)
    w = rand_q(rng, (3, 2, 3, 3), 2, 0.5, True)
    a = rand_q(rng, (2, 2, 6, 6), 2, 0.25, False)
    with_z = conv2d_q(w, a, z, 0.5, 0.25, 1, 1)
    base = conv2d_q(w, a, 0.0, 0.5, 0.25, 1, 1)
    ones = qt(np.ones((1, 2, 3, 3)), 2)
    sums = conv2d_q(ones, a, 0.0, 1.0, 1.0, 1, 1)  # receptive-field activation sums
    assert np.array_equal(with_z, base + z * 0.5 * 0.25 * sums)
    # folding equals convolving the shifted weights w + z
    ref = reference_conv(dequantize(a), (w.data + z) * 0.5, 1, 1)
    assert np.allclose(with_z, ref, rtol=1e-12)


def test_accumulator_bound_fits_32_bits():
    worst = accumulator_bound(4, 4, 7 * 7 * 4096)
    assert worst < 2**31
    # worst-case inputs reach the bound exactly
    w = qt(np.full((1, 3, 2, 2), -8), 4)
    a = qt(np.full((1, 3, 2, 2), 15), 4, signed=False)
    assert conv2d_q(w, a, 0.0, 1.0, 1.0).item() == -accumulator_bound(4, 4, 12)


def test_conv2d_q_shape_mismatch():
    w = qt(np.zeros((1, 2, 3, 3)), 2)
    with pytest.raises(ValidationError):
        conv2d_q(w, qt(np.zeros((1, 3, 5, 5)), 2, signed=False), 0.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        conv2d_q(w, qt(np.zeros((1, 2, 2, 2)), 2, signed=False), 0.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        linear_q(qt(np.zeros((2, 3)), 2), qt(np.zeros((1, 4)), 2, signed=False), 0.0, 1.0, 1.0)


def test_batchnorm_examples():
    x = np.array([2.0]).reshape(1, 1)
    out = batchnorm(x, BNParams(np.array([1.0]), np.array([1.0]), np.array([2.0]), np.array([1.0])))
    assert out.item() == pytest.approx(3.0, abs=1e-4)
    assert out.item() == 1 + 2 / np.sqrt(1 + 1e-5)
    ident = batchnorm(np.arange(6.0).reshape(2, 3), BNParams.identity(3))
    assert np.allclose(ident, np.arange(6.0).reshape(2, 3), atol=1e-4)


def test_batchnorm_rejects_negative_variance():
    bn = BNParams.identity(2)
    bn.var[1] = -0.1
    with pytest.raises(ValidationError):
        batchnorm(np.zeros((1, 2)), bn)


def test_batchnorm_output_moments():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(5000, 3, 2, 2))
    mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    scale, shift = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 1.0])
    y = batchnorm(x, BNParams(mean, var, scale, shift))
    assert np.allclose(y.mean(axis=(0, 2, 3)), shift, atol=1e-9)
    assert np.allclose(y.var(axis=(0, 2, 3)), scale**2 * var / (var + kernels.BN_EPS), rtol=1e-9)


def identity_model(step_a):
    # linear 4->4 with identity weights, exact identity BN, identity head
    arch = Architecture((4, 1, 1), (LayerSpec("linear", 4, 4),), 4)
    stack = decompose(qt(np.eye(4, dtype=int), 2), 2)
    bn = BNParams(np.zeros(4), np.full(4, 1 - kernels.BN_EPS), np.ones(4), np.zeros(4))
    return LayeredModel(
        arch,
        2,
        0,
        [stack],
        [[bn]],
        np.array([[step_a]]),
        HeadParams(np.eye(4), np.zeros(4)),
    ).validate()


def test_identity_network_within_half_step():
    model = assemble_model(identity_model(0.1), 0)
    x = np.random.default_rng(1).uniform(0, 0.3, size=(50, 4, 1, 1))
    y = forward(model, x)
    assert np.abs(y - x.reshape(50, 4)).max() <= 0.05 + 1e-12


def test_forward_batching_invariance():
    rng = np.random.default_rng(3)
    model = assemble_model(random_layered(rng), 1)
    x = rng.normal(size=(2, 1, 28, 28))
    both = forward(model, x)
    split = np.concatenate([forward(model, x[:1]), forward(model, x[1:])])
    # float stem/head matmuls may block differently per batch size
    assert np.allclose(both, split, rtol=1e-12, atol=1e-12)


def test_forward_levels_differ_and_records_stats():
    rng = np.random.default_rng(4)
    layered = random_layered(rng)
    x = rng.normal(size=(3, 1, 28, 28))
    stats = []
    top = forward(assemble_model(layered, 2), x, stats)
    low = forward(assemble_model(layered, 0), x)
    assert not np.array_equal(top, low)
    assert [s["layer"] for s in stats] == [0, 1]
    assert all(s["bits"] == 4 and s["mse"] >= 0 for s in stats)


def test_assemble_model_levels():
    rng = np.random.default_rng(5)
    layered = random_layered(rng)
    m = assemble_model(layered, [0, 2])
    assert m.bits == (2, 4)
    assert m.z == (0.375, 0.0)
    assert m.act[0].step_size == layered.act_steps[0, 0]
    assert m.weights[0].step == layered.stacks[0].step(0)
    off = assemble_model(random_layered(rng, compensate=False), 0)
    assert off.z == (0.0, 0.0)
    with pytest.raises(InvalidArgument):
        assemble_model(layered, 3)
    with pytest.raises(InvalidArgument):
        assemble_model(layered, [0])


def test_forward_rejects_wrong_input_shape():
    model = assemble_model(random_layered(np.random.default_rng(6)), 0)
    with pytest.raises(ValidationError):
        forward(model, np.zeros((1, 3, 28, 28)))


def test_evaluate_record():
    model = assemble_model(random_layered(np.random.default_rng(7)), 2)
    x = np.random.default_rng(8).normal(size=(20, 1, 28, 28))
    y = np.arange(20) % 10
    rec = evaluate(model, x, y, batch_size=7)
    logits = forward(model, x)
    assert rec["top1"] == np.mean(logits.argmax(1) == y)
    assert rec["samples"] == 20 and 0 <= rec["top1"] <= rec["top5"] <= 1


def test_int_matmul_fast_path_is_exact():
    rng = np.random.default_rng(11)
    for hi in (8, 2**20, 2**25):  # the last one takes the integer path
        a = rng.integers(-hi, hi, size=(7, 33), dtype=np.int64)
        b = rng.integers(-hi, hi, size=(33, 5), dtype=np.int64)
        got = infer.int_matmul(a, b)
        assert got.dtype == np.int64
        assert np.array_equal(got, a @ b)
