import numpy as np
import pytest

from robustlens import tensor as T
from robustlens.exceptions import ConfigError, DimensionError
from robustlens.models import (NetworkSpec, block_layouts, branch_final_bn, build, expected_names,
                               forward_logits, forward_representation, head, micro_resnet,
                               predict_logits)
from robustlens.tensor import Tensor

from conftest import max_rel_err, numerical_grad


def hand_count(spec):
    """Trainable parameters from the shape rules: bias-free convs each followed by BN(gamma, beta)."""
    def conv_bn(o, i, k):
        return o * i * k * k + 2 * o

    c_in = spec.input_shape[0]
    stem = spec.stem_width or spec.widths[0]
    total = conv_bn(stem, c_in, 3)
    in_ch = stem
    exp = 4 if spec.block == "bottleneck" else 1
    for s, (w, nb) in enumerate(zip(spec.widths, spec.blocks)):
        for b in range(nb):
            stride = 2 if s > 0 and b == 0 else 1
            out = w * exp
            if spec.block == "basic":
                total += conv_bn(w, in_ch, 3) + conv_bn(w, w, 3)
            else:
                total += conv_bn(w, in_ch, 1) + conv_bn(w, w, 3) + conv_bn(out, w, 1)
            if stride != 1 or in_ch != out:
                total += conv_bn(out, in_ch, 1)
            in_ch = out
    return total + spec.num_classes * in_ch + spec.num_classes


def test_parameter_count_small_basic_net():
    spec = NetworkSpec(input_shape=(3, 16, 16), num_classes=4, widths=(8, 16), blocks=(1, 1))
    params = build(spec, 0)
    # stem 216+16, stage0 2*(576+16), stage1 1152+32 + 2304+32 + shortcut 128+32, fc 64+4
    assert params.num_parameters() == 216 + 16 + 2 * (576 + 16) + 1152 + 32 + 2304 + 32 + 128 + 32 + 68
    assert params.num_parameters() == hand_count(spec)


@pytest.mark.parametrize("spec", [
    micro_resnet(),
    NetworkSpec(block="bottleneck", widths=(4, 8), blocks=(2, 1), num_classes=3),
    NetworkSpec(block="bottleneck", widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), num_classes=150,
                input_shape=(3, 128, 128)),
])
def test_parameter_count_formula(spec):
    assert build(spec, 0).num_parameters() == hand_count(spec)


def test_build_is_deterministic():
    spec = micro_resnet((3, 16, 16))
    assert build(spec, 5).equals(build(spec, 5))
    assert not build(spec, 5).equals(build(spec, 6))


def test_initial_batchnorm_state():
    params = build(micro_resnet(), 0)
    assert np.all(params["stem.bn.gamma"].data == 1) and np.all(params["stem.bn.beta"].data == 0)
    assert np.all(params["stem.bn.running_mean"].data == 0) and np.all(params["stem.bn.running_var"].data == 1)
    bound = np.sqrt(6.0 / 27)
    assert np.abs(params["stem.conv.weight"].data).max() <= bound


def test_name_set_determined_by_spec():
    spec = micro_resnet()
    names = build(spec, 3).names()
    assert names == expected_names(spec)
    assert len(set(names)) == len(names)


def test_bottleneck_projection_only_when_shape_changes():
    spec = NetworkSpec(block="bottleneck", widths=(4,), blocks=(2,), stem_width=16)
    params = build(spec, 0)
    # stem 16 channels == 4 * 4: no projection in either block
    assert not any("shortcut" in n for n in params.names())
    spec = NetworkSpec(block="bottleneck", widths=(4,), blocks=(2,), stem_width=8)
    params = build(spec, 0)
    assert params["stage0.block0.shortcut.conv.weight"].shape == (16, 8, 1, 1)
    assert "stage0.block1.shortcut.conv.weight" not in params


def test_bottleneck_expands_width_by_four():
    spec = NetworkSpec(block="bottleneck", widths=(4, 8), blocks=(1, 1))
    assert spec.representation_width == 32
    params = build(spec, 0, dtype=np.float64)
    rep = forward_representation(params, np.zeros((1, 3, 32, 32)))
    assert rep.shape == (1, 32)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(block="dense")
    with pytest.raises(ConfigError):
        NetworkSpec(widths=(8, 16), blocks=(1,))
    with pytest.raises(ConfigError):
        NetworkSpec(widths=(0,), blocks=(1,))


def test_spec_round_trip():
    spec = NetworkSpec(block="bottleneck", widths=(4, 8), blocks=(2, 1), input_shape=(1, 8, 8), stem_width=6)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_fresh_forward_is_finite(rng):
    params = build(micro_resnet((3, 16, 16)), 0)
    out = forward_logits(params, rng.uniform(size=(4, 3, 16, 16)))
    assert out.shape == (4, 4) and np.all(np.isfinite(out.data))


def test_identical_images_identical_rows(rng, tiny_params):
    x = np.repeat(rng.uniform(size=(1, 3, 8, 8)), 2, axis=0)
    out = forward_logits(tiny_params, x).data
    np.testing.assert_array_equal(out[0], out[1])


def test_representation_composes_to_logits(rng, tiny_params):
    x = rng.uniform(size=(3, 3, 8, 8))
    rep = forward_representation(tiny_params, x)
    assert rep.shape == (3, tiny_params.spec.representation_width)
    np.testing.assert_allclose(head(tiny_params, rep).data, forward_logits(tiny_params, x).data, atol=1e-6)


def test_input_shape_checked(tiny_params):
    with pytest.raises(DimensionError):
        forward_logits(tiny_params, np.zeros((1, 3, 9, 9)))


def test_eval_batch_size_invariance(rng):
    params = build(micro_resnet((3, 16, 16)), 2)
    x = rng.uniform(size=(5, 3, 16, 16)).astype(np.float32)
    together = predict_logits(params, x)
    alone = np.concatenate([predict_logits(params, x[i:i + 1]) for i in range(5)])
    np.testing.assert_allclose(together, alone, atol=1e-6)


def _relu(a):
    return np.maximum(a, 0.0)


def _bn_eval(params, prefix, h):
    g, b = params[f"{prefix}.gamma"].data, params[f"{prefix}.beta"].data
    m, v = params[f"{prefix}.running_mean"].data, params[f"{prefix}.running_var"].data
    s = (1, -1, 1, 1)
    return g.reshape(s) * (h - m.reshape(s)) / np.sqrt(v.reshape(s) + 1e-5) + b.reshape(s)


@pytest.mark.parametrize("block", ["basic", "bottleneck"])
def test_zeroed_branches_give_relu_of_skip(rng, block):
    spec = NetworkSpec(input_shape=(3, 8, 8), num_classes=2, block=block, widths=(4, 6), blocks=(2, 1))
    params = build(spec, 1, dtype=np.float64)
    for name in params.names():
        if name.endswith("running_mean"):
            params[name].data[:] = rng.standard_normal(params[name].shape) * 0.1
        if name.endswith("running_var"):
            params[name].data[:] = rng.uniform(0.5, 2.0, params[name].shape)
    for blk in block_layouts(spec):
        params[branch_final_bn(spec, blk) + ".gamma"].data[:] = 0.0
        params[branch_final_bn(spec, blk) + ".beta"].data[:] = 0.0
    x = rng.uniform(size=(2, 3, 8, 8))
    # trace analytically: each block reduces to relu(skip(h))
    h = _relu(_bn_eval(params, "stem.bn", T.conv2d(Tensor(x), params["stem.conv.weight"], padding=1).data))
    for blk in block_layouts(spec):
        if blk.projected:
            w = params[f"{blk.prefix}.shortcut.conv.weight"].data
            skip = _bn_eval(params, f"{blk.prefix}.shortcut.bn", T.conv2d(Tensor(h), Tensor(w), stride=blk.stride).data)
        else:
            skip = h
        h = _relu(skip)
    np.testing.assert_allclose(forward_representation(params, x).data, h.mean(axis=(2, 3)), atol=1e-12)


def test_representation_input_gradient(rng, tiny_params):
    x = rng.uniform(size=(2, 3, 8, 8))
    w = rng.standard_normal((2, tiny_params.spec.representation_width))
    frozen = tiny_params.frozen()
    t = Tensor(x, requires_grad=True)
    (forward_representation(frozen, t) * Tensor(w)).sum().backward()
    fd = numerical_grad(lambda: float((forward_representation(frozen, x).data * w).sum()), x, h=1e-5)
    assert max_rel_err(t.grad, fd, floor=1e-6) <= 1e-3


def test_train_mode_parameter_gradients(rng, tiny_params):
    x = rng.uniform(size=(4, 3, 8, 8))
    y = np.array([0, 1, 2, 1])
    params = tiny_params.copy()

    def loss():
        with T.no_grad():
            return T.cross_entropy(forward_logits(params.frozen(), x, "train"), y).item()

    params.zero_grad()
    T.cross_entropy(forward_logits(params, x, "train"), y).backward()
    for name in ("stem.conv.weight", "stage1.block0.shortcut.conv.weight", "stage0.block0.bn2.gamma", "fc.bias"):
        arr = params[name].data
        analytic = params[name].grad.copy()
        # small h keeps pre-activations near zero on one side of the ReLU kink
        fd = numerical_grad(loss, arr, h=1e-6)
        assert max_rel_err(analytic, fd, floor=1e-6) <= 1e-3, name
