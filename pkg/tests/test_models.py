import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phnn import ops
from phnn.errors import ShapeMismatch, SpecInvalid
from phnn.layers import PHCConv, PHMLinear
from phnn.models import (GruCell, GruState, ModelSpec, ResidualBlock, _Factory, build_model, gru_cell_forward,
                         hypercomplex_param_report, residual_block_forward)
from phnn.tensor import Tensor, no_grad

from oracles import direct_conv2d


def phc_layers(model):
    return [m for m in model.modules() if isinstance(m, (PHCConv, PHMLinear))]


def test_phresnet_lite_n3_widths_divisible():
    model = build_model(ModelSpec.lite("phresnet", 3, 10, 3))
    for layer in phc_layers(model):
        if isinstance(layer, PHCConv):
            assert layer.out_channels % 3 == 0 and layer.in_channels % 3 == 0
    assert model.spec.stage_widths == (60, 120, 240, 516)


def test_phvgg_ratio_n4_against_n1():
    r1 = hypercomplex_param_report(build_model(ModelSpec.lite("phvgg", 1, 12, 4)))
    r4 = hypercomplex_param_report(build_model(ModelSpec.lite("phvgg", 4, 12, 4)))
    assert abs(r4.exact / r1.exact - 0.25) < 0.005


def test_phsed_n8_two_microphone_input(rng):
    spec = ModelSpec.lite("phsed", 8, 6, 8)
    model = build_model(spec)
    x = Tensor(rng.normal(size=(2, 8, 32, 16)))
    with no_grad():
        y = model(x).data
    assert y.shape == (2, 32, 6)
    assert np.all((y > 0) & (y < 1))


@given(n=st.sampled_from([1, 2, 3, 4]), base=st.sampled_from([12, 24]), family=st.sampled_from(["phvgg", "phresnet"]))
def test_parameter_ratio_law(n, base, family):
    # 12 classes and 12 input channels keep every layer, head included, divisible by n
    widths = (base, 2 * base)
    kw = dict(stage_widths=widths, depths=(1, 1), input_size=(4, 4))
    if family == "phvgg":
        kw["classifier_widths"] = (2 * base,)
    else:
        kw["stem_width"] = base
    p1 = hypercomplex_param_report(build_model(ModelSpec.lite(family, 1, 12, 12, **kw)))
    pn = hypercomplex_param_report(build_model(ModelSpec.lite(family, n, 12, 12, **kw)))
    ratio = pn.exact / p1.exact
    eps = pn.cubic_terms / p1.exact
    assert 1 / n <= ratio <= 1 / n + eps + 1e-15


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        ModelSpec.lite("phresnet", 4, 10, 3).validate()
    ModelSpec.lite("phresnet", 4, 10, 3, channel_policy="zero_pad_to_n").validate()
    with pytest.raises(SpecInvalid):
        ModelSpec.lite("phresnet", 7, 10, 7).validate()
    with pytest.raises(SpecInvalid):
        ModelSpec.lite("phvgg", 1, 1, 3).validate()
    with pytest.raises(SpecInvalid):
        ModelSpec.lite("mlp", 1, 10, 3)


def test_spec_round_trips_through_dict():
    spec = ModelSpec.lite("phsed", 4, 6, 8)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_zero_padding_consumes_padded_channels():
    model = build_model(ModelSpec.lite("phresnet", 4, 10, 3, channel_policy="zero_pad_to_n", depths=(1, 1, 1, 1)))
    assert model.stem.conv.in_channels == 4


def test_same_seed_same_model_and_first_loss(rng):
    spec = ModelSpec.lite("phresnet", 2, 10, 4, depths=(1, 1, 1, 1))
    a, b = build_model(spec, seed=3), build_model(spec, seed=3)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    x, y = rng.normal(size=(4, 4, 8, 8)), rng.integers(0, 10, size=4)
    la = ops.softmax_cross_entropy(a(Tensor(x)), y).item()
    lb = ops.softmax_cross_entropy(b(Tensor(x)), y).item()
    assert la == lb


def test_residual_block_zero_path_gives_relu(rng):
    fac = _Factory(2, "learnable", rng)
    block = ResidualBlock.build(fac, 4, 4)
    block.conv1.filters.data[:] = 0
    block.conv2.filters.data[:] = 0
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    y = residual_block_forward(x, block)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y.data, np.maximum(x.data, 0))


def test_residual_block_needs_projection_for_width_change(rng):
    fac = _Factory(2, "learnable", rng)
    block = ResidualBlock.build(fac, 2, 4, projection=False)
    with pytest.raises(ShapeMismatch):
        block(Tensor(rng.normal(size=(2, 2, 4, 4))))
    projected = ResidualBlock.build(fac, 2, 4, stride=2)
    assert projected(Tensor(rng.normal(size=(2, 2, 4, 4)))).shape == (2, 4, 2, 2)


def test_gru_zero_fixed_point(rng):
    cell = GruCell(3, 4, rng)
    for p in cell.parameters():
        p.data[:] = 0
    h, state = gru_cell_forward(Tensor(np.zeros((2, 3))), GruState(Tensor(np.zeros((2, 4)))), cell)
    np.testing.assert_array_equal(h.data, 0)
    assert state.hidden is h


@given(seed=st.integers(0, 2 ** 16), scale=st.floats(0.1, 50))
def test_gru_hidden_stays_in_open_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    cell = GruCell(3, 4, rng)
    xs = Tensor(scale * rng.normal(size=(2, 6, 3)))
    with no_grad():
        hs = cell.sequence(xs).data
    # tanh rounds to exactly 1.0 in float64 once its argument passes ~19
    assert np.all(np.abs(hs) <= 1)
    if scale <= 3:
        assert np.all(np.abs(hs) < 1)


def test_gru_shape_errors(rng):
    cell = GruCell(3, 4, rng)
    with pytest.raises(ShapeMismatch):
        cell(Tensor(np.zeros((2, 5))), cell.initial_state(2))
    with pytest.raises(ShapeMismatch):
        cell(Tensor(np.zeros((2, 3))), cell.initial_state(3))


def _reference_vgg_n1(model, x):
    """PHVGG n=1 in eval mode rebuilt from plain numpy convolutions and matmuls."""
    def bn(y, m):
        rm, rv = m.running_mean.data, m.running_var.data
        z = (y - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + m.eps)
        return z * m.weight.data[None, :, None, None] + m.bias.data[None, :, None, None]

    for i, unit in enumerate(model.units):
        w = unit.conv.algebra.data[0, 0, 0] * unit.conv.filters.data[0]
        x = np.maximum(bn(direct_conv2d(x, w, None, 1, 1), unit.bn), 0)
        if i in model.stage_ends:
            B, C, H, W = x.shape
            x = x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))
    x = x.reshape(len(x), -1)
    for fc in model.fcs:
        x = np.maximum(x @ (fc.algebra.data[0, 0, 0] * fc.blocks.data[0]).T + fc.bias.data, 0)
    h = model.head
    return x @ (h.algebra.data[0, 0, 0] * h.blocks.data[0]).T + h.bias.data


def test_n1_model_equals_standard_reference(rng):
    spec = ModelSpec.lite("phvgg", 1, 5, 3, stage_widths=(4, 6), depths=(1, 2), classifier_widths=(8,),
                          input_size=(8, 8))
    model = build_model(spec, seed=2)
    for bn in [u.bn for u in model.units]:
        bn.running_mean.data[:] = rng.normal(size=bn.channels)
        bn.running_var.data[:] = rng.uniform(0.5, 2.0, size=bn.channels)
    model.eval()
    x = rng.normal(size=(3, 3, 8, 8))
    with no_grad():
        out = model(Tensor(x)).data
    np.testing.assert_allclose(out, _reference_vgg_n1(model, x), rtol=0, atol=1e-12)


def test_vgg_head_falls_back_to_n1_when_classes_not_divisible():
    model = build_model(ModelSpec.lite("phvgg", 4, 10, 4))
    assert model.head.n == 1
    assert all(fc.n == 4 for fc in model.fcs)
