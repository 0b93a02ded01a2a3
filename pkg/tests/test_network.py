import numpy as np
import pytest

from redcount.countmap import CountGeometry, output_shape, pad_image
from redcount.network import (ConvSpec, NetworkSpec, build_countception, countception_spec, down_kernels, input_window,
                              forward_full, init_state, receptive_field_of)
from redcount.tensorcore import Tensor, grad_check, weighted_sum


def conv_params(cin, cout, k):
    # weight + bias + BN gamma/beta
    return cout * cin * k * k + 3 * cout


def inception_params(cin, a, b):
    return conv_params(cin, a, 1) + conv_params(cin, b, 3)


REFERENCE_PARAMS = (
    conv_params(1, 64, 3)
    + inception_params(64, 16, 16) + inception_params(32, 16, 32)
    + conv_params(48, 16, 14)
    + inception_params(16, 112, 48) + inception_params(160, 64, 32)
    + inception_params(96, 40, 40) + inception_params(80, 32, 96)
    + conv_params(128, 32, 17)
    + conv_params(32, 64, 1) + conv_params(64, 1, 1)
)


def test_reference_receptive_field_and_parameter_count():
    spec = countception_spec(32)
    assert receptive_field_of(spec) == 1 + 2 + 13 + 16 == 32
    assert spec.parameter_count() == REFERENCE_PARAMS == 1_534_195


def test_size_reducing_layers_are_stem_and_two_down_convs():
    spec = countception_spec(32)
    reducing = [layer.name for layer in spec.layers if layer.reduction]
    assert reducing == ["stem", "down1", "down2"]
    assert [spec.layers[i].kernel for i in (0, 3, 8)] == [3, 14, 17]


def test_single_1x1_conv_spec():
    spec = NetworkSpec(layers=(ConvSpec("only", 1, 1, 1),), in_channels=1)
    assert receptive_field_of(spec) == 1


@pytest.mark.parametrize("r", [5, 8, 16, 24, 32, 48, 64])
def test_other_receptive_fields(r):
    assert receptive_field_of(countception_spec(r)) == r
    a, b = down_kernels(r)
    assert a >= 2 and b >= 2


def test_too_small_receptive_field():
    with pytest.raises(ValueError, match="too small"):
        countception_spec(4)


def test_channel_chain_validated():
    with pytest.raises(ValueError):
        NetworkSpec(layers=(ConvSpec("a", 1, 4, 3), ConvSpec("b", 5, 1, 1)), in_channels=1)


def test_spec_dict_round_trip():
    spec = countception_spec(32, channels_in=3)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


@pytest.fixture(scope="module")
def reference():
    return build_countception(32, seed=0)


@pytest.mark.parametrize("size", [64, 96, 256])
def test_output_shape_matches_count_geometry(size):
    # a tiny network with the same receptive field keeps this fast
    spec = NetworkSpec(layers=(ConvSpec("a", 1, 2, 17), ConvSpec("b", 2, 1, 16)), in_channels=1)
    state = init_state(spec, seed=0)
    g = CountGeometry(32)
    padded = pad_image(np.zeros((1, size, size), np.float32), g)
    out = forward_full(state, spec, padded)
    assert out.shape[2:] == (output_shape(size, g),) * 2


def test_reference_318_gives_287(reference):
    spec, state = reference
    out = forward_full(state, spec, np.zeros((1, 1, 318, 318), np.float32))
    assert out.shape == (1, 1, 287, 287)


def test_32_input_gives_single_output(reference):
    spec, state = reference
    assert forward_full(state, spec, np.zeros((1, 32, 32), np.float32)).shape == (1, 1, 1, 1)


def test_input_smaller_than_receptive_field(reference):
    spec, state = reference
    with pytest.raises(ValueError, match="receptive field"):
        forward_full(state, spec, np.zeros((1, 1, 31, 40), np.float32))


def test_zero_head_gives_constant_map(reference):
    spec, state = reference
    s = state.copy()
    s.params["head.weight"].data[:] = 0
    s.bn["head.bn"].beta.data[:] = 0
    out = forward_full(s, spec, np.random.default_rng(0).random((1, 1, 40, 40), dtype=np.float32)).data
    assert not out.any()


def test_eval_forward_is_batch_independent(reference):
    spec, state = reference
    rng = np.random.default_rng(1)
    a = rng.random((2, 1, 40, 40), dtype=np.float32)
    b = rng.random((1, 1, 40, 40), dtype=np.float32)
    joint = forward_full(state, spec, np.concatenate([a, b])).data
    parts = np.concatenate([forward_full(state, spec, a).data, forward_full(state, spec, b).data])
    np.testing.assert_allclose(joint, parts, rtol=1e-5, atol=1e-6)


def test_translation_equivariance(reference):
    spec, state = reference
    rng = np.random.default_rng(2)
    big = rng.random((1, 1, 60, 60), dtype=np.float32)
    out = forward_full(state, spec, big).data[0, 0]
    shifted = forward_full(state, spec, big[:, :, 3:, 5:]).data[0, 0]
    # the six padded 3x3 branches leave zero-padding artifacts near every edge
    m = 8
    np.testing.assert_allclose(shifted[m:-m, m:-m], out[3 + m:-m, 5 + m:-m], rtol=1e-4, atol=1e-5)


def test_state_is_finite_and_copy_is_deep(reference):
    spec, state = reference
    assert state.all_finite()
    c = state.copy()
    c.params["stem.weight"].data[:] = np.nan
    assert state.all_finite() and not c.all_finite()


def test_init_is_seeded():
    a = init_state(countception_spec(8), seed=3)
    b = init_state(countception_spec(8), seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_layer_table_mentions_every_layer(reference):
    spec, _ = reference
    table = spec.layer_table(158)
    for layer in spec.layers:
        assert layer.name in table
    assert "127x127" in table


def test_small_network_gradients():
    # reduced filter counts keep finite differences cheap; same layer types
    spec = countception_spec(8)
    state = init_state(spec, seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 10, 10)), name="x")
    wts = np.random.default_rng(1).normal(size=(2, 1, 3, 3))
    params = [state.params["down1.weight"], state.bn["head.bn"].gamma]
    rep = grad_check(lambda x, *_: weighted_sum(forward_full(state, spec, x, "train"), wts), [x] + params,
                     n_probe=20)
    assert rep.max_rel_error < 1e-3, rep


@pytest.mark.parametrize("r", [8, 32])
def test_input_window_matches_impulse_support(r):
    spec = countception_spec(r)
    side, lead = input_window(spec)
    assert side == r + 12 and lead == 6  # six padded 3x3 branches
    state = init_state(spec, seed=1, dtype=np.float64)
    for bn in state.bn.values():
        bn.running_var[:] = 0.5
        bn.beta.data[:] = 0.3
    n = 2 * side + 10
    x = np.random.default_rng(2).random((1, 1, n, n))
    py = px = n // 2
    bumped = x.copy()
    bumped[0, 0, py, px] += 1.0
    diff = forward_full(state, spec, bumped, conv_method="gemm").data[0, 0] != \
        forward_full(state, spec, x, conv_method="gemm").data[0, 0]
    rows, cols = np.nonzero(diff)
    # the support is contained in the predicted block and touches its far corners
    lo, hi = py + lead - side + 1, py + lead
    assert rows.min() >= lo and rows.max() <= hi and cols.min() >= lo and cols.max() <= hi
    assert rows.max() - rows.min() > r
