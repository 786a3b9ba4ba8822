import numpy as np
import pytest

from attrfuse import tensor as T
from attrfuse.errors import ConfigError
from attrfuse.gradcheck import away_from_zero
from attrfuse.layers import (
    LayerSpec,
    forward_stack,
    infer_shapes,
    init_params,
    param_count,
)
from attrfuse.model import ArchConfig
from attrfuse.tensor import DimensionError, Tensor, grad_check


def leaves(params):
    return {k: T.constant(v) for k, v in params.items()}


def test_init_is_deterministic_per_seed():
    specs = [LayerSpec("affine", "fc", 2)]
    a = init_params(specs, (4,), seed=3)
    b = init_params(specs, (4,), seed=3)
    assert a["fc.w"].tobytes() == b["fc.w"].tobytes()
    assert not np.array_equal(a["fc.w"], init_params(specs, (4,), seed=4)["fc.w"])


def test_biases_start_at_zero():
    specs = [LayerSpec("conv3x3", "c", 4), LayerSpec("flatten", "f"), LayerSpec("affine", "fc", 3)]
    params = init_params(specs, (2, 4, 4), seed=0)
    assert not params["c.b"].any() and not params["fc.b"].any()


def test_init_variance_tracks_fan_in():
    specs = [LayerSpec("conv3x3", "c", 64)]
    w = init_params(specs, (32, 8, 8), seed=0)["c.w"]
    assert w.size >= 10_000
    expected = 2.0 / (32 * 9)
    assert abs(w.var() - expected) < 0.3 * expected
    assert abs(w.mean()) < 0.05 * np.sqrt(expected)


def test_duplicate_names_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        init_params([LayerSpec("affine", "x", 2), LayerSpec("affine", "x", 2)], (3,), seed=0)


def test_param_iteration_is_lexicographic():
    specs = [LayerSpec("affine", "zeta", 2), LayerSpec("affine", "alpha", 2)]
    assert list(init_params(specs, (3,), seed=0)) == ["alpha.b", "alpha.w", "zeta.b", "zeta.w"]


def test_conv_relu_pool_block_shape(rng):
    specs = [LayerSpec("conv3x3", "c", 8), LayerSpec("relu", "r"), LayerSpec("maxpool2", "p")]
    params = init_params(specs, (3, 64, 64), seed=0)
    out = forward_stack(specs, leaves(params), T.constant(rng.standard_normal((1, 3, 64, 64))))
    assert out.shape == (1, 8, 32, 32)


def test_five_pools_reduce_64_to_2(rng):
    specs = [LayerSpec("maxpool2", f"p{i}") for i in range(5)]
    out = forward_stack(specs, {}, T.constant(rng.standard_normal((1, 1, 64, 64))))
    assert out.shape == (1, 1, 2, 2)


def test_empty_stack_is_identity(rng):
    x = T.constant(rng.standard_normal((2, 3)))
    assert forward_stack([], {}, x) is x


def test_shape_error_names_layer(rng):
    specs = [LayerSpec("maxpool2", "p1"), LayerSpec("maxpool2", "odd_pool")]
    with pytest.raises(DimensionError, match="odd_pool"):
        forward_stack(specs, {}, T.constant(rng.standard_normal((1, 1, 6, 6))))


@pytest.mark.parametrize(
    "in_shape, stages",
    [((3, 64, 64), ((16,), (32,), (64, 64), (128, 128), (128, 128))), ((1, 32, 32), ((4,), (4, 4), (8,), (8,), (8,))),
     ((2, 8, 12), ((3,), (5,)))],
)
def test_static_shapes_match_forward(in_shape, stages, rng):
    arch = ArchConfig(in_shape, stages, 16)
    specs = arch.feature_specs()
    params = init_params(specs, in_shape, seed=1)
    x = T.constant(rng.standard_normal((2,) + in_shape))
    shapes = infer_shapes(specs, in_shape)
    for i, spec in enumerate(specs):
        x = forward_stack([spec], leaves(params), x)
        assert x.shape[1:] == shapes[i], spec.name


def test_param_count_matches_instantiated():
    arch = ArchConfig()
    specs = arch.feature_specs()
    params = init_params(specs, arch.input_shape, seed=0)
    assert param_count(specs, arch.input_shape) == params.size()
    # two conv layers per stage from stage 3: 3*16*9 + 16 + 16*32*9 + 32 + ...
    widths = [(3, 16), (16, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 128), (128, 128)]
    assert params.size() == sum(c * f * 9 + f for c, f in widths)


def test_three_layer_stack_grad_check(rng):
    specs = [LayerSpec("conv3x3", "c", 3), LayerSpec("relu", "r"), LayerSpec("maxpool2", "p"),
             LayerSpec("flatten", "f"), LayerSpec("affine", "fc", 2)]
    params = init_params(specs, (2, 4, 4), seed=2)
    x = away_from_zero(rng.standard_normal((2, 2, 4, 4)))
    w = rng.standard_normal((2, 2))
    for pid, arr in params.items():
        def fn(v, pid=pid):
            p = leaves(params)
            p[pid] = v
            return T.tensor_sum(T.multiply(forward_stack(specs, p, T.constant(x)), T.constant(w)))
        assert grad_check(fn, arr) < 1e-4, pid
    assert grad_check(lambda v: T.tensor_sum(forward_stack(specs, leaves(params), v)), x) < 1e-4


def test_unknown_layer_kind():
    with pytest.raises(ConfigError):
        LayerSpec("dropout", "d")


def test_forward_stack_records_on_tape(rng):
    specs = [LayerSpec("affine", "fc", 2), LayerSpec("softmax", "s")]
    params = init_params(specs, (3,), seed=0)
    p = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = forward_stack(specs, p, T.constant(rng.standard_normal((4, 3))))
    assert out.requires_grad and out.op == "softmax"
