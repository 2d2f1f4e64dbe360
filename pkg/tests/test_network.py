import math

import numpy as np
import pytest

from ezmsg.fedhe.network import (
    LayerSpec,
    NetworkSpec,
    compile_network,
    init_weights,
    layer_dims,
)
from ezmsg.fedhe.cost import rotation_budget
from ezmsg.fedhe.errors import ApproximationError, PackingError


def conv_spec(**kwargs) -> NetworkSpec:
    return NetworkSpec(
        input_shape = (4, 4),
        layers = (
            LayerSpec('cv', kernel = 2, stride = 2, filters = 2),
            LayerSpec('avgpool', kernel = 2, stride = 2),
            LayerSpec('fc', units = 2),
        ),
        **kwargs
    )


def test_layer_validation() -> None:
    with pytest.raises(PackingError):
        LayerSpec('lstm', units = 4)
    with pytest.raises(PackingError):
        LayerSpec('fc')
    with pytest.raises(PackingError):
        LayerSpec('cv', kernel = 2, filters = 3)
    with pytest.raises(PackingError):
        LayerSpec('avgpool')
    with pytest.raises(ApproximationError):
        LayerSpec('fc', units = 2, activation = 'swish')


def test_network_validation() -> None:
    fc = LayerSpec('fc', units = 2)
    conv = LayerSpec('cv', kernel = 2, stride = 2)
    pool = LayerSpec('avgpool', kernel = 2, stride = 2)
    with pytest.raises(PackingError):
        NetworkSpec((4,), ())
    with pytest.raises(PackingError):
        NetworkSpec((4,), (fc,), momentum = 1.0)
    with pytest.raises(PackingError):
        NetworkSpec((4,), (fc,), loss = 'cross_entropy')
    with pytest.raises(PackingError):
        NetworkSpec((4, 4), (conv,))
    with pytest.raises(PackingError):
        NetworkSpec((4, 4), (fc, conv, fc))
    with pytest.raises(PackingError):
        NetworkSpec((4, 4), (pool, fc))
    with pytest.raises(PackingError):
        NetworkSpec((16,), (conv, fc))
    with pytest.raises(PackingError):
        NetworkSpec((4,), (fc,), local_batch = 0)


def test_mlp_shorthand() -> None:
    spec = NetworkSpec.mlp((4, 4, 2), activation = 'tanh', degree = 7, learning_rate = 0.5)
    assert spec.dims == (4, 4, 2)
    assert spec.depth == 2
    assert spec.learning_rate == 0.5
    assert all(layer.activation == 'tanh' and layer.degree == 7 for layer in spec.layers)
    assert NetworkSpec(**{**spec.to_config(), 'layers': spec.layers}) == spec


def test_compile_alternates_orientation() -> None:
    plan = compile_network(NetworkSpec.mlp((4, 4, 2)), 16)
    assert plan.depth == 2
    assert plan.first.column and not plan.output.column
    assert plan.output.last and not plan.first.last
    assert plan.first.replicate == (1, 2)
    assert plan.output.replicate is None
    assert plan.cipher_count == 2
    assert plan.first.phi.target == 'sigmoid'
    assert plan.first.phi_prime.mode == 'derivative'
    assert plan.first.half == 8.0 and plan.first.mid == 0.0


@pytest.mark.parametrize('dims', [(4, 4, 2), (4, 4, 4, 2), (2, 4, 2)])
def test_rotations_match_the_budget(dims) -> None:
    spec = NetworkSpec.mlp(dims)
    plan = compile_network(spec, 16)
    assert plan.forward_rotations() + plan.backward_rotations() == rotation_budget(spec)


def test_rotation_budget_values() -> None:
    assert rotation_budget(NetworkSpec.mlp((4, 4, 2))) == 10
    assert rotation_budget(NetworkSpec.mlp((4, 4, 4, 2))) == 18


def test_rotation_offsets_cover_both_directions() -> None:
    plan = compile_network(NetworkSpec.mlp((4, 4, 2)), 16)
    offsets = plan.rotation_offsets()
    assert {1, 2, 4, 8} <= offsets
    assert 12 in offsets
    assert all(0 < o < 16 for o in offsets)


def test_wide_layers_split_over_ciphertexts() -> None:
    plan = compile_network(NetworkSpec.mlp((8, 16, 4)), 16)
    assert plan.first.layout.cipher_count == 8
    assert plan.cipher_count == plan.first.layout.cipher_count + plan.output.layout.cipher_count


def test_conv_plan() -> None:
    spec = conv_spec()
    assert layer_dims(spec) == [(16, 8, 2), (2, 2, 2)]
    plan = compile_network(spec, 32)
    conv, fc = plan.layers
    assert conv.kind == 'cv'
    assert conv.layout.patches == 4
    assert conv.pool_after is not None
    assert fc.pool_before is conv.pool_after
    assert conv.replicate is None
    # Two pooling rounds of the 2x2 window and one replication for the next layer
    assert conv.pool_after.forward_embedded == 3
    assert conv.pool_after.backward_embedded == 2
    assert plan.embedded_rotations() == 5


def test_init_weights() -> None:
    spec = NetworkSpec.mlp((4, 4, 2))
    weights = init_weights(spec, seed = 1)
    assert [W.shape for W in weights] == [(4, 4), (4, 2)]
    assert all(np.abs(W).max() <= 1.0 / math.sqrt(4) for W in weights)
    np.testing.assert_array_equal(weights[0], init_weights(spec, seed = 1)[0])
    assert not np.array_equal(weights[0], init_weights(spec, seed = 2)[0])

    relu = init_weights(NetworkSpec.mlp((4, 4, 2), activation = 'smooth_relu'), seed = 1)
    assert np.abs(relu[0]).max() <= math.sqrt(6.0 / 4)
    assert np.abs(relu[0]).max() > 1.0 / math.sqrt(4)

    assert [W.shape for W in init_weights(conv_spec())] == [(4, 2), (2, 2)]
