import math
import typing

from dataclasses import dataclass, field

import numpy as np

import ezmsg.core as ez

from .approx import ApproxPoly, activation, canonical_name, RELU_FAMILY, DEFAULT_INTERVAL
from .linear import LinearTransform, avg_pool, pooled_size
from .packing import (
    PackingLayout,
    block_stride,
    conv_layout,
    fc_layout,
    next_pow2,
    patch_grid,
    rotation_offsets,
)
from .errors import PackingError

LAYER_KINDS = ('fc', 'cv', 'avgpool')


@dataclass(frozen = True)
class LayerSpec:
    kind: str = 'fc'
    units: int = 0
    kernel: int = 0
    stride: int = 1
    filters: int = 1
    activation: str = 'sigmoid'
    degree: int = 3
    interval: typing.Tuple[float, float] = DEFAULT_INTERVAL
    method: str = 'least_squares'

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise PackingError(f'Unknown layer kind {self.kind!r}')
        if self.kind == 'fc' and self.units < 1:
            raise PackingError(f'Fully connected layer needs units, got {self.units}')
        if self.kind != 'fc' and (self.kernel < 1 or self.stride < 1):
            raise PackingError(f'{self.kind} layer needs a kernel and a stride')
        if self.kind == 'cv' and (self.filters < 1 or self.filters & (self.filters - 1)):
            raise PackingError(f'{self.filters=} must be a power of two')
        object.__setattr__(self, 'interval', tuple(float(v) for v in self.interval))
        if self.kind != 'avgpool':
            canonical_name(self.activation)

    def to_config(self) -> typing.Dict[str, typing.Any]:
        out: typing.Dict[str, typing.Any] = dict(kind = self.kind)
        if self.kind == 'fc':
            out['units'] = self.units
        else:
            out.update(kernel = self.kernel, stride = self.stride)
        if self.kind == 'cv':
            out['filters'] = self.filters
        if self.kind != 'avgpool':
            out.update(
                activation = self.activation, degree = self.degree,
                interval = list(self.interval), method = self.method
            )
        return out


@dataclass(frozen = True)
class NetworkSpec:
    """
    What the parties agree on before training: the layer chain, the
    learning rate, the local batch b and the number of global iterations.
    input_shape is (d,) for feature vectors or (height, width) for images.
    """
    input_shape: typing.Tuple[int, ...]
    layers: typing.Tuple[LayerSpec, ...]
    learning_rate: float = 1.0
    local_batch: int = 1
    iterations: int = 1
    momentum: float = 0.0
    nesterov: bool = False
    loss: str = 'l2'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'input_shape', tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, 'layers', tuple(self.layers))
        if not self.layers:
            raise PackingError('Network has no layers')
        if any(v < 1 for v in self.input_shape) or len(self.input_shape) not in (1, 2):
            raise PackingError(f'Bad {self.input_shape=}')
        if self.local_batch < 1 or self.iterations < 0:
            raise PackingError(f'{self.local_batch=} and {self.iterations=} must be positive')
        if self.loss != 'l2':
            raise PackingError(f'Unsupported loss {self.loss!r}')
        if not 0.0 <= self.momentum < 1.0:
            raise PackingError(f'{self.momentum=} outside [0, 1)')
        if self.layers[-1].kind != 'fc':
            raise PackingError('The output layer must be fully connected')
        for i, layer in enumerate(self.layers):
            if layer.kind == 'cv' and i != 0:
                raise PackingError('Convolution is supported as the first layer only')
            if layer.kind == 'avgpool' and (i == 0 or self.layers[i - 1].kind != 'cv'):
                raise PackingError('Average pooling must follow the convolution directly')
        if self.layers[0].kind == 'cv' and len(self.input_shape) != 2:
            raise PackingError('Convolution needs an image input_shape')

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    @property
    def weight_layers(self) -> typing.Tuple[LayerSpec, ...]:
        return tuple(layer for layer in self.layers if layer.kind != 'avgpool')

    @property
    def depth(self) -> int:
        """ Number of weight layers """
        return len(self.weight_layers)

    @property
    def dims(self) -> typing.Tuple[int, ...]:
        """ d, h_1, .., h_l for a fully connected chain """
        return (self.input_dim,) + tuple(layer.units for layer in self.weight_layers if layer.kind == 'fc')

    @classmethod
    def mlp(cls, dims: typing.Sequence[int], activation: str = 'sigmoid', degree: int = 3, **kwargs) -> 'NetworkSpec':
        layers = tuple(LayerSpec('fc', units = h, activation = activation, degree = degree) for h in dims[1:])
        return cls(input_shape = (dims[0],), layers = layers, **kwargs)

    def to_config(self) -> typing.Dict[str, typing.Any]:
        return dict(
            input_shape = list(self.input_shape),
            layers = [layer.to_config() for layer in self.layers],
            learning_rate = self.learning_rate,
            local_batch = self.local_batch,
            iterations = self.iterations,
            momentum = self.momentum,
            nesterov = self.nesterov,
            loss = self.loss,
        )


@dataclass(frozen = True, eq = False)
class PoolPlan:
    """ Average pooling folded into a transform refresh between CV and FC """
    kernel: int
    stride: int
    height: int
    width: int
    channels: int
    forward: LinearTransform = field(repr = False)
    backward: LinearTransform = field(repr = False)
    forward_embedded: int = 0
    backward_embedded: int = 0

    @property
    def outputs(self) -> int:
        return self.channels * math.prod(pooled_size(self.height, self.width, self.kernel, self.stride))

    def apply(self, maps: np.ndarray) -> np.ndarray:
        """ Plaintext pooling of (channels, height * width) maps, flattened channel-major """
        maps = np.asarray(maps, dtype = float).reshape(self.channels, self.height, self.width)
        oh, ow = pooled_size(self.height, self.width, self.kernel, self.stride)
        out = np.zeros((self.channels, oh, ow))
        for y in range(oh):
            for x in range(ow):
                window = maps[:, y * self.stride: y * self.stride + self.kernel, x * self.stride: x * self.stride + self.kernel]
                out[:, y, x] = window.mean(axis = (1, 2))
        return out.reshape(-1)

    def transpose(self, grad: np.ndarray) -> np.ndarray:
        """ Spread pooled gradients back over their windows """
        oh, ow = pooled_size(self.height, self.width, self.kernel, self.stride)
        grad = np.asarray(grad, dtype = float).reshape(self.channels, oh, ow)
        out = np.zeros((self.channels, self.height, self.width))
        weight = 1.0 / (self.kernel * self.kernel)
        for y in range(oh):
            for x in range(ow):
                out[:, y * self.stride: y * self.stride + self.kernel, x * self.stride: x * self.stride + self.kernel] += weight * grad[:, y, x][:, None, None]
        return out.reshape(self.channels, -1)


@dataclass(frozen = True, eq = False)
class LayerPlan:
    """ One weight layer of the compiled pipeline (index is 1-based) """
    index: int
    kind: str
    layout: PackingLayout
    n_in: int
    n_out: int
    phi: ApproxPoly
    phi_prime: ApproxPoly
    act: str
    replicate: typing.Optional[typing.Tuple[int, int]] = None
    pool_before: typing.Optional[PoolPlan] = None
    pool_after: typing.Optional[PoolPlan] = None
    last: bool = False

    @property
    def column(self) -> bool:
        return self.layout.orientation != 'row'

    @property
    def p_in(self) -> int:
        return self.layout.padded_dims[0]

    @property
    def p_out(self) -> int:
        return self.layout.padded_dims[1]

    @property
    def gap(self) -> int:
        return self.layout.gap

    @property
    def half(self) -> float:
        a, b = self.phi.interval
        return 0.5 * (b - a)

    @property
    def mid(self) -> float:
        a, b = self.phi.interval
        return 0.5 * (a + b)

    @property
    def inner_sum(self) -> typing.Tuple[int, int]:
        """ (p, s) of the forward RIS """
        if self.column:
            return 1, self.p_in
        return self.layout.stride, min(self.layout.blocks_per_cipher, self.p_in)

    @property
    def error_replicate(self) -> typing.Tuple[int, int]:
        """ (p, s) spreading this layer's error over its weight blocks """
        if self.column:
            return 1, self.p_in
        return self.layout.stride, min(self.layout.blocks_per_cipher, self.p_in)

    @property
    def error_inner_sum(self) -> typing.Tuple[int, int]:
        """ (p, s) of the RIS passing the error to the previous layer """
        if self.column:
            return self.layout.stride, min(self.layout.blocks_per_cipher, self.p_out)
        return 1, self.p_out

    def offsets(self) -> typing.Set[int]:
        slots = self.layout.slots
        out = rotation_offsets(*self.inner_sum, slots) | rotation_offsets(*self.error_replicate, slots, right = True)
        if self.replicate is not None:
            out |= rotation_offsets(*self.replicate, slots, right = True)
        if self.index > 1:
            out |= rotation_offsets(*self.error_inner_sum, slots)
        if self.kind == 'cv':
            tp = self.layout.patch_blocks
            out |= rotation_offsets(self.layout.stride, tp, slots)
            out |= rotation_offsets(self.layout.stride, tp, slots, right = True)
        return out

    def forward_rotations(self) -> int:
        """ Rotations of one forward pass; per-cipher steps count once per ciphertext """
        z = self.layout.cipher_count
        n = z * int(math.log2(self.inner_sum[1]))
        if self.replicate is not None:
            n += (z if self.column else 1) * int(math.log2(self.replicate[1]))
        return n

    def backward_rotations(self) -> int:
        z = self.layout.cipher_count
        n = (z if self.column else 1) * int(math.log2(self.error_replicate[1]))
        if self.index > 1:
            n += z * int(math.log2(self.error_inner_sum[1]))
        if self.kind == 'cv':
            n += 2 * int(math.log2(self.layout.patch_blocks))
        return n


@dataclass(frozen = True, eq = False)
class NetworkPlan:
    spec: NetworkSpec
    slots: int
    layers: typing.Tuple[LayerPlan, ...]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output(self) -> LayerPlan:
        return self.layers[-1]

    @property
    def first(self) -> LayerPlan:
        return self.layers[0]

    @property
    def cipher_count(self) -> int:
        """ Ciphertexts of the whole model (z) """
        return sum(layer.layout.cipher_count for layer in self.layers)

    def rotation_offsets(self) -> typing.Set[int]:
        out: typing.Set[int] = set()
        for layer in self.layers:
            out |= layer.offsets()
        return out

    def forward_rotations(self) -> int:
        return sum(layer.forward_rotations() for layer in self.layers)

    def backward_rotations(self) -> int:
        return sum(layer.backward_rotations() for layer in self.layers)

    def embedded_rotations(self) -> int:
        return sum(
            layer.pool_after.forward_embedded + layer.pool_after.backward_embedded
            for layer in self.layers if layer.pool_after is not None
        )


def _activation_pair(layer: LayerSpec) -> typing.Tuple[ApproxPoly, ApproxPoly]:
    kwargs = dict(degree = layer.degree, interval = layer.interval, method = layer.method)
    return activation(layer.activation, 'value', **kwargs), activation(layer.activation, 'derivative', **kwargs)


def layer_dims(spec: NetworkSpec) -> typing.List[typing.Tuple[int, int, int]]:
    """
    (n_in, n_out, n_next) per weight layer. n_next is what the following
    layer sees: pooled outputs after pooling, every padded patch block of
    a convolution otherwise (padded patches behave like constant units).
    """
    specs = list(spec.layers)
    pool = specs[1] if len(specs) > 1 and specs[1].kind == 'avgpool' else None
    out = []
    n_in = spec.input_dim
    for layer in spec.weight_layers:
        if layer.kind == 'cv':
            oh, ow = patch_grid(spec.input_shape, layer.kernel, layer.stride)
            n_out = layer.filters * oh * ow
            if pool is not None:
                n_next = layer.filters * math.prod(pooled_size(oh, ow, pool.kernel, pool.stride))
            else:
                n_next = layer.filters * next_pow2(oh * ow)
        else:
            n_out = n_next = layer.units
        out.append((n_in, n_out, n_next))
        n_in = n_next
    return out


def _layouts(spec: NetworkSpec, slots: int, pool: typing.Optional[LayerSpec]) -> typing.List[PackingLayout]:
    dims = layer_dims(spec)
    weight_specs = spec.weight_layers
    layouts: typing.List[PackingLayout] = []
    for j, (layer, (n_in, n_out, _)) in enumerate(zip(weight_specs, dims), start = 1):
        has_next = j < len(dims)
        if layer.kind == 'cv':
            layouts.append(conv_layout(
                spec.input_shape, layer.kernel, layer.stride, layer.filters, slots,
                next_h = weight_specs[1].units if has_next else None, pool_after = pool is not None
            ))
            continue
        pool_before = pool is not None and j == 2
        stride = block_stride(
            j, next_pow2(n_in), next_pow2(n_out),
            next_out = next_pow2(dims[j][1]) if has_next else None,
            prev_stride = layouts[-1].stride if layouts else None,
            pool_before = pool_before
        )
        layout = fc_layout(j, n_in, n_out, stride, slots)
        if pool_before and layout.cipher_count > 1:
            raise PackingError('The layer after pooling must fit one ciphertext')
        layouts.append(layout)
    return layouts


def _pool_plan(layout: PackingLayout, pool: LayerSpec, next_layout: PackingLayout, slots: int, grid: typing.Tuple[int, int]) -> PoolPlan:
    oh, ow = grid
    g_row = next_layout.stride
    geometry = dict(
        src_stride = layout.stride,
        channel_stride = layout.patch_blocks * layout.stride,
        dest_stride = g_row,
    )
    args = (oh, ow, pool.kernel, pool.stride, layout.filters, slots)
    forward = avg_pool(*args, copies = next_layout.padded_dims[1], **geometry)
    backward = avg_pool(*args, **geometry).transposed(slots)
    window = math.ceil(math.log2(pool.kernel * pool.kernel)) if pool.kernel > 1 else 0
    return PoolPlan(
        kernel = pool.kernel, stride = pool.stride, height = oh, width = ow,
        channels = layout.filters, forward = forward, backward = backward,
        forward_embedded = window + int(math.log2(next_layout.padded_dims[1])),
        backward_embedded = window
    )


def compile_network(spec: NetworkSpec, slots: int) -> NetworkPlan:
    """
    Fix every layer's layout, rotation parameters and activation fits.
    Layer j is column packed when odd and row packed when even; a column
    layer followed by a row layer replicates its outputs within blocks,
    a row layer followed by a column layer replicates its output vector
    across the column layer's blocks.
    """
    specs = list(spec.layers)
    pool = specs[1] if len(specs) > 1 and specs[1].kind == 'avgpool' else None
    weight_specs = spec.weight_layers
    dims = layer_dims(spec)
    layouts = _layouts(spec, slots, pool)
    ell = len(layouts)

    layers: typing.List[LayerPlan] = []
    pending_pool: typing.Optional[PoolPlan] = None
    for j, (layer, layout, (n_in, n_out, _)) in enumerate(zip(weight_specs, layouts, dims), start = 1):
        nxt = layouts[j] if j < ell else None
        phi, phi_prime = _activation_pair(layer)

        pool_after = None
        if layer.kind == 'cv' and pool is not None:
            if nxt is None:
                raise PackingError('Pooling needs a fully connected layer after it')
            grid = patch_grid(spec.input_shape, layer.kernel, layer.stride)
            pool_after = _pool_plan(layout, pool, nxt, slots, grid)

        replicate = None
        if nxt is not None and pool_after is None:
            if j % 2:
                replicate = (1, nxt.padded_dims[1])
            else:
                replicate = (nxt.stride, nxt.replication)

        layers.append(LayerPlan(
            index = j, kind = layer.kind, layout = layout, n_in = n_in, n_out = n_out,
            phi = phi, phi_prime = phi_prime, act = canonical_name(layer.activation),
            replicate = replicate, pool_before = pending_pool, pool_after = pool_after,
            last = nxt is None
        ))
        pending_pool = pool_after

    plan = NetworkPlan(spec = spec, slots = slots, layers = tuple(layers))
    ez.logger.debug(f'Compiled {ell} layers into {plan.cipher_count} ciphertexts')
    return plan


def init_weights(spec: NetworkSpec, seed: int = 0) -> typing.List[np.ndarray]:
    """
    Logical weight matrices, r uniform on [-1, 1]. Xavier layers use
    r / sqrt(fan_in); ReLU-like layers use He scaling r * sqrt(6 / fan_in)
    which has variance 2 / fan_in. Conv kernels are (f * f, filters).
    """
    rng = np.random.default_rng(seed)
    weights = []
    for layer, (n_in, _, _) in zip(spec.weight_layers, layer_dims(spec)):
        if layer.kind == 'cv':
            fan_in = layer.kernel * layer.kernel
            shape = (fan_in, layer.filters)
        else:
            fan_in = n_in
            shape = (n_in, layer.units)
        r = rng.uniform(-1.0, 1.0, size = shape)
        if canonical_name(layer.activation) in RELU_FAMILY:
            weights.append(r * math.sqrt(6.0 / fan_in))
        else:
            weights.append(r / math.sqrt(fan_in))
    return weights
