import typing

from dataclasses import dataclass, field

import numpy as np

from .errors import PackingError


@dataclass(frozen = True, eq = False)
class LinearTransform:
    """
    Real-linear map on the slot vector applied during a collective refresh.
    fn acts on arrays of shape (..., slots). rotation is set for pure left
    rotations so they can be applied exactly on coefficients.
    """
    key: str
    fn: typing.Callable[[np.ndarray], np.ndarray] = field(repr = False)
    rotation: typing.Optional[int] = None

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(values, dtype = float))

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0

    def matrix(self, slots: int) -> np.ndarray:
        """ A with fn(z) = A @ z """
        return self.fn(np.eye(slots)).T

    def transposed(self, slots: int) -> 'LinearTransform':
        if self.rotation is not None:
            return rotation(-self.rotation)
        return from_matrix(self.matrix(slots).T, key = f'T({self.key})')

    def then(self, other: 'LinearTransform') -> 'LinearTransform':
        """ Apply self first, then other """
        rotation = None
        if self.rotation is not None and other.rotation is not None:
            rotation = self.rotation + other.rotation
        return LinearTransform(
            key = f'{other.key}*{self.key}',
            fn = lambda z: other.fn(self.fn(z)),
            rotation = rotation
        )


def identity() -> LinearTransform:
    return LinearTransform('id', lambda z: z, rotation = 0)


def rotation(offset: int) -> LinearTransform:
    """ Left rotation by offset """
    return LinearTransform(f'rot({offset})', lambda z: np.roll(z, -offset, axis = -1), rotation = offset)


def masked(mask: np.ndarray) -> LinearTransform:
    mask = np.asarray(mask, dtype = float)
    tag = ''.join('1' if m else '0' for m in mask) if np.all((mask == 0) | (mask == 1)) else str(hash(mask.tobytes()))
    return LinearTransform(f'mask({tag})', lambda z: z * mask)


def replicate(stride: int, count: int) -> LinearTransform:
    """ Right rotate-and-sum: out = sum_i z shifted right by i * stride, i < count """
    def fn(z: np.ndarray) -> np.ndarray:
        return sum(np.roll(z, i * stride, axis = -1) for i in range(count))
    return LinearTransform(f'rr({stride},{count})', fn)


def gather(sources: np.ndarray, slots: int) -> LinearTransform:
    """ out[j] = z[sources[j]] where sources[j] >= 0, else 0 """
    sources = np.asarray(sources, dtype = np.int64)
    valid = sources >= 0

    def fn(z: np.ndarray) -> np.ndarray:
        out = np.zeros(z.shape[:-1] + (slots,))
        out[..., valid] = z[..., sources[valid]]
        return out
    return LinearTransform(f'gather({hash(sources.tobytes())})', fn)


def from_matrix(A: np.ndarray, key: typing.Optional[str] = None) -> LinearTransform:
    A = np.asarray(A, dtype = float)
    return LinearTransform(key or f'matrix({hash(A.tobytes())})', lambda z: z @ A.T)


def avg_pool(
    height: int,
    width: int,
    kernel: int,
    stride: int,
    channels: int,
    slots: int,
    src_stride: int = 1,
    channel_stride: typing.Optional[int] = None,
    dest_stride: int = 1,
    copies: int = 1,
    copy_stride: int = 1
) -> LinearTransform:
    """
    Average pooling of row-major height x width maps. Input pixel (c, y, x)
    sits at slot c * channel_stride + (y * width + x) * src_stride. Pooled
    output k = c * pooled + oy * out_w + ox is written at k * dest_stride
    and repeated copies times, copy_stride apart, for the next layer.
    """
    out_h, out_w = pooled_size(height, width, kernel, stride)
    if out_h < 1 or out_w < 1:
        raise PackingError(f'{kernel=} does not fit a {height}x{width} map')
    channel_stride = height * width * src_stride if channel_stride is None else channel_stride
    pooled = out_h * out_w
    last = (channels * pooled - 1) * dest_stride + (copies - 1) * copy_stride
    if last >= slots:
        raise PackingError(f'Pooled layout needs {last + 1} slots, only {slots} available')

    A = np.zeros((slots, slots))
    weight = 1.0 / (kernel * kernel)
    for c in range(channels):
        for oy in range(out_h):
            for ox in range(out_w):
                base = (c * pooled + oy * out_w + ox) * dest_stride
                for dy in range(kernel):
                    for dx in range(kernel):
                        src = c * channel_stride + ((oy * stride + dy) * width + ox * stride + dx) * src_stride
                        for r in range(copies):
                            A[base + r * copy_stride, src] += weight
    key = f'avgpool({height},{width},{kernel},{stride},{channels},{src_stride},{channel_stride},{dest_stride},{copies},{copy_stride})'
    return from_matrix(A, key = key)


def pooled_size(height: int, width: int, kernel: int, stride: int) -> typing.Tuple[int, int]:
    return (height - kernel) // stride + 1, (width - kernel) // stride + 1
