import math
import typing

from dataclasses import dataclass

import numpy as np

from .ledger import Evaluator, CT
from .errors import PackingError

ORIENTATIONS = ('row', 'column', 'conv')


def next_pow2(n: int) -> int:
    if n < 1:
        raise PackingError(f'{n=} must be positive')
    return 1 << (n - 1).bit_length()


def _check_pow2(s: int) -> None:
    if s < 1 or s & (s - 1):
        raise PackingError(f'{s=} must be a power of two')


def multi_cipher_split(elems: int, slots: int) -> int:
    """ Ciphertexts needed for elems values at slots per ciphertext """
    if elems < 1 or slots < 1:
        raise PackingError(f'{elems=} and {slots=} must be positive')
    return -(-elems // slots)


def block_stride(
    index: int,
    p_in: int,
    p_out: int,
    next_out: typing.Optional[int] = None,
    prev_stride: typing.Optional[int] = None,
    pool_before: bool = False,
    pool_after: bool = False
) -> int:
    """
    Slot distance between consecutive blocks of layer index (1-based).
    A column layer leaves room to replicate its outputs for the row layer
    after it; a row layer shares the stride of the column layer before it
    so both split over ciphertexts the same way.
    """
    if index % 2:
        if next_out is None or pool_after:
            return p_in
        return max(p_in, next_out)
    if pool_before or prev_stride is None:
        return p_out
    return prev_stride


@dataclass(frozen = True)
class PackingLayout:
    """
    Where a layer's weights live. Column (and conv) layers give each output
    neuron k a block holding its incoming weights W[:, k]; row layers give
    each input neuron i a block holding its outgoing weights W[i, :].
    Blocks are stride slots apart and split over as many ciphertexts as needed.
    """
    orientation: str
    logical_dims: typing.Tuple[int, int]
    padded_dims: typing.Tuple[int, int]
    stride: int
    slots: int
    patches: int = 1
    filters: int = 1

    def __post_init__(self) -> None:
        if self.orientation not in ORIENTATIONS:
            raise PackingError(f'Unknown orientation {self.orientation!r}')
        for p in self.padded_dims:
            _check_pow2(p)
        if self.stride < self.width:
            raise PackingError(f'Stride {self.stride} is narrower than the block width {self.width}')
        if self.stride > self.slots:
            raise PackingError(f'Stride {self.stride} exceeds {self.slots} slots')
        if self.orientation == 'conv' and self.cipher_count > 1:
            raise PackingError('Convolution blocks must fit one ciphertext')

    @property
    def width(self) -> int:
        """ Occupied slots at the start of each block """
        return self.padded_dims[1] if self.orientation == 'row' else self.padded_dims[0]

    @property
    def gap(self) -> int:
        return self.stride - self.width

    @property
    def blocks(self) -> int:
        return self.padded_dims[0] if self.orientation == 'row' else self.padded_dims[1]

    @property
    def blocks_per_cipher(self) -> int:
        return self.slots // self.stride

    @property
    def cipher_count(self) -> int:
        return multi_cipher_split(self.blocks, self.blocks_per_cipher)

    @property
    def patch_blocks(self) -> int:
        """ Padded patch count per filter of a conv layout """
        return self.padded_dims[1] // self.filters

    @property
    def replication(self) -> int:
        if self.orientation == 'row':
            return self.padded_dims[1]
        if self.orientation == 'conv':
            return self.patches
        return min(self.blocks, self.blocks_per_cipher)

    @property
    def valid_outputs(self) -> np.ndarray:
        if self.orientation == 'conv':
            tp = self.patch_blocks
            return np.array([c * tp + p for c in range(self.filters) for p in range(self.patches)])
        return np.arange(self.logical_dims[1])

    def block_slot(self, block: int) -> typing.Tuple[int, int]:
        bpc = self.blocks_per_cipher
        return block // bpc, (block % bpc) * self.stride

    def weight_slot(self, i: int, k: int) -> typing.Tuple[int, int]:
        """ (cipher, slot) of W[i, k] """
        if self.orientation == 'row':
            c, base = self.block_slot(i)
            return c, base + k
        c, base = self.block_slot(k)
        return c, base + i

    def output_slot(self, k: int) -> typing.Tuple[int, int]:
        """ (cipher, slot) holding output neuron k after the inner sum """
        if self.orientation == 'row':
            return 0, k
        return self.block_slot(k)

    # Cleartext slot vectors

    def place_outputs(self, values, value_slots: typing.Optional[np.ndarray] = None) -> typing.List[np.ndarray]:
        """ Per-cipher vectors with values[k] at the slot of output k """
        values = np.asarray(values, dtype = float)
        count = 1 if self.orientation == 'row' else self.cipher_count
        out = [np.zeros(self.slots) for _ in range(count)]
        ks = np.arange(len(values)) if value_slots is None else value_slots
        for v, k in zip(values, ks):
            c, s = self.output_slot(int(k))
            out[c][s] = v
        return out

    def output_mask(self, value: float = 1.0) -> typing.List[np.ndarray]:
        valid = self.valid_outputs
        return self.place_outputs(np.full(len(valid), value), valid)

    def read_outputs(self, vectors: typing.Sequence[np.ndarray]) -> np.ndarray:
        return np.array([vectors[c][s] for c, s in (self.output_slot(int(k)) for k in range(self.padded_dims[1]))])

    def expand_kernel(self, K: np.ndarray) -> np.ndarray:
        """
        Conv kernel (f*f, filters) as a (p_in, p_out) matrix, filter c
        repeated over all of its padded patch blocks
        """
        K = np.asarray(K, dtype = float)
        if K.ndim == 1:
            K = K[:, None]
        p_in, p_out = self.padded_dims
        W = np.zeros((p_in, p_out))
        tp = self.patch_blocks
        for c in range(self.filters):
            W[: K.shape[0], c * tp: (c + 1) * tp] = K[:, c: c + 1]
        return W

    def pack_matrix(self, W: np.ndarray) -> typing.List[np.ndarray]:
        W = np.asarray(W, dtype = float)
        if self.orientation == 'conv':
            W = self.expand_kernel(W)
        p_in, p_out = self.padded_dims
        if W.shape[0] > p_in or W.shape[1] > p_out:
            raise PackingError(f'Matrix of shape {W.shape} exceeds padded dims {self.padded_dims}')
        out = [np.zeros(self.slots) for _ in range(self.cipher_count)]
        for i, k in zip(*np.nonzero(W)):
            c, s = self.weight_slot(int(i), int(k))
            out[c][s] = W[i, k]
        return out

    def unpack_matrix(self, vectors: typing.Sequence[np.ndarray], logical: bool = True) -> np.ndarray:
        p_in, p_out = self.padded_dims
        if self.orientation == 'conv':
            tp = self.patch_blocks
            K = np.zeros((p_in, self.filters))
            for i in range(p_in):
                for c in range(self.filters):
                    ci, s = self.weight_slot(i, c * tp)
                    K[i, c] = vectors[ci][s]
            return K[: self.logical_dims[0]] if logical else K
        W = np.zeros((p_in, p_out))
        for i in range(p_in):
            for k in range(p_out):
                c, s = self.weight_slot(i, k)
                W[i, k] = vectors[c][s]
        return W[: self.logical_dims[0], : self.logical_dims[1]] if logical else W

    def replicate_input(self, x) -> np.ndarray:
        """ Column layer input: x copied into every block of a ciphertext """
        x = np.asarray(x, dtype = float)
        if self.orientation == 'row':
            raise PackingError('Row layers take per-block replicated inputs')
        if len(x) > self.width:
            raise PackingError(f'{len(x)} inputs exceed block width {self.width}')
        out = np.zeros(self.slots)
        for b in range(self.replication):
            out[b * self.stride: b * self.stride + len(x)] = x
        return out

    def replicate_rows(self, x) -> typing.List[np.ndarray]:
        """ Row layer input: x[i] copied across block i """
        x = np.asarray(x, dtype = float)
        if self.orientation != 'row':
            raise PackingError('Only row layers take per-block replicated inputs')
        out = [np.zeros(self.slots) for _ in range(self.cipher_count)]
        for i, v in enumerate(x):
            c, base = self.block_slot(i)
            out[c][base: base + self.padded_dims[1]] = v
        return out


@dataclass(frozen = True, eq = False)
class PackedTensor(typing.Generic[CT]):
    """ Ciphertexts (or cleartext slot vectors) of one logical matrix """
    ciphers: typing.Tuple[typing.Any, ...]
    layout: PackingLayout
    logical_shape: typing.Tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'ciphers', tuple(self.ciphers))

    def __len__(self) -> int:
        return len(self.ciphers)

    def __iter__(self):
        return iter(self.ciphers)

    def __getitem__(self, i: int):
        return self.ciphers[i]

    def map(self, fn: typing.Callable[[typing.Any], typing.Any]) -> 'PackedTensor':
        return PackedTensor(tuple(fn(c) for c in self.ciphers), self.layout, self.logical_shape)

    def zip_map(self, other: 'PackedTensor', fn: typing.Callable[[typing.Any, typing.Any], typing.Any]) -> 'PackedTensor':
        return PackedTensor(tuple(fn(a, b) for a, b in zip(self.ciphers, other.ciphers)), self.layout, self.logical_shape)


def fc_layout(index: int, n_in: int, n_out: int, stride: int, slots: int) -> PackingLayout:
    return PackingLayout(
        orientation = 'column' if index % 2 else 'row',
        logical_dims = (n_in, n_out),
        padded_dims = (next_pow2(n_in), next_pow2(n_out)),
        stride = stride,
        slots = slots
    )


def ap_layouts(dims: typing.Sequence[int], slots: int) -> typing.List[PackingLayout]:
    """ Alternating layouts of a fully connected chain d, h_1, .., h_l """
    if len(dims) < 2:
        raise PackingError('Need at least one layer')
    padded = [next_pow2(d) for d in dims]
    layouts: typing.List[PackingLayout] = []
    for j in range(1, len(dims)):
        stride = block_stride(
            j, padded[j - 1], padded[j],
            next_out = padded[j + 1] if j + 1 < len(dims) else None,
            prev_stride = layouts[-1].stride if layouts else None
        )
        layouts.append(fc_layout(j, dims[j - 1], dims[j], stride, slots))
    return layouts


def pack_weights_ap(
    weights: typing.Sequence[np.ndarray],
    slots: int,
    layouts: typing.Optional[typing.Sequence[PackingLayout]] = None
) -> typing.List[PackedTensor]:
    """ Layer j column-packed when j is odd and row-packed when even, zero padded """
    if not weights:
        raise PackingError('No weight matrices')
    if layouts is None:
        dims = [np.shape(weights[0])[0]] + [np.shape(W)[1] for W in weights]
        layouts = ap_layouts(dims, slots)
    return [
        PackedTensor(tuple(layout.pack_matrix(W)), layout, tuple(np.shape(W)))
        for W, layout in zip(weights, layouts)
    ]


def unpack(packed: PackedTensor, vectors: typing.Optional[typing.Sequence[np.ndarray]] = None) -> np.ndarray:
    """ Logical matrix from cleartext slot vectors (the tensor's own when omitted) """
    vectors = packed.ciphers if vectors is None else vectors
    return packed.layout.unpack_matrix([np.asarray(v, dtype = float) for v in vectors])


def prepare_inputs(
    x,
    h1: int,
    d: int,
    stride: typing.Optional[int] = None,
    slots: typing.Optional[int] = None
) -> np.ndarray:
    """ x replicated h1 times, blocks stride apart (default d + max(h1 - d, 0)) """
    x = np.asarray(x, dtype = float)
    if len(x) != d:
        raise PackingError(f'Expected {d} features, got {len(x)}')
    stride = d + max(h1 - d, 0) if stride is None else stride
    if stride < d:
        raise PackingError(f'{stride=} is narrower than {d} features')
    size = h1 * stride if slots is None else slots
    if h1 * stride > size:
        raise PackingError(f'{h1} copies at {stride=} exceed {size} slots')
    out = np.zeros(size)
    for b in range(h1):
        out[b * stride: b * stride + d] = x
    return out


def prepare_labels(y, ell: int, h_ell: int, stride: typing.Optional[int] = None) -> np.ndarray:
    """ Labels spaced to match an odd (column) output layer, contiguous otherwise """
    y = np.asarray(y, dtype = float)
    if len(y) != h_ell:
        raise PackingError(f'Expected {h_ell} label entries, got {len(y)}')
    if ell % 2 == 0:
        return y.copy()
    spacing = h_ell + 1 if stride is None else stride
    out = np.zeros(h_ell * spacing)
    out[::spacing] = y
    return out


def make_masks(layout: PackingLayout) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    m1 selects the first slot of each block (where inner sums land),
    m2 the leading logical outputs (where a row layer's outputs land).
    """
    m1 = np.zeros(layout.slots)
    m1[: layout.replication * layout.stride: layout.stride] = 1.0
    m2 = np.zeros(layout.slots)
    m2[: layout.logical_dims[1]] = 1.0
    return m1, m2


# Convolution

def patch_grid(image_shape: typing.Tuple[int, int], kernel: int, stride: int) -> typing.Tuple[int, int]:
    height, width = image_shape
    if kernel < 1 or stride < 1 or kernel > height or kernel > width:
        raise PackingError(f'{kernel=} with {stride=} does not fit a {height}x{width} image')
    if (height - kernel) % stride or (width - kernel) % stride:
        raise PackingError(f'{kernel=} with {stride=} does not tile a {height}x{width} image')
    return (height - kernel) // stride + 1, (width - kernel) // stride + 1


def extract_patches(image: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """ (t, kernel * kernel) row-major patches """
    image = np.asarray(image, dtype = float)
    oh, ow = patch_grid(image.shape, kernel, stride)
    return np.array([
        image[y * stride: y * stride + kernel, x * stride: x * stride + kernel].ravel()
        for y in range(oh) for x in range(ow)
    ])


def conv_layout(
    image_shape: typing.Tuple[int, int],
    kernel: int,
    stride: int,
    filters: int,
    slots: int,
    next_h: typing.Optional[int] = None,
    pool_after: bool = False
) -> PackingLayout:
    oh, ow = patch_grid(image_shape, kernel, stride)
    t = oh * ow
    p_in = next_pow2(kernel * kernel)
    p_out = filters * next_pow2(t)
    g = block_stride(1, p_in, p_out, next_out = None if next_h is None else next_pow2(next_h), pool_after = pool_after)
    return PackingLayout(
        orientation = 'conv',
        logical_dims = (kernel * kernel, filters * t),
        padded_dims = (p_in, p_out),
        stride = g,
        slots = slots,
        patches = t,
        filters = filters
    )


def pack_patches(image: np.ndarray, kernel: int, stride: int, layout: PackingLayout) -> np.ndarray:
    """ Patch p in block c * t_pad + p for every filter c """
    patches = extract_patches(image, kernel, stride)
    out = np.zeros(layout.slots)
    tp = layout.patch_blocks
    for c in range(layout.filters):
        for p, patch in enumerate(patches):
            _, base = layout.block_slot(c * tp + p)
            out[base: base + len(patch)] = patch
    return out


def pack_conv(
    image: np.ndarray,
    kernel: int,
    stride: int,
    next_h: typing.Optional[int] = None,
    filters: int = 1,
    slots: typing.Optional[int] = None,
    pool_after: bool = False
) -> typing.Tuple[PackedTensor, PackingLayout]:
    """
    Decompose an image into its t kernel-sized patches. With a fully
    connected layer next the blocks leave room for its outputs; the
    kernel layout replicates each filter t times with the same stride.
    """
    image = np.asarray(image, dtype = float)
    if slots is None:
        oh, ow = patch_grid(image.shape, kernel, stride)
        slots = filters * next_pow2(oh * ow) * max(next_pow2(kernel * kernel), next_pow2(next_h or 1))
    layout = conv_layout(image.shape, kernel, stride, filters, slots, next_h, pool_after)
    inputs = PackedTensor((pack_patches(image, kernel, stride, layout),), layout, layout.logical_dims)
    return inputs, layout


# Rotation macros

def _peek(x) -> typing.Optional[np.ndarray]:
    return getattr(x, 'values', None)


def _check_rr(x, p: int, s: int, support: typing.Optional[np.ndarray] = None) -> None:
    occupied = _peek(x) if support is None else np.asarray(support, dtype = float)
    if occupied is None or s == 1:
        return
    nonzero = np.flatnonzero(occupied)
    n = len(occupied)
    covered = ((nonzero[:, None] + p * np.arange(1, s)[None, :]) % n).ravel()
    if np.any(occupied[covered] != 0):
        raise PackingError(f'Replication by {s} at stride {p} overlaps occupied slots')


def ris(ev: Evaluator[CT], x, p: int, s: int):
    """
    Rotate for inner sum: after log2(s) rotations by p, 2p, 4p, .. slot j
    holds the sum of slots j, j + p, .., j + (s - 1) p.
    """
    if isinstance(x, PackedTensor):
        return x.map(lambda c: ris(ev, c, p, s))
    _check_pow2(s)
    step = 1
    while step < s:
        x = ev.add(x, ev.rot_l(x, p * step))
        step *= 2
    return x


def rr(ev: Evaluator[CT], x, p: int, s: int, support: typing.Optional[np.ndarray] = None):
    """
    Rotate for replication: the value at j is copied to j + p, .., j + (s - 1) p
    with log2(s) right rotations. Those slots must start out empty.

    Emptiness is checked against support, the cleartext mask x was last
    multiplied by, when one is given, and otherwise against the slots of a
    reference ciphertext. A lattice ciphertext has no readable slots, so
    without a support only the PackedTensor layout checks below guard it.
    """
    if isinstance(x, PackedTensor):
        layout = x.layout
        if p < layout.stride and p * s > layout.stride:
            raise PackingError(f'Replication by {s} at {p=} overruns blocks of stride {layout.stride}')
        if p >= layout.stride and s > layout.blocks_per_cipher:
            raise PackingError(f'Replication across {s} blocks exceeds {layout.blocks_per_cipher} per cipher')
        return x.map(lambda c: rr(ev, c, p, s, support))
    _check_pow2(s)
    _check_rr(x, p, s, support)
    step = 1
    while step < s:
        x = ev.add(x, ev.rot_r(x, p * step))
        step *= 2
    return x


def rotation_offsets(p: int, s: int, slots: int, right: bool = False) -> typing.Set[int]:
    """ Left-rotation offsets used by ris or rr for (p, s) """
    out = set()
    step = 1
    while step < s:
        out.add((-p * step if right else p * step) % slots)
        step *= 2
    return out


def encrypt_packed(ev, pk, packed: PackedTensor) -> PackedTensor:
    return packed.map(lambda v: ev.encrypt_values(pk, v))


def decrypt_packed(ev, packed: PackedTensor, shares) -> PackedTensor:
    return packed.map(lambda c: ev.decrypt_values(c, shares))
