import typing

from dataclasses import dataclass, field, replace

import numpy as np

import ezmsg.core as ez

from .ledger import Evaluator, CT
from .linear import LinearTransform
from .approx import eval_poly_encrypted
from .network import NetworkPlan, LayerPlan, init_weights
from .packing import PackedTensor, PackingLayout, ris, rr, pack_patches
from .errors import LevelExhaustedError, ProtocolError, PackingError

Inputs = typing.Union[np.ndarray, typing.Sequence[typing.Any]]


class Collective(typing.Protocol):
    """ Operations every party takes part in """

    @property
    def n_parties(self) -> int: ...

    def bootstrap(self, ct, transform: typing.Optional[LinearTransform] = None): ...

    def key_switch(self, ct, target): ...

    def decrypt(self, ct) -> np.ndarray: ...


class LocalCollective:
    """ All shares held in-process; used by tests and single-machine runs """

    def __init__(self, ev: Evaluator, shares: typing.Sequence[typing.Any]) -> None:
        self.ev = ev
        self.shares = list(shares)

    @property
    def n_parties(self) -> int:
        return len(self.shares)

    def bootstrap(self, ct, transform: typing.Optional[LinearTransform] = None):
        if transform is None:
            return self.ev.d_bootstrap(ct, self.shares)
        return self.ev.d_bootstrap_alt(ct, transform, self.shares)

    def key_switch(self, ct, target):
        return self.ev.d_key_switch(ct, target, self.shares)

    def decrypt(self, ct) -> np.ndarray:
        return self.ev.decrypt_values(ct, self.shares)


@dataclass(frozen = True)
class EncryptedModel:
    weights: typing.Tuple[PackedTensor, ...]
    iteration: int = 0
    velocity: typing.Optional[typing.Tuple[PackedTensor, ...]] = None

    @property
    def cipher_count(self) -> int:
        return sum(len(w) for w in self.weights)

    def ciphers(self) -> typing.Iterator[typing.Any]:
        for w in self.weights:
            yield from w


@dataclass(frozen = True)
class GradientSet:
    grads: typing.Tuple[PackedTensor, ...]
    samples: int = 1

    def ciphers(self) -> typing.Iterator[typing.Any]:
        for g in self.grads:
            yield from g


@dataclass
class LayerTrace:
    """ What the backward pass needs from the forward pass of one layer """
    inputs: Inputs
    L: typing.Tuple[typing.Any, ...]
    D: typing.Optional[typing.Tuple[typing.Any, ...]] = None
    pooled: typing.Optional[typing.Any] = None


@dataclass
class ForwardContext:
    layers: typing.List[LayerTrace] = field(default_factory = list)

    @property
    def output(self) -> typing.Tuple[typing.Any, ...]:
        return self.layers[-1].L


def add_gradients(ev: Evaluator, a: GradientSet, b: GradientSet) -> GradientSet:
    if len(a.grads) != len(b.grads):
        raise ProtocolError('Gradient sets of different networks')
    grads = tuple(ga.zip_map(gb, ev.add) for ga, gb in zip(a.grads, b.grads))
    return GradientSet(grads, a.samples + b.samples)


def leading_mask(count: int, slots: int, value: float = 1.0) -> np.ndarray:
    m = np.zeros(slots)
    m[: count] = value
    return m


def kernel_mask(layout: PackingLayout) -> np.ndarray:
    """ The f*f kernel slots of the first block of every filter """
    m = np.zeros(layout.slots)
    for c in range(layout.filters):
        _, base = layout.block_slot(c * layout.patch_blocks)
        m[base: base + layout.logical_dims[0]] = 1.0
    return m


class Engine(typing.Generic[CT]):
    """
    Encrypted forward and backward passes over a compiled network, one
    sample at a time. Refreshes are inserted greedily: a ciphertext is
    bootstrapped right before a step that would take it below the lowest
    level a refresh can run at.
    """

    def __init__(
        self,
        ev: Evaluator[CT],
        plan: NetworkPlan,
        collective: Collective,
        boot_level: typing.Optional[int] = None
    ) -> None:
        if plan.slots != ev.slots:
            raise PackingError(f'Network compiled for {plan.slots} slots, ring has {ev.slots}')
        self.ev = ev
        self.plan = plan
        self.collective = collective
        self.boot_level = ev.bootstrap_level(collective.n_parties) if boot_level is None else boot_level
        self._masks = {layer.index: self._output_masks(layer) for layer in plan.layers}
        # Cleartext masks reused by every sample
        self._leading = {layer.index: leading_mask(layer.n_out, ev.slots) for layer in plan.layers}
        self._valid = {
            layer.index: layer.layout.output_mask() if layer.column else [self._leading[layer.index]]
            for layer in plan.layers
        }
        self._kernels = {layer.index: kernel_mask(layer.layout) for layer in plan.layers if layer.kind == 'cv'}

    # Setup

    def _output_masks(self, layer: LayerPlan) -> typing.List[np.ndarray]:
        if layer.column:
            return layer.layout.output_mask(1.0 / layer.half)
        return [leading_mask(layer.n_out, self.ev.slots, 1.0 / layer.half)]

    def rotation_offsets(self) -> typing.Set[int]:
        return self.plan.rotation_offsets()

    def init_model(self, pk, seed: int = 0, weights: typing.Optional[typing.Sequence[np.ndarray]] = None) -> EncryptedModel:
        """ Pack and encrypt initial weights at the top level """
        weights = init_weights(self.plan.spec, seed) if weights is None else weights
        packed = tuple(self.encrypt_matrix(pk, layer, W) for layer, W in zip(self.plan.layers, weights))
        velocity = None
        if self.plan.spec.momentum > 0.0:
            velocity = tuple(
                PackedTensor(tuple(self.ev.encrypt_values(pk, 0.0) for _ in w), w.layout, w.logical_shape)
                for w in packed
            )
        ez.logger.info(f'Encrypted initial model in {sum(len(w) for w in packed)} ciphertexts')
        return EncryptedModel(weights = packed, velocity = velocity)

    def encrypt_matrix(self, pk, layer: LayerPlan, W: np.ndarray) -> PackedTensor:
        vectors = layer.layout.pack_matrix(W)
        return PackedTensor(tuple(self.ev.encrypt_values(pk, v) for v in vectors), layer.layout, tuple(np.shape(W)))

    def pack_input(self, x: np.ndarray) -> np.ndarray:
        """ Layer-one input slots of a sample """
        first = self.plan.first
        if first.kind == 'cv':
            spec = self.plan.spec.layers[0]
            image = np.asarray(x, dtype = float).reshape(self.plan.spec.input_shape)
            return pack_patches(image, spec.kernel, spec.stride, first.layout)
        return first.layout.replicate_input(np.ravel(x))

    def pack_label(self, y: np.ndarray) -> typing.List[np.ndarray]:
        out = self.plan.output
        return out.layout.place_outputs(np.ravel(y))

    def encrypt_query(self, pk, x: np.ndarray):
        return self.ev.encrypt_values(pk, self.pack_input(x))

    def decrypt_model(self, model: EncryptedModel, logical: bool = True) -> typing.List[np.ndarray]:
        """ Collective decryption, for monitoring in simulations only """
        return [
            w.layout.unpack_matrix([self.collective.decrypt(c) for c in w], logical = logical)
            for w in model.weights
        ]

    # Level management

    def ready(self, ct: CT, need: int) -> CT:
        """ Bootstrap ct unless need more levels still leave it refreshable """
        if ct.level - need >= self.boot_level:
            return ct
        if ct.level < self.boot_level:
            raise LevelExhaustedError(f'Ciphertext at level {ct.level} is below the refresh level {self.boot_level}')
        if self.ev.top_level - need < self.boot_level:
            raise LevelExhaustedError(f'A step needing {need} levels cannot run between refreshes')
        ez.logger.debug(f'Bootstrap at level {ct.level} before a step needing {need}')
        return self.collective.bootstrap(ct)

    def _mask(self, ct: CT, values: np.ndarray) -> CT:
        ev = self.ev
        return ev.res(ev.mul_pt(ct, values))

    def _mul(self, ct: CT, other) -> CT:
        ev = self.ev
        if isinstance(other, np.ndarray):
            return ev.res(ev.mul_pt(ct, other))
        return ev.res(ev.mul_ct(ct, other))

    def _activate(self, layer: LayerPlan, T: CT, train: bool) -> typing.Tuple[CT, typing.Optional[CT]]:
        need = max(layer.phi.depth, 1)
        if train:
            need = max(need, layer.phi_prime.depth, 1)
        T = self.ready(T, need)
        L = eval_poly_encrypted(self.ev, T, layer.phi, prepared = True)
        D = eval_poly_encrypted(self.ev, T, layer.phi_prime, prepared = True) if train else None
        return L, D

    # Forward

    def forward_fc(self, layer: LayerPlan, inputs: Inputs, W: PackedTensor, train: bool = True) -> LayerTrace:
        """
        U = inputs x W through a slot-wise product, an inner sum, the output
        mask (which also maps onto the activation's unit interval) and the
        replication the next layer expects; then L = phi(U), D = phi'(U).
        """
        ev = self.ev
        offset = -layer.mid / layer.half
        masks = self._masks[layer.index]

        if not isinstance(inputs, np.ndarray):
            inputs = tuple(self.ready(a, 2) for a in inputs)

        def operand(c: int):
            if isinstance(inputs, np.ndarray):
                return inputs
            return inputs[c] if len(inputs) > 1 else inputs[0]

        products = [ris(ev, self._mul(w, operand(c)), *layer.inner_sum) for c, w in enumerate(W)]
        if layer.column:
            outputs = [self._mask(p, masks[c]) for c, p in enumerate(products)]
        else:
            total = products[0]
            for p in products[1:]:
                total = ev.add(total, p)
            outputs = [self._mask(total, masks[0])]

        if layer.replicate is not None:
            outputs = [rr(ev, u, *layer.replicate, support = m) for u, m in zip(outputs, masks)]
        if offset != 0.0:
            outputs = [ev.add_const(u, offset) for u in outputs]

        Ls, Ds = [], []
        for T in outputs:
            L, D = self._activate(layer, T, train)
            Ls.append(L)
            Ds.append(D)
        return LayerTrace(inputs = inputs, L = tuple(Ls), D = tuple(Ds) if train else None)

    def avg_pool_via_bootstrap(self, layer: LayerPlan, L_cv: CT) -> CT:
        """
        Average pooling and the slot rearrangement for the next layer,
        both applied inside one transform refresh.
        """
        pool = layer.pool_after
        if pool is None:
            raise ProtocolError(f'Layer {layer.index} is not followed by pooling')
        self.ev.counters.embedded_rotations += pool.forward_embedded
        return self.collective.bootstrap(L_cv, pool.forward)

    def forward(self, model: EncryptedModel, x, encrypted: bool = False, train: bool = True) -> ForwardContext:
        """ x is a packed layer-one input vector or, when encrypted, its ciphertext """
        if len(model.weights) != self.plan.depth:
            raise ProtocolError(f'Model has {len(model.weights)} layers, network has {self.plan.depth}')
        ctx = ForwardContext()
        inputs: Inputs = (x,) if encrypted else np.asarray(x, dtype = float)
        for layer, W in zip(self.plan.layers, model.weights):
            trace = self.forward_fc(layer, inputs, W, train)
            ctx.layers.append(trace)
            if layer.pool_after is not None:
                trace.pooled = self.avg_pool_via_bootstrap(layer, trace.L[0])
                inputs = (trace.pooled,)
            else:
                inputs = trace.L
        return ctx

    # Backward

    def output_error(self, layer: LayerPlan, trace: LayerTrace, labels: typing.Sequence[np.ndarray]) -> typing.List[CT]:
        """ E = (y - L) * phi'(U) on the valid outputs """
        ev = self.ev
        errors = []
        for L, D, y, m in zip(trace.L, trace.D, labels, self._valid[layer.index]):
            L = self.ready(L, 2)
            diff = ev.add_plain(ev.neg(L), y)
            errors.append(self._mul(self._mask(diff, m), self.ready(D, 1)))
        return errors

    def backward_fc(
        self,
        layer: LayerPlan,
        trace: LayerTrace,
        W: PackedTensor,
        E: typing.Sequence[CT],
        previous: typing.Optional[LayerTrace] = None
    ) -> typing.Tuple[typing.Optional[typing.List[CT]], PackedTensor]:
        """
        Gradient of layer j and the error of layer j - 1, both without
        transposing anything: the error is replicated over the weight
        blocks, multiplied slot-wise and summed the other way round.
        """
        ev = self.ev
        if trace.D is None:
            raise ProtocolError(f'Layer {layer.index} was run without keeping its forward context')
        first = layer.index == 1
        if layer.pool_before is not None:
            need = 1
        elif first:
            need = 2 if layer.kind == 'cv' else 1
        else:
            need = 3
        E = [self.ready(e, need) for e in E]

        if layer.column:
            E_rep = [rr(ev, e, *layer.error_replicate) for e in E]
        else:
            shared = rr(ev, E[0], *layer.error_replicate)
            E_rep = [shared] * len(W)

        inputs = trace.inputs
        if not isinstance(inputs, np.ndarray):
            inputs = tuple(self.ready(a, 1) for a in inputs)

        def operand(c: int):
            if isinstance(inputs, np.ndarray):
                return inputs
            return inputs[c] if len(inputs) > 1 else inputs[0]

        grads = [self._mul(e, operand(c)) for c, e in enumerate(E_rep)]
        if layer.kind == 'cv':
            g = layer.layout.stride
            tp = layer.layout.patch_blocks
            kmask = self._kernels[layer.index]
            grads = [rr(ev, self._mask(ris(ev, grad, g, tp), kmask), g, tp, support = kmask) for grad in grads]
        grad = PackedTensor(tuple(grads), layer.layout, W.logical_shape)

        if first:
            return None, grad
        if previous is None or previous.D is None:
            raise ProtocolError(f'Layer {layer.index - 1} forward context is missing')

        sums = [ris(ev, self._mul(w, e), *layer.error_inner_sum) for w, e in zip(W, E_rep)]
        if layer.pool_before is not None:
            pool = layer.pool_before
            ev.counters.embedded_rotations += pool.backward_embedded
            spread = self.collective.bootstrap(sums[0], pool.backward)
            return [self._mul(spread, self.ready(previous.D[0], 1))], grad

        prev_layer = self.plan.layers[layer.index - 2]
        if layer.column:
            total = sums[0]
            for s in sums[1:]:
                total = ev.add(total, s)
            masked = [self._mask(total, self._leading[prev_layer.index])]
        else:
            masks = self._valid[prev_layer.index] if prev_layer.column else prev_layer.layout.output_mask()
            masked = [self._mask(s, m) for s, m in zip(sums, masks)]
        return [self._mul(e, self.ready(d, 1)) for e, d in zip(masked, previous.D)], grad

    def backward(self, model: EncryptedModel, ctx: ForwardContext, y) -> GradientSet:
        labels = self.pack_label(y)
        layers = self.plan.layers
        E = self.output_error(layers[-1], ctx.layers[-1], labels)
        grads: typing.List[PackedTensor] = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            previous = ctx.layers[i - 1] if i > 0 else None
            E, grads[i] = self.backward_fc(layers[i], ctx.layers[i], model.weights[i], E, previous)
        return GradientSet(tuple(grads))

    def lgd_compute(self, model: EncryptedModel, xs: typing.Sequence[np.ndarray], ys: typing.Sequence[np.ndarray]) -> GradientSet:
        """ Local gradients summed over the batch, one sample at a time """
        if len(xs) == 0 or len(xs) != len(ys):
            raise ProtocolError(f'Batch of {len(xs)} inputs and {len(ys)} labels')
        total: typing.Optional[GradientSet] = None
        for x, y in zip(xs, ys):
            ctx = self.forward(model, self.pack_input(x))
            g = self.backward(model, ctx, y)
            total = g if total is None else add_gradients(self.ev, total, g)
        return total

    # Update

    def apply_update(
        self,
        model: EncryptedModel,
        grads: GradientSet,
        learning_rate: typing.Optional[float] = None,
        global_batch: typing.Optional[int] = None
    ) -> EncryptedModel:
        """
        W += lr / B * grad through set_scale, then refresh. With momentum the
        velocity V = mu V + lr / B * grad is kept encrypted and W += V, or
        W += mu V + lr / B * grad for Nesterov.
        """
        ev = self.ev
        spec = self.plan.spec
        lr = spec.learning_rate if learning_rate is None else learning_rate
        B = spec.local_batch * self.collective.n_parties if global_batch is None else global_batch
        mu = spec.momentum
        need = 2 if spec.nesterov and mu > 0.0 else 1

        def step(g: CT) -> CT:
            g = self.ready(g, need)
            return ev.set_scale(g, g.scale * B / lr)

        weights, velocity = [], []
        for i, (W, G) in enumerate(zip(model.weights, grads.grads)):
            steps = G.map(step)
            if model.velocity is None or mu == 0.0:
                updated = W.zip_map(steps, ev.add)
            else:
                V = model.velocity[i].map(lambda v: ev.mul_const(v, mu)).zip_map(steps, ev.add)
                if spec.nesterov:
                    delta = V.map(lambda v: ev.mul_const(v, mu)).zip_map(steps, ev.add)
                else:
                    delta = V
                updated = W.zip_map(delta, ev.add)
                velocity.append(V.map(self.collective.bootstrap))
            weights.append(updated.map(self.collective.bootstrap))

        ez.logger.debug(f'Updated model to iteration {model.iteration + 1} with {lr=} {B=}')
        return replace(
            model, weights = tuple(weights), iteration = model.iteration + 1,
            velocity = tuple(velocity) if velocity else model.velocity
        )

    # Inference

    def predict_oblivious(self, model: EncryptedModel, queries: typing.Sequence[typing.Any], querier_pk) -> typing.List[PackedTensor]:
        """
        Forward passes on encrypted queries; the layer-one product becomes a
        ciphertext product. Every output is switched to the querier's key.
        """
        out = []
        layout = self.plan.output.layout
        for q in queries:
            ctx = self.forward(model, q, encrypted = True, train = False)
            switched = tuple(self.collective.key_switch(c, querier_pk) for c in ctx.output)
            out.append(PackedTensor(switched, layout, (1, self.plan.output.n_out)))
        ez.logger.info(f'Answered {len(out)} oblivious queries')
        return out

    def read_output(self, vectors: typing.Sequence[np.ndarray]) -> np.ndarray:
        layer = self.plan.output
        return layer.layout.read_outputs(vectors)[: layer.n_out]
