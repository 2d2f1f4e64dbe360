import typing

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as cheb

import ezmsg.core as ez

from .network import NetworkPlan, LayerPlan, init_weights
from .packing import extract_patches
from .errors import ProtocolError


@dataclass
class _Trace:
    inputs: np.ndarray
    L: np.ndarray
    D: np.ndarray


def _valid(layer: LayerPlan) -> np.ndarray:
    m = np.zeros(layer.p_out)
    if layer.column:
        m[layer.layout.valid_outputs] = 1.0
    else:
        m[: layer.n_out] = 1.0
    return m


class PlaintextTrainer:
    """
    Cleartext twin of the encrypted pipeline. Weights are held padded to
    the packed dimensions and every step mirrors the encrypted one: the
    same polynomial activations in the same unit variable, padded units
    that output phi at zero, tied convolution gradients and the same
    global-batch update. Serves as the correctness oracle and as the
    cleartext baseline.
    """

    def __init__(self, plan: NetworkPlan, weights: typing.Optional[typing.Sequence[np.ndarray]] = None, seed: int = 0) -> None:
        self.plan = plan
        weights = init_weights(plan.spec, seed) if weights is None else weights
        self.weights = [self._pad(layer, W) for layer, W in zip(plan.layers, weights)]
        self.velocity = [np.zeros_like(W) for W in self.weights]
        self._valid = [_valid(layer) for layer in plan.layers]

    @staticmethod
    def _pad(layer: LayerPlan, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W, dtype = float)
        cols = layer.layout.filters if layer.kind == 'cv' else layer.p_out
        out = np.zeros((layer.p_in, cols))
        out[: W.shape[0], : W.shape[1]] = W
        return out

    def logical_weights(self) -> typing.List[np.ndarray]:
        out = []
        for layer, W in zip(self.plan.layers, self.weights):
            cols = layer.layout.filters if layer.kind == 'cv' else layer.n_out
            out.append(W[: layer.layout.logical_dims[0], : cols].copy())
        return out

    # Layer-one input

    def _patch_blocks(self, layer: LayerPlan, x: np.ndarray) -> np.ndarray:
        """ (p_in, p_out) matrix whose column b is the patch feeding block b """
        spec = self.plan.spec.layers[0]
        image = np.asarray(x, dtype = float).reshape(self.plan.spec.input_shape)
        patches = extract_patches(image, spec.kernel, spec.stride)
        out = np.zeros((layer.p_in, layer.p_out))
        tp = layer.layout.patch_blocks
        for c in range(layer.layout.filters):
            for p, patch in enumerate(patches):
                out[: len(patch), c * tp + p] = patch
        return out

    def _first_input(self, x: np.ndarray) -> np.ndarray:
        layer = self.plan.first
        if layer.kind == 'cv':
            return self._patch_blocks(layer, x)
        out = np.zeros(layer.p_in)
        x = np.ravel(x)
        out[: len(x)] = x
        return out

    def _effective(self, layer: LayerPlan, W: np.ndarray) -> np.ndarray:
        return layer.layout.expand_kernel(W) if layer.kind == 'cv' else W

    # Passes

    def forward(self, x: np.ndarray) -> typing.List[_Trace]:
        traces = []
        a = self._first_input(x)
        for layer, W, valid in zip(self.plan.layers, self.weights, self._valid):
            We = self._effective(layer, W)
            z = (a * We).sum(axis = 0) if a.ndim == 2 else a @ We
            t = z * (valid / layer.half) + (-layer.mid / layer.half)
            L = cheb.chebval(t, layer.phi.chebyshev_coeffs)
            D = cheb.chebval(t, layer.phi_prime.chebyshev_coeffs)
            traces.append(_Trace(inputs = a, L = L, D = D))
            if layer.pool_after is not None:
                a = self._pool(layer, L)
            else:
                a = L
        return traces

    def _pool(self, layer: LayerPlan, L: np.ndarray) -> np.ndarray:
        pool = layer.pool_after
        tp = layer.layout.patch_blocks
        t = layer.layout.patches
        maps = L.reshape(layer.layout.filters, tp)[:, :t]
        pooled = pool.apply(maps)
        nxt = self.plan.layers[layer.index]
        out = np.zeros(nxt.p_in)
        out[: len(pooled)] = pooled
        return out

    def _unpool(self, layer: LayerPlan, s: np.ndarray) -> np.ndarray:
        """ Pooling transpose back onto the conv layer's output blocks """
        prev = self.plan.layers[layer.index - 2]
        pool = layer.pool_before
        spread = pool.transpose(s[: pool.outputs])
        out = np.zeros((prev.layout.filters, prev.layout.patch_blocks))
        out[:, : prev.layout.patches] = spread
        return out.reshape(-1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.plan.output
        L = self.forward(x)[-1].L
        if out.column:
            return L[out.layout.valid_outputs][: out.n_out]
        return L[: out.n_out]

    def gradients(self, x: np.ndarray, y: np.ndarray) -> typing.List[np.ndarray]:
        """ Padded gradients of one sample with E = y - L """
        traces = self.forward(x)
        layers = self.plan.layers
        out = layers[-1]
        y_pad = np.zeros(out.p_out)
        y = np.ravel(y)
        if out.column:
            y_pad[out.layout.valid_outputs[: len(y)]] = y
        else:
            y_pad[: len(y)] = y
        e = ((-traces[-1].L + y_pad) * self._valid[-1]) * traces[-1].D

        grads: typing.List[np.ndarray] = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            layer, trace, W = layers[i], traces[i], self.weights[i]
            a = trace.inputs
            if layer.kind == 'cv':
                full = a * e[None, :]
                tp = layer.layout.patch_blocks
                K = full.reshape(layer.p_in, layer.layout.filters, tp).sum(axis = 2)
                K[layer.layout.logical_dims[0]:] = 0.0
                grads[i] = K
            else:
                grads[i] = np.outer(a, e)
            if i == 0:
                break
            s = self._effective(layer, W) @ e
            if layer.pool_before is not None:
                e = self._unpool(layer, s) * traces[i - 1].D
            else:
                e = (s * self._valid[i - 1]) * traces[i - 1].D
        return grads

    def batch_gradients(self, xs: typing.Sequence[np.ndarray], ys: typing.Sequence[np.ndarray]) -> typing.List[np.ndarray]:
        if len(xs) == 0 or len(xs) != len(ys):
            raise ProtocolError(f'Batch of {len(xs)} inputs and {len(ys)} labels')
        total = None
        for x, y in zip(xs, ys):
            g = self.gradients(x, y)
            total = g if total is None else [a + b for a, b in zip(total, g)]
        return total

    def update(self, grads: typing.Sequence[np.ndarray], global_batch: int, learning_rate: typing.Optional[float] = None) -> None:
        spec = self.plan.spec
        lr = spec.learning_rate if learning_rate is None else learning_rate
        mu = spec.momentum
        for i, G in enumerate(grads):
            step = G * (lr / global_batch)
            if mu > 0.0:
                self.velocity[i] = self.velocity[i] * mu + step
                delta = self.velocity[i] * mu + step if spec.nesterov else self.velocity[i]
            else:
                delta = step
            self.weights[i] = self.weights[i] + delta

    def train_round(self, batches: typing.Sequence[typing.Tuple[typing.Sequence[np.ndarray], typing.Sequence[np.ndarray]]]) -> None:
        """ One global iteration over the local batches of every party """
        grads = None
        count = 0
        for xs, ys in batches:
            g = self.batch_gradients(xs, ys)
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
            count += 1
        self.update(grads, self.plan.spec.local_batch * count)

    def loss(self, X: np.ndarray, Y: np.ndarray) -> float:
        """ Mean squared error over the logical outputs """
        err = [np.sum((self.predict(x) - np.ravel(y)) ** 2) for x, y in zip(X, Y)]
        return float(np.mean(err)) if err else 0.0

    def accuracy(self, X: np.ndarray, Y: np.ndarray) -> float:
        return accuracy(np.array([self.predict(x) for x in X]), Y)


def accuracy(predictions: np.ndarray, Y: np.ndarray) -> float:
    """ Argmax agreement for one-hot targets, 0.5 threshold for a single output """
    predictions = np.atleast_2d(np.asarray(predictions, dtype = float))
    Y = np.atleast_2d(np.asarray(Y, dtype = float))
    if len(predictions) == 0:
        return 0.0
    if Y.shape[1] == 1:
        hits = (predictions[:, 0] > 0.5) == (Y[:, 0] > 0.5)
    else:
        hits = predictions.argmax(axis = 1) == Y.argmax(axis = 1)
    value = float(np.mean(hits))
    ez.logger.debug(f'Accuracy {value=} over {len(Y)} samples')
    return value
