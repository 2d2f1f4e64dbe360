import numpy as np
import pytest

from ezmsg.fedhe.network import NetworkSpec, compile_network, init_weights
from ezmsg.fedhe.plaintext import PlaintextTrainer, accuracy
from ezmsg.fedhe.data import separable
from ezmsg.fedhe.errors import ProtocolError


def trainer_for(dims = (4, 4, 2), seed: int = 0, **kwargs) -> PlaintextTrainer:
    spec = NetworkSpec.mlp(dims, **kwargs)
    return PlaintextTrainer(compile_network(spec, 16), seed = seed)


def test_padding_round_trip() -> None:
    trainer = trainer_for((3, 4, 2))
    weights = init_weights(trainer.plan.spec)
    assert [W.shape for W in trainer.weights] == [(4, 4), (4, 2)]
    for got, expected in zip(trainer.logical_weights(), weights):
        np.testing.assert_array_equal(got, expected)


def test_gradients_match_finite_differences(rng: np.random.Generator) -> None:
    trainer = trainer_for(activation = 'tanh', degree = 7)
    x = rng.uniform(0, 1, size = 4)
    y = np.array([1.0, 0.0])

    def half_loss() -> float:
        return 0.5 * float(np.sum((y - trainer.predict(x)) ** 2))

    grads = trainer.gradients(x, y)
    eps = 1e-6
    for layer, (i, k) in ((0, (1, 2)), (1, (3, 0))):
        saved = trainer.weights[layer][i, k]
        trainer.weights[layer][i, k] = saved + eps
        up = half_loss()
        trainer.weights[layer][i, k] = saved - eps
        down = half_loss()
        trainer.weights[layer][i, k] = saved
        # E = y - L, so the gradient points downhill
        assert grads[layer][i, k] == pytest.approx(-(up - down) / (2 * eps), rel = 1e-4, abs = 1e-9)


def test_training_reduces_loss() -> None:
    data = separable(200, features = 4, seed = 1)
    X, Y = data.X[:64], data.Y[:64]
    trainer = trainer_for(learning_rate = 2.0, local_batch = 8)
    before = trainer.loss(X, Y)
    for start in range(0, 64 - 16 + 1, 16):
        xs, ys = X[start: start + 16], Y[start: start + 16]
        trainer.train_round([(xs[:8], ys[:8]), (xs[8:], ys[8:])])
    assert trainer.loss(X, Y) < before


def test_global_batch_update() -> None:
    trainer = trainer_for(learning_rate = 0.5)
    start = [W.copy() for W in trainer.weights]
    grads = [np.ones_like(W) for W in trainer.weights]
    trainer.update(grads, global_batch = 4)
    for W, W0 in zip(trainer.weights, start):
        np.testing.assert_allclose(W - W0, 0.125)


def test_momentum_keeps_velocity() -> None:
    trainer = trainer_for(learning_rate = 1.0, momentum = 0.5)
    start = trainer.weights[0].copy()
    grads = [np.ones_like(W) for W in trainer.weights]
    trainer.update(grads, 1)
    trainer.update(grads, 1)
    # Velocities 1 then 1.5
    np.testing.assert_allclose(trainer.weights[0] - start, 2.5)

    nesterov = trainer_for(learning_rate = 1.0, momentum = 0.5, nesterov = True)
    start = nesterov.weights[0].copy()
    nesterov.update(grads, 1)
    np.testing.assert_allclose(nesterov.weights[0] - start, 1.5)


def test_accuracy() -> None:
    Y = np.array([[1, 0], [0, 1], [0, 1]])
    assert accuracy(np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]), Y) == pytest.approx(2 / 3)
    assert accuracy(np.array([[0.7], [0.2]]), np.array([[1], [0]])) == 1.0
    assert accuracy(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0


def test_empty_batch() -> None:
    with pytest.raises(ProtocolError):
        trainer_for().batch_gradients([], [])
