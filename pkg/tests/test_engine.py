import numpy as np
import pytest

from ezmsg.fedhe.engine import Engine, EncryptedModel, LocalCollective
from ezmsg.fedhe.network import LayerSpec, NetworkSpec, compile_network, init_weights
from ezmsg.fedhe.plaintext import PlaintextTrainer
from ezmsg.fedhe.reference import ReferenceContext
from ezmsg.fedhe.mhe import CKKSContext
from ezmsg.fedhe.cost import rotation_budget
from ezmsg.fedhe.errors import LevelExhaustedError, PackingError, ProtocolError

from conftest import keyed_context, mlp_engine, toy_params


def batch(rng: np.random.Generator, size: int, d: int = 4, classes: int = 2):
    xs = rng.uniform(0, 1, size = (size, d))
    ys = np.eye(classes)[rng.integers(0, classes, size = size)]
    return xs, ys


def decrypt_grads(engine: Engine, grads) -> list:
    return engine.decrypt_model(EncryptedModel(weights = grads.grads))


def assert_grads_close(got, expected, atol: float) -> None:
    for g, e in zip(got, expected):
        np.testing.assert_allclose(g, e[: g.shape[0], : g.shape[1]], atol = atol)


def test_local_gradients_match_plaintext(rng: np.random.Generator) -> None:
    engine, _ = mlp_engine(ReferenceContext)
    weights = init_weights(engine.plan.spec, seed = 3)
    model = engine.init_model(engine.ev.keys.public, weights = weights)
    xs, ys = batch(rng, 3)

    grads = engine.lgd_compute(model, xs, ys)
    assert grads.samples == 3
    trainer = PlaintextTrainer(engine.plan, weights)
    assert_grads_close(decrypt_grads(engine, grads), trainer.batch_gradients(xs, ys), atol = 1e-9)


def test_rotations_follow_the_budget(rng: np.random.Generator) -> None:
    engine, _ = mlp_engine(ReferenceContext)
    model = engine.init_model(engine.ev.keys.public, seed = 0)
    xs, ys = batch(rng, 2)
    engine.lgd_compute(model, xs, ys)
    assert engine.ev.counters.rotations == rotation_budget(engine.plan.spec) * len(xs)


@pytest.mark.parametrize('kwargs', [{}, {'momentum': 0.5}, {'momentum': 0.5, 'nesterov': True}])
def test_update_matches_plaintext(rng: np.random.Generator, kwargs) -> None:
    engine, _ = mlp_engine(ReferenceContext, learning_rate = 2.0, **kwargs)
    weights = init_weights(engine.plan.spec, seed = 1)
    model = engine.init_model(engine.ev.keys.public, weights = weights)
    trainer = PlaintextTrainer(engine.plan, weights)
    if kwargs:
        assert model.velocity is not None

    for _ in range(2):
        xs, ys = batch(rng, 2)
        grads = engine.lgd_compute(model, xs, ys)
        model = engine.apply_update(model, grads, global_batch = 2)
        trainer.update(trainer.batch_gradients(xs, ys), 2)

    assert model.iteration == 2
    assert all(c.level == engine.ev.top_level for c in model.ciphers())
    for got, expected in zip(engine.decrypt_model(model), trainer.logical_weights()):
        np.testing.assert_allclose(got, expected, atol = 1e-9)


def test_oblivious_prediction(rng: np.random.Generator) -> None:
    engine, _ = mlp_engine(ReferenceContext)
    ctx = engine.ev
    weights = init_weights(engine.plan.spec, seed = 5)
    model = engine.init_model(ctx.keys.public, weights = weights)
    trainer = PlaintextTrainer(engine.plan, weights)
    secret, querier_pk = ctx.key_gen(11)

    xs, _ = batch(rng, 2)
    queries = [engine.encrypt_query(ctx.keys.public, x) for x in xs]
    answers = engine.predict_oblivious(model, queries, querier_pk)
    assert len(answers) == 2
    for x, answer in zip(xs, answers):
        vectors = [ctx.decode(ctx.decrypt(c, secret)) for c in answer]
        np.testing.assert_allclose(engine.read_output(vectors), trainer.predict(x), atol = 1e-9)
        # Nobody else can read the answer
        assert np.max(np.abs(engine.collective.decrypt(answer[0]))) > 1e6


def test_conv_network_matches_plaintext(rng: np.random.Generator) -> None:
    spec = NetworkSpec(
        input_shape = (4, 4),
        layers = (
            LayerSpec('cv', kernel = 2, stride = 2, filters = 2),
            LayerSpec('avgpool', kernel = 2, stride = 2),
            LayerSpec('fc', units = 2),
        ),
    )
    ctx, shares = keyed_context(ReferenceContext, params = toy_params(ring_dim = 64), rotations = ())
    plan = compile_network(spec, ctx.slots)
    ctx.keys = ctx.d_key_gen(shares, plan.rotation_offsets())
    engine = Engine(ctx, plan, LocalCollective(ctx, shares))
    weights = init_weights(spec, seed = 2)
    model = engine.init_model(ctx.keys.public, weights = weights)

    xs, ys = batch(rng, 2, d = 16)
    ctx.counters.reset()
    grads = engine.lgd_compute(model, xs, ys)
    trainer = PlaintextTrainer(plan, weights)
    assert_grads_close(decrypt_grads(engine, grads), trainer.batch_gradients(xs, ys), atol = 1e-9)
    assert ctx.counters.embedded_rotations == plan.embedded_rotations() * len(xs)


def test_real_backend_tracks_plaintext(rng: np.random.Generator) -> None:
    engine, _ = mlp_engine(CKKSContext)
    weights = init_weights(engine.plan.spec, seed = 3)
    model = engine.init_model(engine.ev.keys.public, weights = weights)
    xs, ys = batch(rng, 1)
    grads = engine.lgd_compute(model, xs, ys)
    trainer = PlaintextTrainer(engine.plan, weights)
    assert_grads_close(decrypt_grads(engine, grads), trainer.batch_gradients(xs, ys), atol = 5e-3)


def test_ready_refreshes_only_when_needed() -> None:
    engine, _ = mlp_engine(ReferenceContext)
    ctx = engine.ev
    assert engine.boot_level == 1
    top = ctx.encrypt_values(ctx.keys.public, 0.5)
    assert engine.ready(top, 2) is top
    low = ctx.encrypt_values(ctx.keys.public, 0.5, level = 2)
    assert engine.ready(low, 3).level == ctx.top_level
    assert ctx.counters.bootstraps == 1
    with pytest.raises(LevelExhaustedError):
        engine.ready(ctx.encrypt_values(ctx.keys.public, 0.5, level = 0), 1)
    with pytest.raises(LevelExhaustedError):
        engine.ready(low, ctx.top_level)


def test_protocol_errors(rng: np.random.Generator) -> None:
    engine, _ = mlp_engine(ReferenceContext)
    model = engine.init_model(engine.ev.keys.public)
    xs, ys = batch(rng, 2)
    with pytest.raises(ProtocolError):
        engine.lgd_compute(model, [], [])
    with pytest.raises(ProtocolError):
        engine.lgd_compute(model, xs, ys[:1])
    with pytest.raises(ProtocolError):
        engine.forward(EncryptedModel(weights = model.weights[:1]), engine.pack_input(xs[0]))

    wide = compile_network(engine.plan.spec, 32)
    with pytest.raises(PackingError):
        Engine(engine.ev, wide, engine.collective)
