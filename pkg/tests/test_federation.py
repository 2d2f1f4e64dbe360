import json
import time
import typing

import numpy as np
import pytest

from ezmsg.fedhe.federation import Federation, IterationMetrics, Topology, write_metrics
from ezmsg.fedhe.network import NetworkSpec, init_weights
from ezmsg.fedhe.plaintext import PlaintextTrainer
from ezmsg.fedhe.reference import ReferenceContext
from ezmsg.fedhe.netsim import SimNetwork
from ezmsg.fedhe.data import Dataset, holdout, separable, split_shards
from ezmsg.fedhe.errors import ProtocolError

from conftest import toy_params, TOY_MASK_BITS, TOY_MESSAGE_BITS

# Enough levels for one pass of local descent without a refresh
DEEP_LEVELS = 30
WIRE_KINDS = {'RefCiphertext', 'RefPublicKey', 'RefCollectiveKeys', 'RefShare', 'RefBootstrapRequest'}


def make_federation(
    parties: int = 3,
    topology: str = 'tree',
    local_batch: int = 2,
    samples: int = 120,
    levels: int = 7,
    **kwargs
) -> Federation:
    ev = ReferenceContext(toy_params(levels = levels), seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    spec = NetworkSpec.mlp((4, 4, 2), learning_rate = 2.0, local_batch = local_batch)
    data = separable(samples, features = 4, seed = 4)
    return Federation(ev, spec, split_shards(data, parties, seed = 1), SimNetwork(ev.params), topology = topology, **kwargs)


def test_topologies() -> None:
    tree = Topology('tree', 7)
    assert tree.parent(0) is None
    assert [tree.parent(i) for i in range(1, 7)] == [0, 0, 1, 1, 2, 2]
    assert tree.children(1) == [3, 4]
    assert tree.depth(6) == 2
    assert tree.edges() == [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]

    star = Topology('star', 4)
    assert star.edges() == [(0, 1), (0, 2), (0, 3)]
    assert star.children(0) == [1, 2, 3]
    assert Topology('full', 1).edges() == []
    with pytest.raises(ProtocolError):
        Topology('ring', 3)
    with pytest.raises(ProtocolError):
        Topology('tree', 0)


@pytest.mark.parametrize('topology', ['tree', 'star'])
def test_training_matches_the_plaintext_oracle(topology: str) -> None:
    fed = make_federation(parties = 3, topology = topology)
    weights = init_weights(fed.spec, seed = 2)
    model = fed.prepare_phase(weights)
    trainer = PlaintextTrainer(fed.plan, weights)
    for k in range(20):
        model = fed.iterate(model)
        trainer.train_round([p.batch(k, fed.spec.local_batch) for p in fed.parties])
    assert model.iteration == 20
    for got, expected in zip(fed.decrypt_model(model), trainer.logical_weights()):
        np.testing.assert_allclose(got, expected, rtol = 1e-7, atol = 1e-9)


def test_only_wire_objects_crossed_the_network() -> None:
    fed = make_federation()
    model, _ = fed.train(iterations = 1)
    fed.predict(model, fed.parties[0].data.X[:1])
    kinds = set(fed.net.type_counts())
    assert kinds <= WIRE_KINDS
    assert {'RefCiphertext', 'RefShare', 'RefCollectiveKeys'} <= kinds
    assert fed.net.stats.conserved()
    assert fed.net.pending() == 0


def test_every_phase_is_accounted() -> None:
    fed = make_federation()
    model, _ = fed.train(iterations = 1)
    fed.predict(model, fed.parties[0].data.X[:2])
    phases = set(fed.net.stats.phases)
    assert {'prepare', 'map', 'map/bootstrap', 'combine', 'reduce/bootstrap'} <= phases
    assert {'predict', 'predict/key_switch'} <= phases


def test_single_party_sends_nothing() -> None:
    fed = make_federation(parties = 1)
    weights = init_weights(fed.spec, seed = 0)
    model = fed.prepare_phase(weights)
    trainer = PlaintextTrainer(fed.plan, weights)
    model = fed.iterate(model)
    trainer.train_round([fed.parties[0].batch(0, fed.spec.local_batch)])
    assert fed.net.stats.total.bytes == 0
    assert fed.ev.counters.bootstraps > 0
    for got, expected in zip(fed.decrypt_model(model), trainer.logical_weights()):
        np.testing.assert_allclose(got, expected, atol = 1e-9)


def test_traffic_grows_linearly_with_parties() -> None:
    per_edge = {}
    for n in (2, 3, 4):
        fed = make_federation(parties = n, topology = 'star', boot_level = 1)
        model = fed.prepare_phase(init_weights(fed.spec, seed = 0))
        fed.iterate(model)
        phases = fed.net.stats.phases
        per_edge[n] = (
            phases['map'].bytes / (n - 1),
            phases['combine'].bytes / (n - 1),
            phases['reduce/bootstrap'].bytes / (n - 1),
            # Every party refreshes its own ciphertexts with all the others
            phases['map/bootstrap'].bytes / (n * (n - 1)),
        )
    assert per_edge[2] == per_edge[3] == per_edge[4]


def test_oblivious_prediction() -> None:
    fed = make_federation()
    model, _ = fed.train(iterations = 1)
    X = fed.parties[1].data.X[:3]
    predictions = fed.predict(model, X, querier_seed = 5)
    clear = PlaintextTrainer(fed.plan, fed.decrypt_model(model))
    assert predictions.shape == (3, 2)
    for x, y in zip(X, predictions):
        np.testing.assert_allclose(y, clear.predict(x), atol = 1e-9)
    # The querier's key travels, its secret never does
    assert fed.net.type_counts()['RefPublicKey'] >= 1


def test_collective_normalization() -> None:
    data = separable(90, features = 4, seed = 2)
    shifted = Dataset(data.X * 3.0 + 5.0, data.Y)
    ev = ReferenceContext(toy_params(), seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    train, test = holdout(shifted, 0.2)
    fed = Federation(
        ev, NetworkSpec.mlp((4, 4, 2)), split_shards(train, 3), SimNetwork(ev.params),
        normalize = True, holdout = test
    )
    fed.prepare_phase()
    mean, std = fed.stats
    np.testing.assert_allclose(mean, train.X.mean(axis = 0), atol = 1e-9)
    np.testing.assert_allclose(std, train.X.std(axis = 0), atol = 1e-9)
    pooled = np.vstack([p.data.X for p in fed.parties])
    np.testing.assert_allclose(pooled.mean(axis = 0), 0.0, atol = 1e-9)
    np.testing.assert_allclose(fed.holdout.X, (test.X - mean) / std)
    # One collective decryption and nothing else in the clear
    assert fed.net.stats.phases['prepare/decrypt'].messages == 2 * (fed.n_parties - 1)


def test_metrics_records(tmp_path) -> None:
    data = separable(120, features = 4, seed = 4)
    train, test = holdout(data, 0.25)
    ev = ReferenceContext(toy_params(), seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    fed = Federation(ev, NetworkSpec.mlp((4, 4, 2), local_batch = 2), split_shards(train, 3), SimNetwork(ev.params), holdout = test)
    seen = []
    model, history = fed.train(iterations = 2, on_iteration = seen.append)
    assert [m.iteration for m in history] == [1, 2]
    assert seen == history
    for m in history:
        assert m.loss is not None and 0.0 <= m.accuracy <= 1.0
        assert m.bytes > 0 and m.messages > 0 and m.seconds > 0.0
        assert m.counters['rotations'] == 3 * 2 * 10

    path = tmp_path / 'metrics.jsonl'
    write_metrics(path, history)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert record['iteration'] == 1
    assert set(record) == {'iteration', 'loss', 'accuracy', 'counters', 'bytes', 'messages', 'seconds'}
    assert IterationMetrics(**record).to_json() == lines[0]


def test_runs_are_reproducible() -> None:
    runs = []
    for _ in range(2):
        fed = make_federation()
        model, history = fed.train(iterations = 2)
        runs.append((
            [m.to_json() for m in history],
            fed.net.stats.to_dict(),
            [W.tolist() for W in fed.decrypt_model(model)],
        ))
    assert runs[0] == runs[1]


def test_protocol_errors() -> None:
    ev = ReferenceContext(toy_params(), seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    spec = NetworkSpec.mlp((4, 4, 2))
    data = separable(60, features = 4)
    net = SimNetwork(ev.params)
    with pytest.raises(ProtocolError):
        Federation(ev, spec, [], net)
    with pytest.raises(ProtocolError):
        Federation(ev, spec, [data, data.take(np.arange(0))], net)
    with pytest.raises(ProtocolError):
        Federation(ev, spec, [Dataset(data.X[:, :3], data.Y)], net)

    fed = make_federation()
    model = fed.prepare_phase()
    grads = fed.map_phase(model, 0)
    with pytest.raises(ProtocolError):
        fed.combine_phase(grads[:2])
    with pytest.raises(ProtocolError):
        fed.combine_phase(grads[:2] + [None])


@pytest.mark.slow
def test_party_sweep_keeps_the_oracle() -> None:
    for n in (2, 5, 8):
        fed = make_federation(parties = n, samples = 400)
        weights = init_weights(fed.spec, seed = n)
        model = fed.prepare_phase(weights)
        trainer = PlaintextTrainer(fed.plan, weights)
        for k in range(4):
            model = fed.iterate(model)
            trainer.train_round([p.batch(k, fed.spec.local_batch) for p in fed.parties])
        for got, expected in zip(fed.decrypt_model(model), trainer.logical_weights()):
            np.testing.assert_allclose(got, expected, atol = 1e-8)


@pytest.mark.slow
def test_bcw_scale_accuracy_tracks_the_cleartext_baseline() -> None:
    from ezmsg.fedhe.config import parse_config
    from ezmsg.fedhe.session import build_session

    started = time.perf_counter()
    settings = parse_config(json.dumps({
        'network': {
            'layers': [{'kind': 'fc', 'units': 64}, {'kind': 'fc', 'units': 64}, {'kind': 'fc', 'units': 2}],
            'learning_rate': 1.0,
            'local_batch': 1,
        },
        'crypto': {'backend': 'reference', 'toy': True},
        'federation': {'parties': 10, 'topology': 'tree', 'seed': 1, 'shard_seed': 1},
        'data': {'samples': 699, 'holdout': 0.2},
    }))
    session = build_session(settings)
    fed = session.federation
    weights = init_weights(fed.spec, seed = 1)
    model = fed.prepare_phase(weights)
    baseline = PlaintextTrainer(fed.plan, weights)
    for k in range(100):
        model = fed.iterate(model)
        baseline.train_round([p.batch(k, fed.spec.local_batch) for p in fed.parties])
    encrypted = PlaintextTrainer(fed.plan, fed.decrypt_model(model))
    test = session.test
    assert abs(encrypted.accuracy(test.X, test.Y) - baseline.accuracy(test.X, test.Y)) <= 0.02
    assert time.perf_counter() - started < 60.0


def r_squared(x: typing.Sequence[float], y: typing.Sequence[float]) -> float:
    x, y = np.asarray(x, dtype = float), np.asarray(y, dtype = float)
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    return 1.0 - residual / np.sum((y - np.mean(y)) ** 2)


def iteration_traffic(parties: int, levels: int = 7) -> typing.Tuple[int, typing.Dict[str, int]]:
    fed = make_federation(parties = parties, topology = 'tree', samples = 40 * parties, levels = levels, boot_level = 1)
    model = fed.prepare_phase(init_weights(fed.spec, seed = 0))
    before = fed.net.stats.total.bytes
    fed.iterate(model)
    return fed.net.stats.total.bytes - before, {k: v.bytes for k, v in fed.net.stats.phases.items()}


@pytest.mark.slow
def test_model_traffic_is_affine_in_parties() -> None:
    sizes = (2, 4, 8, 16)
    model_bytes, refresh_per_party, totals = [], [], []
    for n in sizes:
        total, phases = iteration_traffic(n)
        assert total == sum(v for k, v in phases.items() if k != 'prepare')
        model_bytes.append(total - phases['map/bootstrap'])
        # Each local refresh collects a share from every other party
        refresh_per_party.append(phases['map/bootstrap'] / n)

        # A chain deep enough for the whole local descent needs no local refresh
        total, phases = iteration_traffic(n, levels = DEEP_LEVELS)
        assert 'map/bootstrap' not in phases
        totals.append(total)
    assert r_squared(sizes, model_bytes) > 0.99
    assert r_squared(sizes, refresh_per_party) > 0.99
    assert r_squared(sizes, totals) > 0.99
