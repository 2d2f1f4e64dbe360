import json
import typing

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

import ezmsg.core as ez

from .ledger import Evaluator
from .linear import LinearTransform
from .network import NetworkSpec, NetworkPlan, compile_network
from .engine import Engine, EncryptedModel, GradientSet
from .packing import PackedTensor
from .plaintext import PlaintextTrainer
from .netsim import SimNetwork
from .data import Dataset, local_moments, moments_to_stats, standardize
from .errors import ProtocolError, PackingError

ROOT = 0
TOPOLOGIES = ('tree', 'star', 'full')


@dataclass(frozen = True)
class Topology:
    """
    Aggregation structure over parties 0..n-1 rooted at party 0. A tree
    links party i to (i - 1) // 2; star and full hang every party off the
    root. Collective protocols (refresh, key switch, decryption) talk to
    every party directly, which a full mesh provides.
    """
    kind: str
    parties: int

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGIES:
            raise ProtocolError(f'Unknown topology {self.kind!r}')
        if self.parties < 1:
            raise ProtocolError(f'{self.parties=} must be positive')

    def parent(self, i: int) -> typing.Optional[int]:
        if i == ROOT:
            return None
        return (i - 1) // 2 if self.kind == 'tree' else ROOT

    def children(self, i: int) -> typing.List[int]:
        return [j for j in range(self.parties) if self.parent(j) == i]

    def depth(self, i: int) -> int:
        d = 0
        while i != ROOT:
            i = self.parent(i)
            d += 1
        return d

    def edges(self) -> typing.List[typing.Tuple[int, int]]:
        """ (parent, child) in breadth-first order """
        order = sorted(range(1, self.parties), key = lambda j: (self.depth(j), j))
        return [(self.parent(j), j) for j in order]


@dataclass
class Party:
    id: int
    secret: typing.Any = field(repr = False)
    data: Dataset = field(repr = False)
    engine: typing.Optional[Engine] = field(default = None, repr = False)

    def batch(self, iteration: int, size: int) -> typing.Tuple[np.ndarray, np.ndarray]:
        """ Rows k*b .. k*b + b - 1 of the shard, wrapping around """
        idx = [(iteration * size + t) % len(self.data) for t in range(size)]
        return self.data.X[idx], self.data.Y[idx]


class NetworkCollective:
    """
    Collective operations as message exchanges on the simulated network.
    The initiator sends what the others need, each party answers with its
    share computed from its own secret, and the initiator combines.
    """

    def __init__(self, ev: Evaluator, parties: typing.Sequence[Party], net: SimNetwork, initiator: int = ROOT) -> None:
        self.ev = ev
        self.parties = parties
        self.net = net
        self.initiator = initiator

    @property
    def n_parties(self) -> int:
        return len(self.parties)

    def at(self, initiator: int) -> 'NetworkCollective':
        return NetworkCollective(self.ev, self.parties, self.net, initiator)

    def _others(self) -> typing.List[Party]:
        return [p for p in self.parties if p.id != self.initiator]

    def _own(self) -> Party:
        return self.parties[self.initiator]

    def bootstrap(self, ct, transform: typing.Optional[LinearTransform] = None):
        ev, net, i = self.ev, self.net, self.initiator
        ev.check_bootstrap(ct.level, self.n_parties)
        with net.phase('bootstrap'):
            request = ev.bootstrap_request(ct, transform)
            shares = [ev.bootstrap_share(request, self._own().secret)]
            for p in self._others():
                received, t = net.send(request, i, p.id)
                share, _ = net.send(ev.bootstrap_share(received, p.secret), p.id, i, at = t)
                shares.append(share)
        return ev.combine_bootstrap(ct, request, shares)

    def key_switch(self, ct, target):
        ev, net, i = self.ev, self.net, self.initiator
        with net.phase('key_switch'):
            shares = [ev.key_switch_share(ct, target, self._own().secret)]
            for p in self._others():
                received, t = net.send(ct, i, p.id)
                share, _ = net.send(ev.key_switch_share(received, target, p.secret), p.id, i, at = t)
                shares.append(share)
        return ev.combine_key_switch(ct, shares)

    def decrypt(self, ct) -> np.ndarray:
        ev, net, i = self.ev, self.net, self.initiator
        with net.phase('decrypt'):
            shares = [ev.decryption_share(ct, self._own().secret)]
            for p in self._others():
                received, t = net.send(ct, i, p.id)
                share, _ = net.send(ev.decryption_share(received, p.secret), p.id, i, at = t)
                shares.append(share)
        return ev.decode(ev.combine_decryption(ct, shares))


@dataclass
class IterationMetrics:
    iteration: int
    loss: typing.Optional[float] = None
    accuracy: typing.Optional[float] = None
    counters: typing.Dict[str, int] = field(default_factory = dict)
    bytes: int = 0
    messages: int = 0
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys = True)


def write_metrics(path: typing.Union[str, Path], metrics: typing.Iterable[IterationMetrics]) -> None:
    with Path(path).open('a') as f:
        for m in metrics:
            f.write(m.to_json() + '\n')


class Federation:
    """
    Synchronous federated training among N parties holding shards of the
    data. Each global iteration broadcasts the encrypted model down the
    topology (MAP), runs local gradient descent at every party, sums the
    encrypted gradients back up (COMBINE) and lets the root apply the
    averaged step and refresh the weights (REDUCE).
    """

    def __init__(
        self,
        ev: Evaluator,
        spec: NetworkSpec,
        shards: typing.Sequence[Dataset],
        net: SimNetwork,
        topology: str = 'tree',
        seed: int = 0,
        normalize: bool = False,
        holdout: typing.Optional[Dataset] = None,
        boot_level: typing.Optional[int] = None
    ) -> None:
        if not shards:
            raise ProtocolError('No parties')
        for i, shard in enumerate(shards):
            if len(shard) == 0:
                raise ProtocolError(f'Party {i} holds an empty shard')
            if shard.features != spec.input_dim:
                raise ProtocolError(f'Party {i} has {shard.features} features, network expects {spec.input_dim}')
        self.ev = ev
        self.spec = spec
        self.net = net
        self.seed = seed
        self.normalize = normalize
        self.holdout = holdout
        self.boot_level = boot_level
        self.topology = Topology(topology, len(shards))
        self.plan: NetworkPlan = compile_network(spec, ev.slots)
        self.parties = [Party(id = i, secret = None, data = shard) for i, shard in enumerate(shards)]
        self.collective = NetworkCollective(ev, self.parties, net)
        self.stats: typing.Optional[typing.Tuple[np.ndarray, np.ndarray]] = None

    @property
    def n_parties(self) -> int:
        return len(self.parties)

    @property
    def root(self) -> Party:
        return self.parties[ROOT]

    @property
    def global_batch(self) -> int:
        return self.spec.local_batch * self.n_parties

    # Movement along the topology

    def broadcast_down(self, items: typing.Sequence[typing.Any]) -> None:
        """ Root to every party along the topology, one message per item per edge """
        ready = {ROOT: self.net.clock}
        for parent, child in self.topology.edges():
            t = ready[parent]
            for item in items:
                _, t = self.net.send(item, parent, child, at = ready[parent])
            ready[child] = t

    def aggregate_up(self, items: typing.Dict[int, typing.Sequence[typing.Any]]) -> typing.List[typing.Any]:
        """ Homomorphic sums from the leaves to the root; returns the root's sums """
        missing = [p.id for p in self.parties if p.id not in items or items[p.id] is None]
        if missing:
            raise ProtocolError(f'Parties {missing} did not report this round')
        acc = {i: list(v) for i, v in items.items()}
        ready = {i: self.net.clock for i in acc}
        for parent, child in reversed(self.topology.edges()):
            for k, ct in enumerate(acc[child]):
                received, t = self.net.send(ct, child, parent, at = ready[child])
                acc[parent][k] = self.ev.add(acc[parent][k], received)
                ready[parent] = max(ready[parent], t)
        return acc[ROOT]

    # Protocol phases

    def _key_generation(self, rotations: typing.Iterable[int]):
        ev, net = self.ev, self.net
        others = [p for p in self.parties if p.id != ROOT]
        secrets = [p.secret for p in self.parties]

        pk_shares = [ev.public_key_share(s) for s in secrets]
        for p in others:
            net.send(pk_shares[p.id], p.id, ROOT)
        public = ev.combine_public_key(pk_shares)

        first = [ev.relin_round_one(s) for s in secrets]
        round_one = [share for _, share in first]
        for p in others:
            net.send(round_one[p.id], p.id, ROOT)
            for share in round_one:
                if share.party != p.id:
                    net.send(share, ROOT, p.id)
        round_two = [ev.relin_round_two(s, e, round_one) for s, (e, _) in zip(secrets, first)]
        for p in others:
            net.send(round_two[p.id], p.id, ROOT)
        relin = ev.combine_relin(round_one, round_two)

        rotation_keys = {}
        for offset in sorted({r % ev.slots for r in rotations} - {0}):
            shares = [ev.rotation_key_share(s, offset) for s in secrets]
            for p in others:
                net.send(shares[p.id], p.id, ROOT)
            rotation_keys[offset] = ev.combine_rotation_key(shares)

        keys = ev.assemble_keys(public, relin, rotation_keys)
        self.broadcast_down([keys])
        ez.logger.debug(f'Collective keys with {len(rotation_keys)} rotations reached {self.n_parties} parties')
        return keys

    def collective_normalization(self) -> typing.Tuple[np.ndarray, np.ndarray]:
        """
        Pooled mean and deviation from encrypted local moments. Each party
        encrypts (count, sums, sums of squares) divided by a public bound,
        the sums travel up the topology and one collective decryption
        reveals only the pooled statistics.
        """
        ev = self.ev
        d = self.spec.input_dim
        if 1 + 2 * d > ev.slots:
            raise PackingError(f'{d} features do not fit the moment vector in {ev.slots} slots')
        bound = float(self.n_parties * max(len(p.data) for p in self.parties))
        items = {}
        for p in self.parties:
            count, total, squares = local_moments(p.data.X)
            vector = np.concatenate([[count], total, squares]) / bound
            items[p.id] = [ev.encrypt_values(ev.keys.public, vector)]
        (pooled,) = self.aggregate_up(items)
        values = self.collective.decrypt(pooled) * bound
        mean, std = moments_to_stats(values[0], values[1: 1 + d], values[1 + d: 1 + 2 * d])
        for p in self.parties:
            p.data = Dataset(standardize(p.data.X, mean, std), p.data.Y)
        if self.holdout is not None:
            self.holdout = Dataset(standardize(self.holdout.X, mean, std), self.holdout.Y)
        ez.logger.info(f'Normalized features over {int(round(values[0]))} pooled samples')
        self.stats = (mean, std)
        return mean, std

    def prepare_phase(self, weights: typing.Optional[typing.Sequence[np.ndarray]] = None) -> EncryptedModel:
        ev = self.ev
        ez.logger.info(f'PREPARE {self.n_parties} parties on a {self.topology.kind} topology')
        with self.net.phase('prepare'):
            for p, secret in zip(self.parties, ev.sec_key_gen(self.n_parties, self.seed)):
                p.secret = secret
            ev.keys = self._key_generation(self.plan.rotation_offsets())
            for p in self.parties:
                p.engine = Engine(ev, self.plan, self.collective.at(p.id), self.boot_level)
            if self.normalize:
                self.collective_normalization()
            model = self.root.engine.init_model(ev.keys.public, self.seed, weights)
        self.net.barrier()
        return model

    def map_phase(self, model: EncryptedModel, iteration: int) -> typing.List[GradientSet]:
        ez.logger.info(f'MAP iteration {iteration}')
        with self.net.phase('map'):
            self.broadcast_down(list(model.ciphers()))
            grads = []
            for p in self.parties:
                xs, ys = p.batch(iteration, self.spec.local_batch)
                grads.append(p.engine.lgd_compute(model, xs, ys))
        return grads

    def combine_phase(self, grads: typing.Sequence[typing.Optional[GradientSet]]) -> GradientSet:
        ez.logger.info(f'COMBINE {len(grads)} gradient sets')
        if len(grads) != self.n_parties:
            raise ProtocolError(f'{len(grads)} of {self.n_parties} parties reported')
        if self.n_parties == 1:
            return grads[0]
        with self.net.phase('combine'):
            items = {i: (list(g.ciphers()) if g is not None else None) for i, g in enumerate(grads)}
            summed = iter(self.aggregate_up(items))
        template = grads[ROOT]
        tensors = tuple(
            PackedTensor(tuple(next(summed) for _ in g), g.layout, g.logical_shape)
            for g in template.grads
        )
        return GradientSet(tensors, sum(g.samples for g in grads))

    def reduce_phase(self, model: EncryptedModel, aggregated: GradientSet) -> EncryptedModel:
        ez.logger.info(f'REDUCE to iteration {model.iteration + 1} with global batch {self.global_batch}')
        with self.net.phase('reduce'):
            return self.root.engine.apply_update(model, aggregated, global_batch = self.global_batch)

    def iterate(self, model: EncryptedModel) -> EncryptedModel:
        grads = self.map_phase(model, model.iteration)
        aggregated = self.combine_phase(grads)
        model = self.reduce_phase(model, aggregated)
        self.net.barrier()
        return model

    def train(
        self,
        iterations: typing.Optional[int] = None,
        model: typing.Optional[EncryptedModel] = None,
        on_iteration: typing.Optional[typing.Callable[[IterationMetrics], None]] = None
    ) -> typing.Tuple[EncryptedModel, typing.List[IterationMetrics]]:
        iterations = self.spec.iterations if iterations is None else iterations
        if model is None:
            model = self.prepare_phase()
        history = []
        for _ in range(iterations):
            before = self.ev.counters.snapshot()
            total = self.net.stats.total
            bytes_before, messages_before, clock_before = total.bytes, total.messages, self.net.clock
            model = self.iterate(model)
            delta = self.ev.counters.since(before)
            metrics = IterationMetrics(
                iteration = model.iteration,
                counters = asdict(delta),
                bytes = total.bytes - bytes_before,
                messages = total.messages - messages_before,
                seconds = self.net.clock - clock_before,
            )
            if self.holdout is not None and len(self.holdout):
                monitor = PlaintextTrainer(self.plan, self.decrypt_model(model))
                metrics.loss = monitor.loss(self.holdout.X, self.holdout.Y)
                metrics.accuracy = monitor.accuracy(self.holdout.X, self.holdout.Y)
            ez.logger.info(f'Iteration {metrics.iteration}: loss={metrics.loss} accuracy={metrics.accuracy} bytes={metrics.bytes}')
            history.append(metrics)
            if on_iteration is not None:
                on_iteration(metrics)
        return model, history

    # Simulation-side monitoring; nothing here touches the network

    def decrypt_model(self, model: EncryptedModel, logical: bool = True) -> typing.List[np.ndarray]:
        secrets = [p.secret for p in self.parties]
        return [
            w.layout.unpack_matrix([self.ev.decrypt_values(c, secrets) for c in w], logical = logical)
            for w in model.weights
        ]

    # Oblivious prediction

    def predict(self, model: EncryptedModel, X: np.ndarray, querier_seed: int = 0) -> np.ndarray:
        """
        An outside querier encrypts rows under the collective key; the root
        evaluates them and has the outputs switched to the querier's key.
        Only the querier can read the predictions.
        """
        ev = self.ev
        querier = self.n_parties
        secret, querier_pk = ev.key_gen(querier_seed)
        engine = self.root.engine
        out = []
        with self.net.phase('predict'):
            querier_pk, _ = self.net.send(querier_pk, querier, ROOT)
            for x in np.atleast_2d(X):
                query, _ = self.net.send(engine.encrypt_query(ev.keys.public, x), querier, ROOT)
                (answer,) = engine.predict_oblivious(model, [query], querier_pk)
                vectors = []
                for ct in answer:
                    received, _ = self.net.send(ct, ROOT, querier)
                    vectors.append(ev.decode(ev.decrypt(received, secret)))
                out.append(engine.read_output(vectors))
        self.net.barrier()
        return np.array(out)
