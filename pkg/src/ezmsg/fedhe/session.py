import typing

from dataclasses import dataclass
from pathlib import Path

import numpy as np

import ezmsg.core as ez

from .config import RunSettings, CryptoSettings, DataSettings, TOY_LEVELS
from .params import RingParams, TOY_RING_DIMS
from .ledger import Evaluator
from .mhe import CKKSContext
from .reference import ReferenceContext
from .network import NetworkSpec, compile_network
from .cost import CryptoPlan, select_params, RING_DIMS, LEVEL_RANGE
from .netsim import SimNetwork
from .federation import Federation
from .data import Dataset, load_csv, synthetic_bcw, pad_features, minmax_scale, holdout, split_shards
from .errors import ConfigError, PackingError, PlanningError

# Value range of the synthetic table's features
BCW_RANGE = (1.0, 10.0)


@dataclass
class Session:
    """ Everything one run needs, built from its settings """
    settings: RunSettings
    spec: NetworkSpec
    params: RingParams
    plan: typing.Optional[CryptoPlan]
    ev: Evaluator
    train: Dataset
    test: Dataset
    net: SimNetwork
    federation: Federation


def load_dataset(data: DataSettings, seed: int = 0, base: typing.Optional[Path] = None) -> Dataset:
    """ Synthetic rows are mapped onto [0, 1] with the table's public value range """
    if data.source == 'synthetic':
        raw = synthetic_bcw(data.samples, seed)
        d = raw.features
        X = minmax_scale(raw.X, np.full(d, BCW_RANGE[0]), np.full(d, BCW_RANGE[1]))
        return Dataset(pad_features(X), raw.Y)
    path = Path(data.source).expanduser()
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise ConfigError(f'Data file {path} does not exist')
    return load_csv(path, label_columns = data.label_columns)


def toy_ring(spec: NetworkSpec) -> int:
    """ Smallest toy ring whose slots hold the network """
    for ring_dim in TOY_RING_DIMS:
        try:
            compile_network(spec, ring_dim // 2)
        except PackingError:
            continue
        return ring_dim
    raise PlanningError(f'The network does not fit the largest toy ring {TOY_RING_DIMS[-1]}')


def resolve_params(crypto: CryptoSettings, spec: NetworkSpec, parties: int) -> typing.Tuple[RingParams, typing.Optional[CryptoPlan]]:
    """
    Toy runs take the smallest fitting toy ring. Otherwise the planner
    searches whatever ring_dim and levels the settings leave open.
    """
    if crypto.toy:
        ring_dim = crypto.ring_dim if crypto.ring_dim is not None else toy_ring(spec)
        levels = crypto.levels if crypto.levels is not None else TOY_LEVELS
        params = RingParams.create(ring_dim, levels, crypto.scale_bits, security_level = crypto.security, toy_mode = True)
        return params, None
    plan = select_params(
        spec,
        security = crypto.security,
        scale_bits = crypto.scale_bits,
        parties = parties,
        ring_dims = RING_DIMS if crypto.ring_dim is None else (crypto.ring_dim,),
        level_range = LEVEL_RANGE if crypto.levels is None else (crypto.levels + 1,),
    )
    return plan.ring_params(), plan


def make_context(params: RingParams, crypto: CryptoSettings, seed: int = 0) -> Evaluator:
    cls = CKKSContext if crypto.backend == 'real' else ReferenceContext
    return cls(params, seed = seed, mask_bits = crypto.mask_bits, message_bits = crypto.msg_bits)


def build_session(settings: RunSettings) -> Session:
    fed = settings.federation
    base = settings.source.parent if settings.source is not None else None
    data = load_dataset(settings.data, fed.shard_seed, base)
    train, test = holdout(data, settings.data.holdout, fed.shard_seed)
    spec = settings.network.spec(train.features)
    params, plan = resolve_params(settings.crypto, spec, fed.parties)
    ev = make_context(params, settings.crypto, fed.seed)
    net = SimNetwork(params, settings.netsim.delay_ms, settings.netsim.bandwidth_gbps)
    federation = Federation(
        ev, spec, split_shards(train, fed.parties, fed.shard_seed), net,
        topology = fed.topology,
        seed = fed.seed,
        normalize = fed.normalize,
        holdout = test if len(test) else None,
        boot_level = settings.crypto.boot_level,
    )
    ez.logger.info(
        f'Session: {settings.crypto.backend} backend, ring_dim={params.ring_dim}, '
        f'top level {params.initial_level}, {fed.parties} parties, {len(train)} training rows'
    )
    return Session(settings, spec, params, plan, ev, train, test, net, federation)
