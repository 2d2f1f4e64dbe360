import typing

import numpy as np
import pytest

from ezmsg.fedhe.params import RingParams
from ezmsg.fedhe.mhe import CKKSContext
from ezmsg.fedhe.reference import ReferenceContext
from ezmsg.fedhe.network import NetworkSpec, compile_network
from ezmsg.fedhe.engine import Engine, LocalCollective

# Small insecure ring: 16 slots, top level 7, a refresh fits at level 1 for 3 parties
TOY_RING_DIM = 32
TOY_LEVELS = 7
TOY_SCALE_BITS = 32
TOY_MASK_BITS = 16
TOY_MESSAGE_BITS = 40
PARTIES = 3

POWERS_OF_TWO = tuple(2 ** k for k in range(4))


def toy_params(ring_dim: int = TOY_RING_DIM, levels: int = TOY_LEVELS) -> RingParams:
    return RingParams.create(ring_dim, levels, TOY_SCALE_BITS, toy_mode = True)


def keyed_context(
    cls: type,
    params: typing.Optional[RingParams] = None,
    parties: int = PARTIES,
    rotations: typing.Iterable[int] = POWERS_OF_TWO,
    seed: int = 0
):
    """ Context with collective keys installed; returns (ctx, secret shares) """
    ctx = cls(
        toy_params() if params is None else params, seed = seed,
        mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS
    )
    shares = ctx.sec_key_gen(parties, seed)
    ctx.keys = ctx.d_key_gen(shares, rotations)
    ctx.counters.reset()
    return ctx, shares


@pytest.fixture
def params() -> RingParams:
    return toy_params()


@pytest.fixture(params = [ReferenceContext, CKKSContext], ids = ['reference', 'real'])
def keyed(request):
    """ Both backends, keyed for three parties """
    return keyed_context(request.param)


@pytest.fixture
def reference():
    return keyed_context(ReferenceContext)


@pytest.fixture
def real():
    return keyed_context(CKKSContext)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def mlp_engine(cls: type, dims: typing.Sequence[int] = (4, 4, 2), parties: int = PARTIES, **kwargs):
    """ Engine for a small MLP with the keys its plan needs """
    spec = NetworkSpec.mlp(dims, **kwargs)
    ctx = cls(toy_params(), seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    plan = compile_network(spec, ctx.slots)
    shares = ctx.sec_key_gen(parties, 0)
    ctx.keys = ctx.d_key_gen(shares, plan.rotation_offsets())
    engine = Engine(ctx, plan, LocalCollective(ctx, shares))
    ctx.counters.reset()
    return engine, shares


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption('-m'):
        return
    skip = pytest.mark.skip(reason = 'slow; select with -m slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)
