import numpy as np
import pytest

from ezmsg.fedhe.config import CryptoSettings, DataSettings, parse_config, TOY_LEVELS
from ezmsg.fedhe.session import build_session, load_dataset, make_context, resolve_params, toy_ring
from ezmsg.fedhe.network import NetworkSpec
from ezmsg.fedhe.mhe import CKKSContext
from ezmsg.fedhe.reference import ReferenceContext
from ezmsg.fedhe.errors import ConfigError, PlanningError

from conftest import toy_params

CONFIG = '''{
  "network": {
    "layers": [{"kind": "fc", "units": 4}, {"kind": "fc", "units": 2}],
    "local_batch": 2,
    "iterations": 1
  },
  "crypto": {"toy": true},
  "federation": {"parties": 3, "seed": 3, "shard_seed": 3},
  "data": {"samples": 80, "holdout": 0.25}
}'''


def test_synthetic_rows_land_in_the_unit_box() -> None:
    data = load_dataset(DataSettings(samples = 100), seed = 2)
    assert len(data) == 100
    # Nine features pad to sixteen
    assert data.features == 16
    assert data.X.min() >= 0.0 and data.X.max() <= 1.0
    np.testing.assert_array_equal(data.X[:, 9:], 0.0)


def test_csv_paths_resolve_against_the_config(tmp_path) -> None:
    (tmp_path / 'rows.csv').write_text('1,2,0\n3,4,1\n5,6,0\n')
    data = load_dataset(DataSettings(source = 'rows.csv'), base = tmp_path)
    assert len(data) == 3
    with pytest.raises(ConfigError):
        load_dataset(DataSettings(source = 'missing.csv'), base = tmp_path)


def test_toy_ring_is_the_smallest_that_fits() -> None:
    assert toy_ring(NetworkSpec.mlp((4, 4, 2))) == 16
    assert toy_ring(NetworkSpec.mlp((16, 4, 2))) == 32
    with pytest.raises(PlanningError):
        toy_ring(NetworkSpec.mlp((1024, 1024, 2)))


def test_resolve_params() -> None:
    spec = NetworkSpec.mlp((4, 4, 2))
    params, plan = resolve_params(CryptoSettings(toy = True), spec, 3)
    assert plan is None
    assert params.toy_mode
    assert params.initial_level == TOY_LEVELS
    assert params.ring_dim == 16

    params, plan = resolve_params(CryptoSettings(toy = True, ring_dim = 32, levels = 5), spec, 3)
    assert (params.ring_dim, params.initial_level) == (32, 5)

    # Pinned to the operating point, levels counts the rescales above q_0
    params, plan = resolve_params(CryptoSettings(ring_dim = 8192, levels = 5), spec, 10)
    assert plan is not None and plan.levels == 6
    assert params.initial_level == 5


def test_make_context_picks_the_backend() -> None:
    params = toy_params()
    assert isinstance(make_context(params, CryptoSettings(toy = True)), ReferenceContext)
    ctx = make_context(params, CryptoSettings(backend = 'real', toy = True))
    assert isinstance(ctx, CKKSContext)
    assert ctx.mask_bits == 16


def test_build_session() -> None:
    session = build_session(parse_config(CONFIG))
    assert session.spec.input_shape == (16,)
    assert session.plan is None
    assert len(session.train) + len(session.test) == 80
    assert len(session.test) == 20
    assert session.federation.n_parties == 3
    assert session.federation.holdout is session.test
    assert session.net.params is session.params
