import json
import math

from dataclasses import replace
from fractions import Fraction

import pytest

from ezmsg.fedhe.cost import (
    CostModel,
    bootstrap_count,
    check_plan,
    comm_estimate,
    cost_eval,
    headroom,
    network_dims,
    profile_iteration,
    rotation_budget,
    select_params,
)
from ezmsg.fedhe.federation import Federation
from ezmsg.fedhe.network import NetworkSpec, init_weights
from ezmsg.fedhe.reference import ReferenceContext
from ezmsg.fedhe.netsim import SimNetwork
from ezmsg.fedhe.serialize import ciphertext_size
from ezmsg.fedhe.data import separable, split_shards
from ezmsg.fedhe.errors import PlanningError

from conftest import toy_params, TOY_MASK_BITS, TOY_MESSAGE_BITS

# Nine features padded to 16, two hidden layers of 64
BCW_SPEC = NetworkSpec.mlp((16, 64, 64, 2), activation = 'sigmoid', degree = 3)


def test_bootstrap_count() -> None:
    assert bootstrap_count(2, 3, 7, 1, 3) == 1
    assert bootstrap_count(3, 3, 6, 4) == Fraction(27, 2)
    assert bootstrap_count(0, 3, 6, 4) == 0
    # More usable depth, fewer refreshes
    assert bootstrap_count(3, 7, 12, 4) < bootstrap_count(3, 7, 6, 4)
    with pytest.raises(PlanningError):
        bootstrap_count(2, 3, 4, 4)
    with pytest.raises(PlanningError):
        bootstrap_count(2, 3, 7, 1, 0)


def test_rotation_budget() -> None:
    assert network_dims(NetworkSpec.mlp((3, 4, 2))) == [4, 4, 2]
    assert rotation_budget(NetworkSpec.mlp((4, 4, 2))) == 10
    assert rotation_budget(NetworkSpec.mlp((4, 4, 4, 2))) == 18


def test_cost_eval() -> None:
    assert cost_eval(8192, 6, BCW_SPEC, iterations = 0, tau = 4) == 0.0
    one = cost_eval(8192, 6, BCW_SPEC, iterations = 1, tau = 4)
    assert one > 0.0
    assert cost_eval(8192, 6, BCW_SPEC, iterations = 3, tau = 4) == pytest.approx(3 * one)
    # A bigger ring prices every operation higher
    model = CostModel(8192, 6)
    assert CostModel(16384, 6).key_switch() > model.key_switch()
    assert model.mul_ct() > model.mul_pt()
    assert model.key_switch(level = 2) < model.key_switch()


def test_headroom() -> None:
    chain = [2 ** 40] * 4
    assert headroom(chain, 100, 1) == 3
    # Ten parties need log2(20) more bits than one
    assert headroom(chain, 118, 1) == 3
    assert headroom(chain, 118, 10) == 4
    assert headroom([2 ** 40], 100, 1) is None


def test_select_params_for_the_bcw_network() -> None:
    plan = select_params(BCW_SPEC, security = 128, parties = 10, iterations = 100)
    assert plan.ring_dim >= 8192
    assert check_plan(plan) == []
    assert plan.bootstrap_level == plan.tau - 1
    assert plan.bytes_per_iteration > 0
    assert 'ring_dim' in plan.describe()
    # log2 Q of 109 bits leaves no room for a refresh above 2^128 N
    with pytest.raises(PlanningError) as info:
        select_params(BCW_SPEC, security = 128, parties = 10, ring_dims = (4096,))
    assert 'binding constraint' in str(info.value)


def test_operating_point_is_feasible() -> None:
    plan = select_params(BCW_SPEC, security = 128, scale_bits = 32, parties = 10, ring_dims = (8192,), level_range = (6,))
    assert (plan.ring_dim, plan.levels, plan.scale_bits) == (8192, 6, 32)
    assert len(plan.chain) == 6
    assert plan.log_q <= 218
    assert plan.tau == 4
    assert check_plan(plan) == []
    # Seven primes no longer fit the table at 2^13
    with pytest.raises(PlanningError):
        select_params(BCW_SPEC, security = 128, parties = 10, ring_dims = (8192,), level_range = (7,))


def test_check_plan_catches_tampering(tmp_path) -> None:
    plan = select_params(BCW_SPEC, security = 128, parties = 10, ring_dims = (8192,), level_range = (6,))
    assert check_plan(replace(plan, tau = 1)) == ['bootstrap']
    assert check_plan(replace(plan, tau = 6)) == ['bootstrap']
    assert 'levels' in check_plan(replace(plan, chain = plan.chain[:-1]))
    assert 'security' in check_plan(replace(plan, ring_dim = 4096))

    path = tmp_path / 'plan.json'
    plan.write(path)
    saved = json.loads(path.read_text())
    assert [int(q) for q in saved['chain']] == list(plan.chain)
    assert saved['bootstrap_level'] == plan.tau - 1
    assert saved['chain_bits'][0] > saved['chain_bits'][1]


def test_comm_estimate_without_a_profile() -> None:
    plan = select_params(BCW_SPEC, security = 128, parties = 10, ring_dims = (8192,), level_range = (6,))
    assert comm_estimate(plan, BCW_SPEC, 1).total == 0
    est = comm_estimate(plan, BCW_SPEC, 10)
    params = plan.ring_params()
    assert est.map == 9 * sum(plan.cipher_counts) * ciphertext_size(params, params.initial_level)
    assert est.combine < est.map
    assert est.total == est.map + est.combine + est.lgd_refresh + est.reduce_refresh
    # Linear in the number of edges
    assert comm_estimate(plan, BCW_SPEC, 19).map == 2 * est.map


def test_profile_counts_rotations() -> None:
    spec = NetworkSpec.mlp((4, 4, 2), local_batch = 2)
    profile = profile_iteration(
        spec, toy_params(), 3, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS, boot_level = 1
    )
    assert profile.rotation_budget == 2 * rotation_budget(spec)
    assert profile.lgd.rotations == profile.rotation_budget
    assert profile.model_level == toy_params().initial_level
    assert profile.lgd.bootstraps > 0
    assert profile.lgd_refresh_bytes > 0


def test_profiled_estimate_matches_measured_traffic() -> None:
    parties = 3
    params = toy_params()
    spec = NetworkSpec.mlp((4, 4, 2), learning_rate = 2.0, local_batch = 2)
    ev = ReferenceContext(params, seed = 0, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS)
    data = separable(120, features = 4, seed = 4)
    fed = Federation(ev, spec, split_shards(data, parties, seed = 1), SimNetwork(params), topology = 'star', boot_level = 1)
    model = fed.prepare_phase(init_weights(spec, seed = 0))
    fed.iterate(model)
    phases = fed.net.stats.phases

    profile = profile_iteration(
        spec, params, parties, mask_bits = TOY_MASK_BITS, message_bits = TOY_MESSAGE_BITS, boot_level = 1
    )
    est = comm_estimate(params, spec, parties, profile)
    assert est.map == phases['map'].bytes
    assert est.combine == phases['combine'].bytes
    assert est.lgd_refresh == phases['map/bootstrap'].bytes
    assert est.reduce_refresh == phases['reduce/bootstrap'].bytes
    assert math.isclose(est.total, sum(phases[k].bytes for k in ('map', 'combine', 'map/bootstrap', 'reduce/bootstrap')))
