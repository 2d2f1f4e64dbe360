import numpy as np
import pytest

import ezmsg.core as ez

from ezmsg.fedhe.ledger import Counters
from ezmsg.fedhe.errors import LevelExhaustedError, ScaleOverflowError


def test_counters_snapshot_and_since() -> None:
    c = Counters(rotations = 3, bootstraps = 1)
    before = c.snapshot()
    c.rotations += 2
    c.mul_ct += 1
    delta = c.since(before)
    assert delta.rotations == 2
    assert delta.mul_ct == 1
    assert delta.bootstraps == 0
    c.reset()
    assert c == Counters()


def test_rescale_consumes_one_level(keyed) -> None:
    ctx, shares = keyed
    ct = ctx.encrypt_values(ctx.keys.public, 0.5)
    prod = ctx.mul_ct(ct, ct)
    assert prod.level == ctx.top_level
    out = ctx.res(prod)
    assert out.level == ctx.top_level - 1
    assert out.scale == pytest.approx(ctx.canonical_scale(ctx.top_level - 1))
    assert ctx.counters.mul_ct == 1
    assert ctx.counters.rescales == 1
    assert ctx.counters.key_switches == 1


def test_level_exhaustion(keyed) -> None:
    ctx, _ = keyed
    ct = ctx.encrypt_values(ctx.keys.public, 0.5, level = 0)
    with pytest.raises(LevelExhaustedError):
        ctx.res(ct)
    with pytest.raises(LevelExhaustedError):
        ctx.mul_const(ct, 2.0)


def test_add_brings_operands_together(keyed, rng: np.random.Generator) -> None:
    ctx, shares = keyed
    a_vals, b_vals = rng.uniform(-1, 1, size = (2, ctx.slots))
    a = ctx.encrypt_values(ctx.keys.public, a_vals)
    b = ctx.mul_const(ctx.mul_const(ctx.encrypt_values(ctx.keys.public, b_vals), 1.0), 1.0)
    total = ctx.add(a, b)
    assert total.level == b.level
    assert total.scale == pytest.approx(b.scale)
    np.testing.assert_allclose(ctx.decrypt_values(total, shares), a_vals + b_vals, atol = 1e-5)
    diff = ctx.sub(b, a)
    np.testing.assert_allclose(ctx.decrypt_values(diff, shares), b_vals - a_vals, atol = 1e-5)


def test_mul_ct_of_mixed_levels_stays_canonical(keyed, rng: np.random.Generator) -> None:
    ctx, shares = keyed
    a_vals, b_vals = rng.uniform(-1, 1, size = (2, ctx.slots))
    a = ctx.encrypt_values(ctx.keys.public, a_vals)
    b = ctx.encrypt_values(ctx.keys.public, b_vals, level = 4)
    out = ctx.res(ctx.mul_ct(a, b))
    assert out.level == 3
    assert out.scale == pytest.approx(ctx.canonical_scale(3))
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), a_vals * b_vals, atol = 1e-5)


def test_mul_const_and_set_scale(keyed, rng: np.random.Generator) -> None:
    ctx, shares = keyed
    values = rng.uniform(-1, 1, size = ctx.slots)
    ct = ctx.encrypt_values(ctx.keys.public, values)
    scaled = ctx.mul_const(ct, -0.3)
    assert scaled.level == ctx.top_level - 1
    np.testing.assert_allclose(ctx.decrypt_values(scaled, shares), -0.3 * values, atol = 1e-5)

    # Reinterpreting at a 4x larger scale divides the message by 4
    quarter = ctx.set_scale(ct, ct.scale * 4)
    np.testing.assert_allclose(ctx.decrypt_values(quarter, shares), values / 4, atol = 1e-5)


def test_small_constant_warns(keyed, monkeypatch) -> None:
    ctx, _ = keyed
    warnings = []
    monkeypatch.setattr(ez.logger, 'warning', warnings.append)
    ct = ctx.encrypt_values(ctx.keys.public, 1.0)
    ctx.mul_const(ct, 1e-9)
    assert any('keeps only' in w for w in warnings)


def test_plaintext_ops(keyed, rng: np.random.Generator) -> None:
    ctx, shares = keyed
    values = rng.uniform(-1, 1, size = ctx.slots)
    weights = rng.uniform(-1, 1, size = ctx.slots)
    ct = ctx.encrypt_values(ctx.keys.public, values)
    out = ctx.res(ctx.mul_pt(ctx.add_plain(ct, weights), weights))
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), (values + weights) * weights, atol = 1e-5)
    assert ctx.counters.mul_pt == 1
    shifted = ctx.add_const(ctx.neg(ct), 2.0)
    np.testing.assert_allclose(ctx.decrypt_values(shifted, shares), 2.0 - values, atol = 1e-5)


def test_integer_multiple_keeps_level(keyed) -> None:
    ctx, shares = keyed
    ct = ctx.encrypt_values(ctx.keys.public, 0.25)
    out = ctx.mul_int(ct, 4)
    assert out.level == ct.level
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), np.ones(ctx.slots), atol = 1e-5)


def test_rotations(keyed) -> None:
    ctx, shares = keyed
    values = np.arange(ctx.slots, dtype = float) / ctx.slots
    ct = ctx.encrypt_values(ctx.keys.public, values)
    np.testing.assert_allclose(ctx.decrypt_values(ctx.rot_l(ct, 4), shares), np.roll(values, -4), atol = 1e-5)
    np.testing.assert_allclose(ctx.decrypt_values(ctx.rot_r(ct, 3), shares), np.roll(values, 3), atol = 1e-5)
    assert ctx.rot_l(ct, ctx.slots) is ct


def test_too_many_values(keyed) -> None:
    ctx, _ = keyed
    with pytest.raises(ScaleOverflowError):
        ctx.encode(np.ones(ctx.slots + 1))
