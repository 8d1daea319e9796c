import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porogat.augment import (AugmentPolicy, a1_gaussian_noise, a2_brightness, a3_rigid,
                             a4_interpolate, augment_training_set, n_to_append)
from porogat.core import Record, RngHandle

POL = AugmentPolicy()


def _patch(gen, lo=1200.0, hi=2200.0):
    return gen.uniform(lo, hi, size=(32, 32))


def _rec(i, label, patch, state=None):
    return Record(id=i, patch=patch, state=np.zeros(6) if state is None else state, layer=0,
                  coords=(0.0, 0.0), label=label)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(probs=(0.5, 0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        AugmentPolicy(scale=(1.2, 1.1))
    with pytest.raises(ValueError):
        AugmentPolicy(lam=(0.2, 1.5))
    with pytest.raises(ValueError):
        AugmentPolicy(noise_var=(-1.0, 4.0))


def test_a1_zero_variance_is_identity(gen):
    p = _patch(gen)
    assert np.array_equal(a1_gaussian_noise(p, 0.0, gen), p)


def test_a1_noise_std(gen):
    # std of (out - in) on unclipped pixels, variance 25 -> 5 +- 0.5
    p = np.full((32, 32), 1800.0)
    diffs = [a1_gaussian_noise(p, 25.0, gen) - p for _ in range(10_000 // 100)]
    d = np.concatenate([x.ravel() for x in diffs])
    assert abs(d.std() - 5.0) < 0.5


def test_a1_respects_upper_bound(gen):
    p = np.full((8, 8), POL.intensity[1])
    assert a1_gaussian_noise(p, 400.0, gen).max() <= POL.intensity[1]
    with pytest.raises(ValueError):
        a1_gaussian_noise(p, -1.0, gen)


def test_a2_scaling(gen):
    p = _patch(gen)
    assert np.array_equal(a2_brightness(p, 1.0), p)
    out = a2_brightness(np.full((4, 4), 2000.0), 1.1)
    assert np.all(out == 2200.0)
    assert a2_brightness(np.full((4, 4), 2400.0), 1.1).max() == POL.intensity[1]
    with pytest.raises(ValueError):
        a2_brightness(p, 0.0)


def test_a3_identity_and_quarter_turn(gen):
    p = _patch(gen)
    assert np.array_equal(a3_rigid(p, 0.0, 0, 0), p)
    wide = AugmentPolicy(theta_max=90.0)
    assert np.allclose(a3_rigid(p, 90.0, 0, 0, wide), np.rot90(p, 1), atol=1e-9)


def test_a3_shift_moves_columns_and_rows(gen):
    p = _patch(gen, 1300, 1400)
    out = a3_rigid(p, 0.0, 2, 0)
    assert np.array_equal(out[:, 2:], p[:, :-2])
    assert np.all(out[:, :2] == p.min())
    out = a3_rigid(p, 0.0, 0, -1)
    assert np.array_equal(out[:-1], p[1:])


def test_a3_bounds(gen):
    p = _patch(gen)
    with pytest.raises(ValueError):
        a3_rigid(p, 11.0, 0, 0)
    with pytest.raises(ValueError):
        a3_rigid(p, 0.0, 3, 0)


def test_a4_mixing(gen):
    a, b = _patch(gen), _patch(gen)
    ra, rb = _rec(0, 1, a, np.ones(6)), _rec(1, 1, b, np.zeros(6))
    patch, state = a4_interpolate(ra, rb, 1.0)
    assert np.array_equal(patch, a) and np.array_equal(state, np.ones(6))
    patch, state = a4_interpolate(ra, rb, 0.25)
    assert np.allclose(patch, 0.25 * a + 0.75 * b)
    assert np.allclose(state, 0.25)
    with pytest.raises(ValueError, match="porous"):
        a4_interpolate(ra, _rec(2, 0, b), 0.5)


@given(st.floats(-10, 10), st.integers(-2, 2), st.integers(-2, 2), st.floats(0.9, 1.1),
       st.floats(0, 64))
@settings(max_examples=40, deadline=None)
def test_operators_stay_in_range(theta, du, dv, scale, var):
    gen = np.random.default_rng(0)
    p = _patch(gen, 900, 2600)
    lo, hi = POL.intensity
    for out in (a1_gaussian_noise(p, var, gen), a2_brightness(p, scale), a3_rigid(p, theta, du, dv)):
        assert out.shape == p.shape
        assert out.min() >= lo and out.max() <= hi


def test_append_count():
    # 42 porous among 938 training records: 854 copies bring porous to 896 = non-porous count
    n = n_to_append(42, 938, 0.5)
    assert n == 854 and 42 + n == 938 - 42
    assert n_to_append(10, 20, 0.5) == 0


def test_augment_training_set_only_adds_porous(gen):
    train = [_rec(i, 1 if i < 4 else 0, _patch(gen)) for i in range(40)]
    out = augment_training_set(train, POL, 0.5, RngHandle(0, "aug"))
    new = out[len(train):]
    assert out[:len(train)] == train
    assert len(new) == n_to_append(4, 40, 0.5)
    assert all(r.label == 1 for r in new)
    assert sum(r.label for r in out) / len(out) == pytest.approx(0.5, abs=0.02)
    assert len({r.id for r in out}) == len(out)
    again = augment_training_set(train, POL, 0.5, RngHandle(0, "aug"))
    assert again == out
