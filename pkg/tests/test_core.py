import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porogat.core import (ConfigError, Record, RngHandle, RunConfig, box_muller, dump_config,
                          load_config, parse_config, split_dataset)


def _rec(i, label, layer=0):
    return Record(id=i, patch=np.zeros((2, 2)), state=np.zeros(3), layer=layer,
                  coords=(float(i), 0.0), label=label)


def test_record_validation():
    with pytest.raises(ValueError, match="label"):
        _rec(0, 2)
    with pytest.raises(ValueError, match="2-D"):
        Record(id=0, patch=np.zeros(4), state=np.zeros(1), layer=0, coords=(0, 0), label=0)
    with pytest.raises(ValueError, match="layer"):
        _rec(0, 0, layer=-1)
    with pytest.raises(ValueError, match="non-finite"):
        Record(id=0, patch=np.full((2, 2), np.nan), state=np.zeros(1), layer=0,
               coords=(0, 0), label=0)


def test_record_is_read_only():
    r = _rec(1, 1)
    with pytest.raises(ValueError):
        r.patch[0, 0] = 5.0
    assert r == _rec(1, 1)
    assert r != _rec(2, 1)


def test_split_counts_for_default_population():
    recs = [_rec(i, 1 if i < 70 else 0) for i in range(1564)]
    train, val, test = split_dataset(recs, (0.6, 0.2, 0.2), seed=0)
    assert [sum(r.label for r in s) for s in (train, val, test)] == [42, 14, 14]
    assert len(train) + len(val) + len(test) == 1564
    ids = [r.id for s in (train, val, test) for r in s]
    assert len(set(ids)) == 1564


def test_split_rejects_too_few_porous():
    recs = [_rec(i, 1 if i < 2 else 0) for i in range(50)]
    with pytest.raises(ValueError, match="porous"):
        split_dataset(recs)


@given(st.integers(3, 40), st.integers(1, 200), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_split_is_partition_and_deterministic(n_pos, n_neg, seed):
    recs = [_rec(i, 1 if i < n_pos else 0) for i in range(n_pos + n_neg)]
    a = split_dataset(recs, seed=seed)
    b = split_dataset(list(reversed(recs)), seed=seed)
    assert [[r.id for r in s] for s in a] == [[r.id for r in s] for s in b]
    ids = sorted(r.id for s in a for r in s)
    assert ids == list(range(n_pos + n_neg))
    # every split gets its share of porous records, up to rounding
    for part, f in zip(a, (0.6, 0.2, 0.2)):
        assert abs(sum(r.label for r in part) - f * n_pos) < 3


def test_rng_handles():
    a = RngHandle(3, "x").generator().random(4)
    b = RngHandle(3, "x").generator().random(4)
    c = RngHandle(3, "y").generator().random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    k1 = RngHandle(3, "x").child(7).generator().random()
    k2 = RngHandle(3, "x").child(8).generator().random()
    assert k1 != k2


def test_box_muller_moments():
    z = box_muller(np.random.default_rng(0), 200_001)
    assert z.size == 200_001
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


def test_config_round_trip(tmp_path):
    cfg = RunConfig(epsilon=4.0, seeds=(1, 2), privacy_mode="uniform", alpha=0.25)
    p = tmp_path / "c.txt"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("nonsense = 3")
    with pytest.raises(ConfigError):
        parse_config("epsilon = -1")
    with pytest.raises(ConfigError):
        parse_config("privacy_mode = strong")
    with pytest.raises(ConfigError):
        RunConfig(train_frac=0.5, val_frac=0.2, test_frac=0.2)
    cfg = parse_config("# comment\nepsilon = 8   # trailing\n\noversampling_enabled = false\n")
    assert cfg.epsilon == 8.0 and cfg.oversampling_enabled is False


def test_example_config_parses():
    from pathlib import Path
    cfg = load_config(Path(__file__).parents[1] / "configs" / "example.conf")
    assert cfg.D == 64 and math.isclose(cfg.epsilon, 2.0)
