import numpy as np
import pytest
from pathlib import Path

from porogat.dataio import (DatasetFormatError, SynthParams, generate_synthetic, read_dataset,
                            write_dataset)
from porogat.metrics import auc

EXAMPLE = Path(__file__).parent / "data" / "example_dataset.tsv"


def test_default_dataset_shape_and_rate():
    recs = generate_synthetic()
    assert len(recs) == 1564
    assert sum(r.label for r in recs) == 70
    assert recs[0].patch.shape == (32, 32) and recs[0].state.size == 6
    assert len({r.layer for r in recs}) == 17


def test_peak_only_classifier_is_informative_but_not_perfect():
    recs = generate_synthetic()
    y = np.array([r.label for r in recs])
    peak = np.array([r.patch.max() for r in recs])
    a = auc(-peak, y)  # porous melt pools run cooler
    assert 0.6 < a < 0.95


def test_porous_records_cluster():
    recs = generate_synthetic()
    p = SynthParams()
    y = np.array([r.label for r in recs])
    layer = np.array([r.layer for r in recs])
    xy = np.array([r.coords for r in recs])

    def has_porous_neighbour(i):
        m = (layer == layer[i]) & (y == 1)
        m[i] = False
        return bool(np.any(np.hypot(*(xy[m] - xy[i]).T) <= p.cluster_radius))

    porous = np.mean([has_porous_neighbour(i) for i in np.flatnonzero(y)])
    base = np.mean([has_porous_neighbour(i) for i in range(len(recs))])
    assert porous >= 2 * base


def test_generation_is_deterministic():
    p = SynthParams(n_records=200, porous_rate=0.05, n_layers=4)
    assert generate_synthetic(p) == generate_synthetic(p)
    assert generate_synthetic(p) != generate_synthetic(SynthParams(n_records=200, porous_rate=0.05,
                                                                   n_layers=4, seed=1))


def test_too_few_porous_is_rejected():
    with pytest.raises(ValueError, match="too few porous"):
        generate_synthetic(SynthParams(n_records=100, porous_rate=0.02))


def test_round_trip(tmp_path, small_records):
    p = tmp_path / "d.tsv"
    write_dataset(small_records, p)
    assert read_dataset(p) == small_records


def test_example_file_reads():
    recs = read_dataset(EXAMPLE)
    assert len(recs) == 6
    assert {r.label for r in recs} == {0, 1}
    assert recs[0].patch.shape == (4, 4)


def test_wrong_patch_length_names_line(tmp_path):
    lines = EXAMPLE.read_text().splitlines()
    lines[3] = lines[3].rsplit("\t", 1)[0]
    p = tmp_path / "bad.tsv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 4"):
        read_dataset(p)


def test_bad_field_names_field(tmp_path):
    lines = EXAMPLE.read_text().splitlines()
    parts = lines[2].split("\t")
    parts[4] = "maybe"
    lines[2] = "\t".join(parts)
    p = tmp_path / "bad.tsv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=r"line 3: field label"):
        read_dataset(p)


def test_header_only_file_has_no_records(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text(EXAMPLE.read_text().splitlines()[0] + "\n")
    with pytest.raises(DatasetFormatError, match="no records"):
        read_dataset(p)


def test_header_dimension_mismatch(tmp_path):
    text = EXAMPLE.read_text().replace("H=4", "H=5", 1)
    p = tmp_path / "bad.tsv"
    p.write_text(text)
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(p)
