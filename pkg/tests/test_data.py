import numpy as np
import pytest

from advpath import data as D
from advpath.exceptions import ConfigError, LoadError

SMALL = D.SynthConfig(n_positive=10, n_negative=8, seed=3)


@pytest.fixture(scope="module")
def small():
    return D.generate(SMALL)


def test_counts(small):
    cfg = D.SynthConfig(n_positive=100, n_negative=80)
    ds = D.generate(cfg)
    assert int(ds.labels.sum()) == 100 and int((ds.labels == 0).sum()) == 80


def test_deterministic(small):
    again = D.generate(SMALL)
    assert small.ids == again.ids
    for a, b in zip(small, again):
        assert a.image.tobytes() == b.image.tobytes() and a.label == b.label


def test_seed_changes_data(small):
    other = D.generate(D.SynthConfig(n_positive=10, n_negative=8, seed=4))
    assert any(a.image.tobytes() != b.image.tobytes() for a, b in zip(small, other))


def test_labeling_rule_against_placement_log():
    ds = D.generate(D.SynthConfig(n_positive=60, n_negative=60, seed=11))
    for p in ds:
        if p.label == 1:
            assert p.n_tumour() >= 5
            assert p.tumour_mask().any()
        else:
            assert p.n_tumour() == 0
            assert not p.tumour_mask().any()


def test_pixel_range(small):
    for p in small:
        assert p.image.min() >= 0 and p.image.max() <= 255 and p.image.shape == (3, 32, 32)


@pytest.mark.parametrize("bad", [
    dict(tumour_count_range=(4, 8)),
    dict(radius_range=(0.5, 2.0)),
    dict(n_positive=-1),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        D.SynthConfig(**bad).validate()


def test_split_balanced_example():
    ds = D.from_arrays(np.zeros((8, 3, 2, 2)), [1, 1, 1, 1, 0, 0, 0, 0])
    tr, te = D.split(ds, 0.5, seed=0)
    assert sorted(tr.labels) == [0, 0, 1, 1] and sorted(te.labels) == [0, 0, 1, 1]


def test_split_partition_and_determinism(small):
    tr, te = D.split(small, 0.7, seed=5)
    assert sorted(tr.ids + te.ids) == sorted(small.ids)
    assert not set(tr.ids) & set(te.ids)
    tr2, _ = D.split(small, 0.7, seed=5)
    assert tr.ids == tr2.ids


def test_split_fraction_bounds(small):
    for f in (0, 1, 1.5):
        with pytest.raises(ValueError):
            D.split(small, f)


def test_quantize_round_half_up():
    assert D.quantize(np.array([127.6, 127.5, 127.4, -3, 300]))[:].tolist() == [128, 128, 127, 0, 255]


def test_png_round_trip(small, tmp_path):
    D.save_dir(small, tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == len(small) + 1 and "labels.csv" in files
    back = D.load_dir(tmp_path)
    assert back.ids == small.ids
    np.testing.assert_array_equal(back.labels, small.labels)
    for a, b in zip(small, back):
        assert np.max(np.abs(a.image - b.image)) <= 0.5


def test_float_raw_round_trip_bit_exact(small, tmp_path):
    D.save_dir(small, tmp_path, format="float-raw")
    back = D.load_dir(tmp_path)
    for a, b in zip(small, back):
        assert a.image.tobytes() == b.image.tobytes()


def test_labels_csv_layout(small, tmp_path):
    D.save_dir(small, tmp_path)
    raw = (tmp_path / "labels.csv").read_bytes()
    assert raw.startswith(b"id,filename,label\n") and b"\r" not in raw


def test_missing_image_named(small, tmp_path):
    D.save_dir(small, tmp_path)
    (tmp_path / f"{small.ids[2]}.png").unlink()
    with pytest.raises(LoadError, match=rf"labels.csv:4.*{small.ids[2]}"):
        D.load_dir(tmp_path)


@pytest.mark.parametrize("row,msg", [("a,a.png,2", "label"), ("a,a.png", "3 columns")])
def test_malformed_rows(tmp_path, row, msg):
    (tmp_path / "labels.csv").write_text(f"id,filename,label\n{row}\n")
    with pytest.raises(LoadError, match=rf"labels.csv:2.*{msg}"):
        D.load_dir(tmp_path)


def test_empty_csv_is_empty_dataset(tmp_path):
    (tmp_path / "labels.csv").write_text("")
    assert len(D.load_dir(tmp_path)) == 0
    (tmp_path / "labels.csv").write_text("id,filename,label\n")
    assert len(D.load_dir(tmp_path)) == 0


def test_missing_directory(tmp_path):
    with pytest.raises(LoadError):
        D.load_dir(tmp_path / "nope")


def test_duplicate_ids_rejected():
    with pytest.raises(Exception):
        D.from_arrays(np.zeros((2, 3, 2, 2)), [0, 1], ids=["x", "x"])
