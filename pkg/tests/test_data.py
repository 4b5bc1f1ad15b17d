import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwacnn.align import dtw_cross
from dwacnn.core import Dataset, Series
from dwacnn.data import (DataFormatError, SplitSpec, SynthSpec, load_arabic, load_blocks,
                         load_delimited_dir, prepare, prototypes, random_warp, resample, split,
                         split_indices, synth_warped, write_delimited_dir, zscore)

ROW = " ".join(["0.5"] * 13)


def write(path, text):
    path.write_text(text)
    return path


# -- block format ---------------------------------------------------------------

def test_blocks_toy_file(tmp_path):
    f = write(tmp_path / "a.txt", f"{ROW}\n{ROW}\n\n{ROW}\n")
    ds = load_blocks(f, [1, 1])
    assert len(ds) == 2 and ds.labels.tolist() == [0, 1]
    assert [s.length for s in ds] == [2, 1] and ds.feature_dim == 13


def test_blocks_terminators_equivalent(tmp_path):
    a = load_blocks(write(tmp_path / "a.txt", f"{ROW}\n\n{ROW}\n"), [1, 1])
    b = load_blocks(write(tmp_path / "b.txt", f"\n{ROW}\n   \n\n{ROW}\n\n"), [1, 1])
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_blocks_errors(tmp_path):
    with pytest.raises(DataFormatError, match="a.txt:2"):
        load_blocks(write(tmp_path / "a.txt", f"{ROW}\n1 2 3\n"), [1])
    with pytest.raises(DataFormatError, match="manifest"):
        load_blocks(write(tmp_path / "b.txt", f"{ROW}\n\n{ROW}\n"), [1, 2])
    with pytest.raises(DataFormatError):
        load_blocks(write(tmp_path / "c.txt", ROW.replace("0.5", "nan", 1) + "\n"), [1])
    with pytest.raises(DataFormatError):
        load_arabic(tmp_path / "b.txt", tmp_path / "b.txt", [2], [1, 1])


# -- delimited directories ----------------------------------------------------------

def test_delimited_dir(tmp_path):
    for name in ("zeta", "alpha"):
        (tmp_path / name).mkdir()
        write(tmp_path / name / "s.csv", "1,2\n3,4\n5,6\n")
    ds = load_delimited_dir(tmp_path)
    assert ds.num_classes == 2 and ds.feature_dim == 2
    assert ds.items[0].id.endswith(os.path.join("alpha", "s.csv")) and ds.items[0].label == 0


def test_delimited_dir_errors(tmp_path):
    (tmp_path / "a").mkdir()
    write(tmp_path / "a" / "x.csv", "1,2\n")
    write(tmp_path / "a" / "y.csv", "1 2 3\n")
    with pytest.raises(DataFormatError, match="y.csv"):
        load_delimited_dir(tmp_path)
    (tmp_path / "a" / "y.csv").unlink()
    (tmp_path / "b").mkdir()
    with pytest.raises(DataFormatError, match="empty"):
        load_delimited_dir(tmp_path)


def test_delimited_roundtrip(tmp_path):
    ds = synth_warped(SynthSpec(classes=3, per_class=2, length=7))
    write_delimited_dir(ds, tmp_path)
    back = load_delimited_dir(tmp_path)
    assert back.labels.tolist() == ds.labels.tolist()
    assert all(np.array_equal(a.values, b.values) for a, b in zip(ds, back))


# -- preprocessing ------------------------------------------------------------------

def test_resample_examples():
    s = Series(np.random.default_rng(0).normal(size=(9, 2)))
    assert resample(s, 9) is s
    np.testing.assert_array_equal(resample(Series([[0.0], [2.0]]), 3).values, [[0], [1], [2]])
    np.testing.assert_array_equal(resample(Series(np.full((5, 1), 3.0)), 11).values, np.full((11, 1), 3.0))
    with pytest.raises(ValueError):
        resample(s, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_resample_bounds_and_endpoints(T, L, seed):
    v = np.random.default_rng(seed).normal(size=(T, 2))
    out = resample(Series(v), L).values
    assert out.shape == (L, 2)
    np.testing.assert_allclose(out[[0, -1]], v[[0, -1]], rtol=0, atol=1e-12)
    assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)


def test_zscore():
    rng = np.random.default_rng(1)
    raw = [Series(np.column_stack([rng.normal(3, 2, 10), np.full(10, 7.0)]), 0) for _ in range(5)]
    ds, mean, std = zscore(Dataset(raw, 1, 2))
    stacked = np.concatenate([s.values for s in ds])
    assert np.abs(stacked[:, 0].mean()) <= 1e-10
    assert np.all(stacked[:, 1] == 7.0) and std[1] == 0
    again, _, _ = zscore(ds)
    assert max(np.abs(a.values - b.values).max() for a, b in zip(ds, again)) <= 1e-12


def test_prepare_uses_training_statistics():
    ds = synth_warped(SynthSpec(classes=2, per_class=20, length=30))
    tr, va, te = split(ds, SplitSpec(0.2, 4, 0))
    ptr, (pva, pte), (mean, std) = prepare(tr, [va, te], 25)
    assert ptr.fixed_length == pte.fixed_length == 25
    raw_te = np.stack([resample(s, 25).values for s in te])
    np.testing.assert_allclose(pte.to_array(), (raw_te - mean) / std)


# -- splitting -----------------------------------------------------------------------

def test_split_default_sizes_and_determinism():
    labels = np.repeat(np.arange(10), 100)
    tr, va, te = split_indices(labels, 10, SplitSpec())
    assert (len(tr), len(va), len(te)) == (850, 50, 100)
    tr2, va2, te2 = split_indices(labels, 10, SplitSpec())
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2) and np.array_equal(te, te2)
    assert np.all(np.bincount(labels[te]) == 10)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.integers(0, 5))
def test_split_disjoint_exhaustive_stratified(K, seed, val):
    rng = np.random.default_rng(seed)
    counts = rng.integers(10, 40, size=K)
    labels = rng.permutation(np.repeat(np.arange(K), counts))
    spec = SplitSpec(0.1, val, seed)
    tr, va, te = split_indices(labels, K, spec)
    allidx = np.concatenate([tr, va, te])
    assert len(allidx) == len(labels) and len(np.unique(allidx)) == len(labels)
    assert len(va) == val
    assert set(labels[te]) == set(range(K))  # every class of size >= 10 appears in test
    assert np.array_equal(split_indices(labels, K, spec)[2], te)


def test_split_too_small():
    with pytest.raises(ValueError):
        split_indices(np.zeros(20, dtype=int), 1, SplitSpec(0.1, 50))


# -- synthetic data -----------------------------------------------------------------

def test_synth_without_distortion_equals_prototype():
    spec = SynthSpec(classes=3, per_class=4, warp=1.0, noise=0.0, seed=5)
    ds = synth_warped(spec)
    protos = prototypes(spec)
    for s in ds:
        assert np.array_equal(s.values, protos[s.label])
    assert np.all(ds.class_counts() == 4)


def test_random_warp_slope_bounds():
    gen = np.random.default_rng(0)
    for _ in range(200):
        tau = random_warp(gen, 50, 2.0)
        slopes = np.diff(tau)
        assert tau[0] == 0 and tau[-1] == 49
        assert slopes.min() >= 0.5 - 1e-9 and slopes.max() <= 2.0 + 1e-9


def test_synth_is_seeded():
    a = synth_warped(SynthSpec(per_class=3, seed=9))
    b = synth_warped(SynthSpec(per_class=3, seed=9))
    c = synth_warped(SynthSpec(per_class=3, seed=10))
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not np.array_equal(a.items[0].values, c.items[0].values)


def test_dtw_nearest_neighbour_beats_euclidean_under_warping():
    acc_eu, acc_dt = [], []
    for seed in range(5):
        ds = synth_warped(SynthSpec(classes=4, per_class=40, warp=2.0, noise=0.05, seed=seed))
        tr, _, te = split(ds, SplitSpec(0.5, 0, seed))
        Xtr, Xte = tr.to_array(), te.to_array()
        eu = np.sqrt(((Xte[:, None] - Xtr[None]) ** 2).sum(axis=(2, 3)))
        dt = dtw_cross(Xte, Xtr)
        acc_eu.append(np.mean(tr.labels[eu.argmin(axis=1)] == te.labels))
        acc_dt.append(np.mean(tr.labels[dt.argmin(axis=1)] == te.labels))
    assert np.mean(acc_dt) > np.mean(acc_eu)
    assert all(d >= e for d, e in zip(acc_dt, acc_eu))
