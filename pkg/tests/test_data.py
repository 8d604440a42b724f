import gzip

import h5py
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlfumi.data import (Bag, DataFormatError, MILDataset, SynthSpec, load_csv_bags,
                         load_instances_csv, load_usps, make_bags, save_csv_bags,
                         save_ground_truth, synth_generate, synth_test_set)


def write_usps_text(path, X, y, jf=False):
    lines = []
    if jf:
        lines.append("10 256")
    for label, row in zip(y, X):
        lines.append(" ".join([str(int(label))] + [f"{v:.6f}" for v in row]))
    if jf:
        lines.append("-1")
    text = "\n".join(lines) + "\n"
    if str(path).endswith(".gz"):
        with gzip.open(path, "wt") as fh:
            fh.write(text)
    else:
        path.write_text(text)


@pytest.fixture
def usps_rows(rng):
    X = rng.uniform(-1, 1, (12, 256))
    y = np.arange(12) % 10
    return X, y


# --------------------------------------------------------------------------
# containers


def test_dataset_properties():
    ds = MILDataset(np.arange(12.0).reshape(6, 2), [0, 0, 1, 1, 2, 2], [1, 0, 1])
    assert ds.n_instances == 6 and ds.n_bags == 3 and ds.feature_dim == 2
    assert ds.positive.tolist() == [True, True, False, False, True, True]
    assert [b.label for b in ds.bags] == [1, 0, 1]
    assert np.array_equal(ds.bags[1].instances, [[4, 5], [6, 7]])


def test_from_bags_roundtrip():
    bags = [Bag(np.ones((2, 3)), 1), (np.zeros((1, 3)), 0)]
    ds = MILDataset.from_bags(bags)
    assert ds.n_instances == 3 and ds.bag_labels.tolist() == [1, 0]


@pytest.mark.parametrize("kwargs,msg", [
    (dict(X=[[np.nan, 1.0]], bag_ids=[0], bag_labels=[1]), "non-finite"),
    (dict(X=[[1.0]], bag_ids=[0], bag_labels=[2]), "0 or 1"),
    (dict(X=[[1.0]], bag_ids=[0], bag_labels=[1, 0]), "at least one instance"),
    (dict(X=[[1.0]], bag_ids=[3], bag_labels=[1]), "unknown bags"),
])
def test_dataset_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        MILDataset(**kwargs)


def test_bag_validation():
    with pytest.raises(ValueError):
        Bag(np.ones((1, 2)), 3)
    with pytest.raises(ValueError):
        MILDataset.from_bags([Bag(np.ones((1, 2)), 1), Bag(np.ones((1, 3)), 0)])


def test_check_trainable():
    ds = MILDataset(np.ones((2, 2)), [0, 1], [1, 1])
    with pytest.raises(ValueError, match="negative"):
        ds.check_trainable()


# --------------------------------------------------------------------------
# USPS


def test_load_usps_plain(tmp_path, usps_rows):
    X, y = usps_rows
    write_usps_text(tmp_path / "usps.txt", X, y)
    Xl, yl = load_usps(tmp_path / "usps.txt")
    assert Xl.shape == (12, 256) and yl.tolist() == y.tolist()
    assert Xl.min() == 0.0 and Xl.max() == 1.0
    ref = (X - X.min()) / (X.max() - X.min())
    assert np.allclose(Xl, ref, atol=1e-5)


def test_load_usps_jf_gzip_and_digits(tmp_path, usps_rows):
    X, y = usps_rows
    write_usps_text(tmp_path / "usps.jf.gz", X, y, jf=True)
    Xl, yl = load_usps(tmp_path / "usps.jf.gz", digits=[1, 3])
    assert sorted(set(yl.tolist())) == [1, 3]
    assert Xl.shape[0] == int(np.isin(y, [1, 3]).sum())


def test_load_usps_h5(tmp_path, usps_rows):
    X, y = usps_rows
    with h5py.File(tmp_path / "usps.h5", "w") as fh:
        for name, sl in (("train", slice(0, 8)), ("test", slice(8, 12))):
            g = fh.create_group(name)
            g["data"] = X[sl]
            g["target"] = y[sl]
    Xl, yl = load_usps(tmp_path / "usps.h5")
    assert Xl.shape == (12, 256) and yl.tolist() == y.tolist()


def test_load_usps_malformed_row_names_line(tmp_path, usps_rows):
    X, y = usps_rows
    write_usps_text(tmp_path / "bad.txt", X, y)
    lines = (tmp_path / "bad.txt").read_text().splitlines()
    lines[4] = " ".join(lines[4].split()[:100])
    (tmp_path / "bad.txt").write_text("\n".join(lines))
    with pytest.raises(DataFormatError, match=r"bad\.txt:5: expected 257 fields"):
        load_usps(tmp_path / "bad.txt")


def test_load_usps_empty(tmp_path):
    (tmp_path / "e.txt").write_text("")
    with pytest.raises(DataFormatError, match="no instances"):
        load_usps(tmp_path / "e.txt")


# --------------------------------------------------------------------------
# CSV


def test_csv_roundtrip(tmp_path, rng):
    ds = MILDataset(rng.standard_normal((7, 3)), [0, 0, 1, 1, 1, 2, 2], [1, 0, 1])
    save_csv_bags(ds, tmp_path / "x.csv", tmp_path / "b.csv")
    back = load_csv_bags(tmp_path / "x.csv", tmp_path / "b.csv")
    assert np.array_equal(back.X, ds.X)
    assert back.bag_ids.tolist() == ds.bag_ids.tolist()
    assert back.bag_labels.tolist() == ds.bag_labels.tolist()


def test_csv_shuffled_rows_and_tokens(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n3,4\n5,6\n")
    (tmp_path / "b.csv").write_text(
        "row_index,bag_id,bag_label\n2,neg,0\n0,pos,1\n1,pos,1\n")
    ds = load_csv_bags(tmp_path / "x.csv", tmp_path / "b.csv")
    assert ds.X.tolist() == [[5, 6], [1, 2], [3, 4]]
    assert ds.bag_labels.tolist() == [0, 1]
    assert ds.bag_ids.tolist() == [0, 1, 1]


@pytest.mark.parametrize("bags,msg", [
    ("row_index,bag_id\n0,a\n", "missing columns"),
    ("row_index,bag_id,bag_label\n0,a,1\n", "assignments"),
    ("row_index,bag_id,bag_label\n0,a,1\n1,a,0\n", "conflicting"),
    ("row_index,bag_id,bag_label\n0,a,1\n0,b,0\n", "permutation"),
])
def test_csv_bad_assignments(tmp_path, bags, msg):
    (tmp_path / "x.csv").write_text("1,2\n3,4\n")
    (tmp_path / "b.csv").write_text(bags)
    with pytest.raises(DataFormatError, match=msg):
        load_csv_bags(tmp_path / "x.csv", tmp_path / "b.csv")


def test_instances_csv_ragged_and_empty(tmp_path):
    (tmp_path / "r.csv").write_text("1,2\n3\n")
    with pytest.raises(DataFormatError, match="row 2"):
        load_instances_csv(tmp_path / "r.csv")
    (tmp_path / "e.csv").write_text("")
    assert load_instances_csv(tmp_path / "e.csv").size == 0


# --------------------------------------------------------------------------
# bag construction


def test_make_bags_protocol():
    X = np.arange(200.0).reshape(100, 2)
    y = np.arange(100) % 5
    ds = make_bags(X, y, 2, pos_bags=6, neg_bags=3, bag_size=4, neg_bag_size=10,
                   targets_per_pos_bag=1, seed=1)
    assert ds.n_bags == 9
    assert ds.bag_labels.tolist() == [1] * 6 + [0] * 3
    lab = y[(ds.X[:, 0] / 2).astype(int)]
    for j in range(9):
        rows = ds.bag_ids == j
        n_target = int(np.sum(lab[rows] == 2))
        if j < 6:
            assert rows.sum() == 4 and n_target == 1
        else:
            assert rows.sum() == 10 and n_target == 0
        # no repeats inside a bag
        assert np.unique(ds.X[rows], axis=0).shape[0] == rows.sum()


def test_make_bags_deterministic_and_errors():
    X = np.random.default_rng(0).standard_normal((40, 3))
    y = np.arange(40) % 4
    a = make_bags(X, y, 1, 5, 5, seed=7)
    b = make_bags(X, y, 1, 5, 5, seed=7)
    assert np.array_equal(a.X, b.X)
    with pytest.raises(ValueError, match="does not occur"):
        make_bags(X, y, 9)
    with pytest.raises(ValueError, match="targets_per_pos_bag"):
        make_bags(X, y, 1, bag_size=2, targets_per_pos_bag=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 1000))
def test_make_bags_target_counts_property(bag_size, k, seed):
    k = min(k, bag_size)
    X = np.arange(60.0)[:, None]
    y = np.arange(60) % 3
    ds = make_bags(X, y, 0, pos_bags=4, neg_bags=2, bag_size=bag_size,
                   targets_per_pos_bag=k, seed=seed)
    lab = y[ds.X[:, 0].astype(int)]
    for j in range(6):
        rows = ds.bag_ids == j
        assert np.sum(lab[rows] == 0) == (k if j < 4 else 0)


# --------------------------------------------------------------------------
# synthetic


def test_synth_generate_structure():
    spec = SynthSpec(d=12, T_true=2, M_true=4, bags_pos=3, bags_neg=2, bag_size=5,
                     targets_per_pos_bag=2, seed=3)
    prob = synth_generate(spec)
    ds = prob.dataset
    assert ds.X.shape == (25, 12)
    assert np.allclose(np.linalg.norm(prob.target_atoms, axis=0), 1.0)
    assert np.allclose(np.linalg.norm(prob.background_atoms, axis=0), 1.0)
    for j in range(5):
        assert prob.z[ds.bag_ids == j].sum() == (2 if j < 3 else 0)
    # noiseless non-target rows lie in the span of one background atom
    Db = prob.background_atoms
    for x in ds.X[~prob.z]:
        best = max(abs(x @ Db[:, k]) / np.linalg.norm(x) for k in range(4))
        assert best == pytest.approx(1.0)


def test_synth_deterministic_and_test_set():
    spec = SynthSpec(seed=5, noise_sigma=0.01)
    a, b = synth_generate(spec), synth_generate(spec)
    assert np.array_equal(a.dataset.X, b.dataset.X)
    X, z = synth_test_set(a, n_instances=50, target_fraction=0.4)
    assert X.shape == (50, spec.d) and z.sum() == 20


@pytest.mark.parametrize("bad", [dict(targets_per_pos_bag=9), dict(T_true=15, M_true=10),
                                 dict(sparsity=0), dict(noise_sigma=-1.0)])
def test_synth_spec_validation(bad):
    with pytest.raises(ValueError):
        synth_generate(SynthSpec(**bad))


def test_save_ground_truth(tmp_path):
    prob = synth_generate(SynthSpec(seed=1))
    save_ground_truth(prob, tmp_path / "a.npz", tmp_path / "z.txt")
    with np.load(tmp_path / "a.npz") as f:
        assert np.array_equal(f["target_atoms"], prob.target_atoms)
    assert np.loadtxt(tmp_path / "z.txt").astype(bool).tolist() == prob.z.tolist()
