import gzip

import numpy as np
import pytest

from gevnet.data import (
    SphericalDataset,
    cap_mask,
    field_mass,
    load_datasets,
    load_idx,
    make_dataset,
    mixup_batch,
    one_hot,
    prepare_datasets,
    project_images,
    project_to_sphere,
    random_rotation_augment,
    save_datasets,
    stratified_subset,
    write_idx,
)
from gevnet.errors import ContractViolation, FormatError, ShapeMismatchError
from gevnet.geometry import build_icosphere


def write_pair(tmp_path, images, labels, suffix=""):
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp


def toy_images(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, 28, 28)).astype(np.uint8), (np.arange(n) % 10).astype(np.uint8)


# -- IDX ---------------------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    images, labels = toy_images(20)
    X, y = load_idx(*write_pair(tmp_path, images, labels))
    np.testing.assert_array_equal(X, images / 255.0)
    np.testing.assert_array_equal(y, labels)
    assert X.min() >= 0.0 and X.max() <= 1.0


def test_idx_header_count(tmp_path):
    X, y = load_idx(*write_pair(tmp_path, np.zeros((10000, 28, 28), np.uint8), np.zeros(10000, np.uint8)))
    assert X.shape == (10000, 28, 28) and y.shape == (10000,)
    np.testing.assert_array_equal(X, 0.0)


def test_idx_gzip(tmp_path):
    images, labels = toy_images(5)
    X, y = load_idx(*write_pair(tmp_path, images, labels, ".gz"))
    with gzip.open(tmp_path / "img.gz", "rb") as fh:
        assert fh.read(4) == b"\x00\x00\x08\x03"
    np.testing.assert_array_equal(y, labels)


def test_idx_bad_magic(tmp_path):
    ip, lp = write_pair(tmp_path, *toy_images(3))
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    ip, lp = write_pair(tmp_path, *toy_images(3))
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    images, labels = toy_images(4)
    with pytest.raises(FormatError):
        load_idx(*write_pair(tmp_path, images, labels[:3]))


def test_committed_split(mnist_dir):
    X, y = load_idx(mnist_dir / "t10k-images-idx3-ubyte", mnist_dir / "t10k-labels-idx1-ubyte")
    assert X.shape == (1000, 28, 28)
    np.testing.assert_array_equal(np.bincount(y), 100)


# -- projection ----------------------------------------------------------------------------


def test_projection_zero_and_ones():
    grid = build_icosphere(3)
    np.testing.assert_array_equal(project_to_sphere(np.zeros((28, 28)), grid), 0.0)
    f = project_to_sphere(np.ones((28, 28)), grid)
    cap = cap_mask(grid)
    np.testing.assert_allclose(f[cap], 1.0, rtol=1e-15)
    np.testing.assert_array_equal(f[~cap], 0.0)


@pytest.mark.parametrize("level", [3, 4])
def test_cap_fraction(level):
    # cap area fraction (1 - cos(pi/3)) / 2 = 0.25
    frac = cap_mask(build_icosphere(level)).mean()
    assert abs(frac - 0.25) < 0.02


def test_projection_linear():
    grid = build_icosphere(2)
    a, b = np.random.default_rng(0).uniform(0, 1, (2, 28, 28))
    lhs = project_to_sphere(2 * a - 0.5 * b, grid)
    rhs = 2 * project_to_sphere(a, grid) - 0.5 * project_to_sphere(b, grid)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_project_images_matches_single():
    grid = build_icosphere(2)
    imgs = np.random.default_rng(1).uniform(0, 1, (3, 28, 28))
    np.testing.assert_array_equal(project_images(imgs, grid)[1], project_to_sphere(imgs[1], grid))
    with pytest.raises(ShapeMismatchError):
        project_to_sphere(imgs, grid)


def test_projection_orientation():
    # the top image row lands on +y, the left column on -x
    grid = build_icosphere(4)
    img = np.zeros((28, 28))
    img[:4] = 1.0
    f = project_to_sphere(img, grid)
    assert grid.vertices[f > 0.5, 1].min() > 0
    img = np.zeros((28, 28))
    img[:, :4] = 1.0
    f = project_to_sphere(img, grid)
    assert grid.vertices[f > 0.5, 0].max() < 0


# -- datasets, augmentation, mixup -------------------------------------------------------------


def test_stratified_subset():
    labels = np.repeat(np.arange(10), 30)
    idx = stratified_subset(labels, 57, seed=3)
    assert len(idx) == 57 and len(set(idx)) == 57
    counts = np.bincount(labels[idx], minlength=10)
    assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(idx, stratified_subset(labels, 57, seed=3))
    with pytest.raises(ContractViolation):
        stratified_subset(np.repeat(np.arange(10), [1] + [50] * 9), 100, 0)


def test_dataset_validation():
    with pytest.raises(ShapeMismatchError):
        SphericalDataset(np.zeros((2, 42, 1)), one_hot(np.array([1, 2])), level=2)
    with pytest.raises(ContractViolation):
        SphericalDataset(np.zeros((2, 42, 1)), np.zeros((2, 10)), level=1)


def test_augment_reproducible_and_identity():
    imgs, labels = toy_images(4)
    ds = make_dataset(imgs / 255.0, labels, level=2)
    a = random_rotation_augment(ds, seed=7)
    b = random_rotation_augment(ds, seed=7)
    np.testing.assert_array_equal(a.fields, b.fields)
    assert a.rotated
    assert not np.array_equal(a.fields, random_rotation_augment(ds, seed=8).fields)
    ident = random_rotation_augment(ds, seed=7, force_identity=True)
    np.testing.assert_allclose(ident.fields, ds.fields, atol=1e-14)


def test_augment_preserves_mass(mnist_dir):
    X, y = load_idx(mnist_dir / "t10k-images-idx3-ubyte", mnist_dir / "t10k-labels-idx1-ubyte")
    ds = make_dataset(X[:20], y[:20], level=3)
    rot = random_rotation_augment(ds, seed=0)
    m0, m1 = field_mass(ds.fields, 3), field_mass(rot.fields, 3)
    assert np.max(np.abs(m1 - m0) / m0) <= 0.02


def test_mixup():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((2, 3, 42, 1))
    y1, y2 = one_hot(np.array([0, 1, 2])), one_hot(np.array([3, 4, 5]))
    np.testing.assert_array_equal(mixup_batch(x1, y1, x2, y2, 1.0)[0], x1)
    np.testing.assert_array_equal(mixup_batch(x1, y1, x2, y2, 0.0)[1], y2)
    x, y = mixup_batch(x1, y1, x2, y2, 0.5)
    np.testing.assert_allclose(x, (x1 + x2) / 2)
    np.testing.assert_allclose(y.sum(axis=1), 1.0)
    with pytest.raises(ShapeMismatchError):
        mixup_batch(x1, y1, x2[:2], y2, 0.5)
    with pytest.raises(ContractViolation):
        mixup_batch(x1, y1, x2, y2, 1.5)


def test_regimes_share_labels():
    imgs, labels = toy_images(60)
    X = imgs / 255.0
    kw = dict(level=2, n_train=30, n_test=20, seed=1)
    nr = prepare_datasets(X, labels, X, labels, regime="NR", **kw)
    r = prepare_datasets(X, labels, X, labels, regime="R", **kw)
    for a, b in zip(nr, r):
        np.testing.assert_array_equal(a.labels, b.labels)
    assert not nr[0].rotated and r[0].rotated and r[1].rotated
    with pytest.raises(ContractViolation):
        prepare_datasets(X, labels, X, labels, regime="X", **kw)


def test_dataset_container_round_trip(tmp_path):
    imgs, labels = toy_images(6)
    ds = make_dataset(imgs / 255.0, labels, level=1)
    save_datasets(tmp_path / "d.gevc", ds, ds.subset([0, 1]), {"seed": 4})
    tr, te, meta = load_datasets(tmp_path / "d.gevc")
    np.testing.assert_array_equal(tr.fields, ds.fields)
    np.testing.assert_array_equal(te.labels, ds.labels[:2])
    assert meta["seed"] == 4 and tr.level == 1
