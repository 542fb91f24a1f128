import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldlmix import dataset as D
from ldlmix import kernels
from ldlmix.errors import ConfigurationError, DimensionError, ParseError


def write(tmp_path, text, name="d.ldl"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- text format

def test_parse_minimal_file(tmp_path):
    ds = D.parse_ldl_file(write(tmp_path, "2 3 2\n1 2 3 0.25 0.75\n4 5 6 1 0\n"))
    assert (ds.m, ds.n, ds.c) == (2, 3, 2)
    np.testing.assert_array_equal(ds.labels, [[0.25, 0.75], [1.0, 0.0]])


def test_label_row_summing_to_point_nine_is_rejected_with_line(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        D.parse_ldl_file(write(tmp_path, "2 1 2\n0 0.5 0.5\n0 0.45 0.45\n"))


def test_small_label_deviation_is_renormalised(tmp_path):
    ds = D.parse_ldl_file(write(tmp_path, "1 1 2\n0 0.50004 0.5\n"))
    assert ds.labels.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("text, line", [
    ("2 3\n", 1),
    ("a 1 1\n0 1\n", 1),
    ("0 1 1\n", 1),
    ("1 2 2\n1 0.5 0.5\n", 2),
    ("1 1 2\n0 -0.5 1.5\n", 2),
    ("2 1 1\n0 1\n", 2),
    ("1 1 1\n0 x\n", 2),
])
def test_malformed_inputs_report_line(tmp_path, text, line):
    with pytest.raises(ParseError, match=f"line {line}"):
        D.parse_ldl_file(write(tmp_path, text))


def test_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    ds = D.LdlDataset("r", rng.standard_normal((20, 5)) * 1e3, rng.dirichlet(np.ones(4), size=20))
    p1 = tmp_path / "a.ldl"
    D.write_ldl_file(ds, p1)
    back = D.parse_ldl_file(p1)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    p2 = tmp_path / "b.ldl"
    D.write_ldl_file(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_written_file_uses_lf_and_no_exponent(tmp_path):
    ds = D.LdlDataset("r", [[1e-20, 3.0]], [[1.0]])
    p = tmp_path / "a.ldl"
    D.write_ldl_file(ds, p)
    raw = p.read_bytes()
    assert b"\r" not in raw and b"e" not in raw.lower()


def test_dataset_rejects_nan():
    with pytest.raises(ParseError):
        D.LdlDataset("x", [[np.nan]], [[1.0]])


# ---------------------------------------------------------------- z-score

def test_zscore_hand_example():
    out, mean, std = D.zscore_fit_transform([[0.0], [2.0]], [[1.0]])
    np.testing.assert_array_equal(out, [[0.0]])
    assert mean[0] == 1.0 and std[0] == 1.0


def test_zscore_self_application():
    x = np.random.default_rng(1).standard_normal((50, 4)) * 3 + 7
    out, _, _ = D.zscore_fit_transform(x, x)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)


def test_zscore_constant_column_is_only_centred():
    x = np.array([[5.0, 1.0], [5.0, 3.0]])
    out, _, std = D.zscore_fit_transform(x, x)
    np.testing.assert_array_equal(out[:, 0], [0.0, 0.0])
    assert std[0] == 1.0


def test_zscore_column_mismatch():
    with pytest.raises(DimensionError):
        D.zscore_fit_transform(np.ones((2, 2)), np.ones((2, 3)))


# ---------------------------------------------------------------- folds

def test_kfold_even_split():
    plan = D.kfold_split(10, 5)
    assert [len(f) for f in plan.assignments[0]] == [2] * 5


def test_kfold_remainder_distribution():
    plan = D.kfold_split(11, 5)
    assert sorted((len(f) for f in plan.assignments[0]), reverse=True) == [3, 2, 2, 2, 2]


def test_kfold_is_deterministic():
    a, b = D.kfold_split(30, 5, 3, seed=9), D.kfold_split(30, 5, 3, seed=9)
    for fa, fb in zip(a.assignments, b.assignments):
        for x, y in zip(fa, fb):
            np.testing.assert_array_equal(x, y)


def test_kfold_too_few_rows():
    with pytest.raises(ConfigurationError):
        D.kfold_split(3, 5)
    with pytest.raises(ConfigurationError):
        D.kfold_split(10, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.integers(2, 10), st.integers(1, 3), st.integers(0, 10_000))
def test_kfold_partition_property(m, k, repeats, seed):
    if m < k:
        return
    plan = D.kfold_split(m, k, repeats, seed)
    for folds in plan.assignments:
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        allidx = np.concatenate(folds)
        assert np.array_equal(np.sort(allidx), np.arange(m))
    for _, _, tr, te in plan.splits():
        assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == m


# ---------------------------------------------------------------- IDX

def idx_images(images):
    m, r, c = images.shape
    return struct.pack(">4I", 0x803, m, r, c) + images.astype(np.uint8).tobytes()


def test_idx_two_images(tmp_path):
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    imgs[1, 3, 4] = 255
    p = tmp_path / "i.idx"
    p.write_bytes(idx_images(imgs))
    out = D.load_idx_images(p)
    assert out.shape == (2, 28, 28)
    assert out[1, 3, 4] == 1.0 and out.max() == 1.0


def test_idx_gzip_and_labels(tmp_path):
    p = tmp_path / "l.idx.gz"
    with gzip.open(p, "wb") as fh:
        fh.write(struct.pack(">2I", 0x801, 3) + bytes([7, 0, 9]))
    np.testing.assert_array_equal(D.load_idx_labels(p), [7, 0, 9])


def test_idx_wrong_magic(tmp_path):
    p = tmp_path / "i.idx"
    p.write_bytes(struct.pack(">2I", 0x801, 1) + b"\x00")
    with pytest.raises(ParseError, match="magic"):
        D.load_idx_images(p)


def test_idx_truncated(tmp_path):
    p = tmp_path / "i.idx"
    p.write_bytes(idx_images(np.zeros((2, 28, 28)))[:-5])
    with pytest.raises(ParseError, match="truncated"):
        D.load_idx_images(p)


def test_idx_writers_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 28, 28))
    D.write_idx_images(imgs, tmp_path / "i")
    D.write_idx_labels([1, 2, 3], tmp_path / "l")
    np.testing.assert_array_equal(D.load_idx_images(tmp_path / "i") * 255, imgs)
    np.testing.assert_array_equal(D.load_idx_labels(tmp_path / "l"), [1, 2, 3])


# ---------------------------------------------------------------- PCA

def test_pca_axis_aligned_variance():
    x = np.zeros((6, 2))
    x[:, 0] = np.arange(6.0)
    _, basis = D.pca_project(x, 2)
    np.testing.assert_allclose(basis.components[:, 0], [1.0, 0.0], atol=1e-12)
    assert abs(basis.eigenvalues[1]) < 1e-12


def test_pca_matches_lapack_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 9)) @ rng.standard_normal((9, 9))
    _, basis = D.pca_project(x, 9)
    xc = x - x.mean(axis=0)
    ref_vals, ref_vecs = np.linalg.eigh(xc.T @ xc / 40)
    np.testing.assert_allclose(basis.eigenvalues, ref_vals[::-1], rtol=1e-10, atol=1e-12)
    # same subspaces: |<u_i, v_i>| == 1
    overlap = np.abs(np.sum(basis.components * ref_vecs[:, ::-1], axis=0))
    np.testing.assert_allclose(overlap, 1.0, atol=1e-8)


def test_pca_full_rank_projection_is_isometry():
    x = np.random.default_rng(4).standard_normal((10, 5))
    z, _ = D.pca_project(x, 5)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dz = np.linalg.norm(z[:, None] - z[None], axis=-1)
    np.testing.assert_allclose(dz, dx, atol=1e-8)


def test_pca_reconstruction_error_non_increasing():
    x = np.random.default_rng(5).standard_normal((30, 8))
    errs = []
    for k in range(1, 9):
        z, basis = D.pca_project(x, k)
        errs.append(np.sum((basis.inverse_transform(z) - x) ** 2))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-20


def test_pca_sign_convention_and_orthonormality():
    x = np.random.default_rng(6).standard_normal((25, 7))
    _, basis = D.pca_project(x, 4)
    c = basis.components
    np.testing.assert_allclose(c.T @ c, np.eye(4), atol=1e-8)
    for j in range(4):
        assert c[np.argmax(np.abs(c[:, j])), j] > 0


def test_pca_rejects_too_many_components():
    with pytest.raises(ConfigurationError):
        D.pca_project(np.ones((4, 3)), 4)


@pytest.mark.parametrize("d", [1, 2, 5, 12])
def test_jacobi_numba_matches_numpy(d):
    a = np.random.default_rng(d).standard_normal((d, d))
    a = a + a.T
    w1, v1 = kernels.jacobi_eigh_numba(a.copy())
    w2, v2 = kernels.jacobi_eigh_numpy(a.copy())
    np.testing.assert_allclose(np.sort(w1), np.sort(w2), atol=1e-10)
    np.testing.assert_allclose(v1 @ np.diag(w1) @ v1.T, a, atol=1e-10)
    np.testing.assert_allclose(v2 @ np.diag(w2) @ v2.T, a, atol=1e-10)


# ---------------------------------------------------------------- synthetic labels

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 9), st.integers(2, 80), st.floats(0.25, 5.0))
def test_gaussian_labels_are_distributions(k, c, sigma):
    row = D.gaussian_label_distribution(k, c, sigma)
    assert row.shape == (c,)
    assert abs(row.sum() - 1.0) < 1e-9 and (row > 0).all()


def test_gaussian_labels_mirror_symmetry():
    np.testing.assert_allclose(D.gaussian_label_distribution(0, 56)[::-1],
                               D.gaussian_label_distribution(9, 56), atol=1e-15)


def test_gaussian_label_argmax_nearest_grid_point():
    row = D.gaussian_label_distribution(5, 56, 0.5)
    grid = 9.0 * np.arange(56) / 55
    assert np.argmax(row) == np.argmin(np.abs(grid - 5.0)) == 31


def test_gaussian_labels_flatten_for_large_sigma():
    np.testing.assert_allclose(D.gaussian_label_distribution(3, 56, 1e4), 1 / 56, rtol=1e-6)


def test_build_synthetic_shapes():
    rng = np.random.default_rng(0)
    imgs, classes = rng.uniform(0, 1, (100, 28, 28)), rng.integers(0, 10, 100)
    ds = D.build_synthetic(imgs, classes)
    assert (ds.m, ds.n, ds.c) == (100, 28, 56)
    np.testing.assert_allclose(ds.labels.sum(axis=1), 1.0, atol=1e-9)


def test_build_synthetic_misaligned():
    with pytest.raises(DimensionError):
        D.build_synthetic(np.zeros((3, 28, 28)), [1, 2])


# ---------------------------------------------------------------- noise

def test_noise_zero_sigma_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(D.inject_feature_noise(x, 0.0, 1), x)


def test_noise_is_seeded():
    x = np.zeros((4, 4))
    np.testing.assert_array_equal(D.inject_feature_noise(x, 0.5, 3), D.inject_feature_noise(x, 0.5, 3))


def test_noise_statistics():
    eps = D.inject_feature_noise(np.zeros((100, 100)), 1.0, 1024)
    assert abs(eps.mean()) < 0.05 and abs(eps.std() - 1.0) < 0.05


def test_noise_negative_sigma():
    with pytest.raises(ConfigurationError):
        D.inject_feature_noise(np.zeros(2), -0.1, 0)
