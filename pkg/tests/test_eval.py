import json
import math

import numpy as np
import pytest
import scipy.linalg
import scipy.stats
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from soda.eval import (
    EvalReport,
    ProbeConfig,
    chance_accuracy,
    dci,
    frechet,
    frechet_from_features,
    importance_matrix,
    interpolate,
    pca_directions,
    probe_eval,
    probe_fit,
    psnr,
    ssim,
    traverse,
)
from soda.eval.probe import smoothed_cross_entropy

# ------------------------------------------------------------------- PSNR


def test_psnr_closed_form():
    x = np.zeros((4, 4))
    y = np.full((4, 4), 0.1)  # MSE = 0.01
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-12)
    assert psnr(x, x) == 100.0
    assert psnr(x, np.full((4, 4), 0.5), max_val=2.0) == pytest.approx(10 * math.log10(4 / 0.25))


def test_psnr_batched_and_errors():
    x = np.zeros((2, 3, 3))
    y = np.stack([np.full((3, 3), 0.1), np.full((3, 3), 0.01)])
    assert psnr(x, y, batched=True) == pytest.approx((20.0 + 40.0) / 2)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_psnr_symmetric(x, y):
    assert psnr(x, y) == psnr(y, x)


# ------------------------------------------------------------------- SSIM


def ssim_bruteforce(x, y, w=7):
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - w + 1):
        for j in range(x.shape[1] - w + 1):
            a, b = x[i : i + w, j : j + w].ravel(), y[i : i + w, j : j + w].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
            cab = ((a - ma) * (b - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).random((16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a, b = 0.3, 0.7
    c1 = 0.01**2
    expect = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((9, 9), a), np.full((9, 9), b)) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(1)
    x = rng.random((12, 10, 2))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    expect = np.mean([ssim_bruteforce(x[..., c], y[..., c]) for c in range(2)])
    assert ssim(x, y) == pytest.approx(expect, abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(x, y):
    s = ssim(x, y)
    assert s == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


# ---------------------------------------------------------------- Fréchet


def test_frechet_analytic_cases():
    I = np.eye(2)
    assert frechet(np.zeros(2), I, np.array([1.0, 0.0]), I) == pytest.approx(1.0, abs=1e-6)
    assert frechet(np.zeros(2), 4 * I, np.zeros(2), I) == pytest.approx(2.0, abs=1e-6)
    assert frechet(np.ones(3), 2 * np.eye(3), np.ones(3), 2 * np.eye(3)) == pytest.approx(0.0, abs=1e-8)


def frechet_bruteforce(mu1, S1, mu2, S2):
    covmean = scipy.linalg.sqrtm(S1 @ S2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(S1 + S2 - 2 * covmean))


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_sqrtm(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, 5, 5))
    S1, S2 = A @ A.T + 0.1 * np.eye(5), B @ B.T + 0.1 * np.eye(5)
    mu1, mu2 = rng.standard_normal((2, 5))
    assert frechet(mu1, S1, mu2, S2) == pytest.approx(frechet_bruteforce(mu1, S1, mu2, S2), rel=1e-6)


@given(st.integers(0, 10**6))
def test_frechet_nonnegative_on_psd(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, 4, 2))  # rank-deficient covariances
    S1, S2 = A @ A.T, B @ B.T
    mu = rng.standard_normal(4)
    assert frechet(mu, S1, rng.standard_normal(4), S2) >= 0
    assert frechet(mu, S1, mu, S1) <= 1e-6


def test_frechet_from_features_and_errors():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4000, 3))
    assert frechet_from_features(f, f) <= 1e-8
    assert frechet_from_features(f, f + np.array([2.0, 0, 0])) == pytest.approx(4.0, abs=1e-6)
    with pytest.raises(ValueError):
        frechet(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))


# -------------------------------------------------------------------- DCI


def test_dci_identity_and_uniform():
    s = dci(np.eye(4))
    assert s.disentanglement == pytest.approx(100.0, abs=1e-9)
    assert s.completeness == pytest.approx(100.0, abs=1e-9)
    s = dci(np.ones((5, 3)))
    assert s.disentanglement == pytest.approx(0.0, abs=1e-9)
    assert s.completeness == pytest.approx(0.0, abs=1e-9)


def dci_bruteforce(R):
    R = np.asarray(R, float)
    D, K = R.shape
    rho = R.sum(1) / R.sum()
    dis = sum(rho[i] * (1 - scipy.stats.entropy(R[i], base=K)) for i in range(D) if R[i].sum() > 0)
    comp = np.mean([1 - scipy.stats.entropy(R[:, j], base=D) for j in range(K)])
    return 100 * dis, 100 * comp


def test_dci_hand_case():
    R = [[2.0, 0.0], [1.0, 1.0]]
    s = dci(R, informativeness=[0.5, 1.0])
    assert s.disentanglement == pytest.approx(50.0, abs=1e-9)
    h = -(2 / 3 * math.log(2 / 3) + 1 / 3 * math.log(1 / 3)) / math.log(2)
    assert s.completeness == pytest.approx(100 * ((1 - h) + 1) / 2, abs=1e-9)
    d, c = dci_bruteforce(R)
    assert (s.disentanglement, s.completeness) == (pytest.approx(d, abs=1e-9), pytest.approx(c, abs=1e-9))
    assert s.informativeness == pytest.approx(75.0)


@given(arrays(np.float64, (5, 3), elements=st.floats(0, 10)))
def test_dci_bounds_and_oracle(R):
    s = dci(R)
    assert 0 <= s.disentanglement <= 100 + 1e-9
    assert 0 <= s.completeness <= 100 + 1e-9
    if R.sum() > 0 and (R.sum(0) > 0).all():
        d, c = dci_bruteforce(R)
        assert s.disentanglement == pytest.approx(d, abs=1e-7)
        assert s.completeness == pytest.approx(c, abs=1e-7)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=6), st.lists(st.floats(0.1, 5), min_size=6, max_size=6))
def test_dci_full_iff_one_hot_rows(cols, mags):
    R = np.zeros((len(cols) + 1, 3))
    for i, (j, m) in enumerate(zip(cols, mags)):
        R[i, j] = m
    assert dci(R).disentanglement == pytest.approx(100.0, abs=1e-9)
    R[0, (cols[0] + 1) % 3] = 0.5
    assert dci(R).disentanglement < 100.0 - 1e-9


def test_dci_degenerate_inputs():
    s = dci(np.zeros((3, 2)))
    assert (s.disentanglement, s.completeness) == (0.0, 0.0) and s.flags
    s = dci(np.array([[1.0, 0.0], [2.0, 0.0]]))
    assert any("zero importance" in f for f in s.flags)
    with pytest.raises(ValueError):
        dci(np.array([[1.0, -0.1]]))


def factor_table(n=3000, seed=0, sizes=(3, 5, 4)):
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, k, size=n) for k in sizes], axis=1)


def test_importance_identity_mapping_is_diagonally_dominant():
    f = factor_table()
    imp = importance_matrix(f.astype(float), f)
    R = imp.R
    for j in range(3):
        assert R[j, j] > R[np.arange(3) != j, j].sum()
        assert R[j, j] > R[j, np.arange(3) != j].sum()
    s = dci(imp)
    assert s.disentanglement >= 99 and s.completeness >= 99


def test_importance_permutation():
    f = factor_table(seed=1)
    perm = [2, 0, 1]
    R = importance_matrix(f[:, perm].astype(float), f).R
    assert [int(np.argmax(R[:, j])) for j in range(3)] == [perm.index(j) for j in range(3)]


def test_noise_dim_gets_little_importance():
    f = factor_table(seed=2)
    z = np.concatenate([f.astype(float), np.random.default_rng(0).standard_normal((len(f), 1))], axis=1)
    R = importance_matrix(z, f).R
    for j in range(3):
        assert R[3, j] < 0.05 * R[j, j]


def test_importance_tree_gain_and_errors():
    f = factor_table(n=600, seed=3)
    R = importance_matrix(f.astype(float), f, method="tree_gain").R
    assert [int(np.argmax(R[:, j])) for j in range(3)] == [0, 1, 2]
    with pytest.raises(ValueError):
        importance_matrix(f.astype(float), f, method="forest")
    constant = np.concatenate([f, np.zeros((len(f), 1), int)], axis=1)
    imp = importance_matrix(np.concatenate([f, np.ones((len(f), 1))], axis=1).astype(float), constant)
    assert imp.unpredictable == [3] and not imp.R[3].any()


# ------------------------------------------------------------------ probe


def test_probe_one_hot_latents_are_perfect():
    y = np.random.default_rng(0).integers(0, 4, size=800)
    z = np.eye(4)[y]
    m = probe_fit(z, y, ProbeConfig(epochs=20))
    assert probe_eval(m, z, y)["accuracy"] == 1.0


def test_probe_on_noise_is_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        ztr, zte = rng.standard_normal((2, 3000, 16))
        ytr, yte = rng.permutation(np.arange(3000) % 3), rng.permutation(np.arange(3000) % 3)
        m = probe_fit(ztr, ytr, ProbeConfig(epochs=5, seed=seed))
        accs.append(probe_eval(m, zte, yte)["accuracy"])
    assert all(abs(a - 1 / 3) <= 0.03 for a in accs)


def test_label_smoothing_floor():
    eps = 0.1
    y = np.arange(400) % 2
    z = (2 * y - 1)[:, None].astype(float) + 0.01 * np.random.default_rng(0).standard_normal((400, 1))
    m = probe_fit(z, y, ProbeConfig(epochs=400, dropout=0.0, lr=5e-2, label_smoothing=eps))
    floor = -((1 - eps / 2) * math.log(1 - eps / 2) + eps / 2 * math.log(eps / 2))
    loss = smoothed_cross_entropy(m, z, y, eps)
    assert loss > floor
    assert loss - floor < 0.02


def test_probe_normalization_statistics():
    z = np.random.default_rng(0).normal(3.0, [1.0, 5.0, 0.1], size=(1000, 3))
    m = probe_fit(z, np.arange(1000) % 2, ProbeConfig(epochs=1))
    zn = m.normalize(z)
    assert np.abs(zn.mean(0)).max() <= 1e-6
    assert np.abs(zn.var(0) - 1).max() <= 1e-3


def test_probe_binary_f1_and_errors():
    y = np.arange(200) % 2
    z = np.eye(2)[y]
    out = probe_eval(probe_fit(z, y, ProbeConfig(epochs=10)), z, y)
    assert out["macro_f1"] == 1.0
    with pytest.raises(ValueError):
        probe_fit(z, np.zeros(200, int))


def test_chance_accuracy():
    assert chance_accuracy([0, 0, 1, 2]) == 0.5


def test_probe_is_deterministic():
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal((300, 5)), rng.integers(0, 3, 300)
    a = probe_fit(z, y, ProbeConfig(epochs=3))
    b = probe_fit(z, y, ProbeConfig(epochs=3))
    assert np.array_equal(a.weight, b.weight)


# ----------------------------------------------------------------- latent


def test_pca_degenerate_axis():
    x = np.zeros((50, 2))
    x[:, 0] = np.linspace(-1, 1, 50)
    dirs, lam = pca_directions(x, 2)
    np.testing.assert_allclose(dirs[0], [1.0, 0.0], atol=1e-12)
    assert lam[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_isotropic():
    x = np.random.default_rng(0).standard_normal((10**5, 4))
    _, lam = pca_directions(x, 4)
    assert lam.max() / lam.min() <= 1.03


def test_pca_basis_properties():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((500, 6)) @ rng.standard_normal((6, 6))
    dirs, lam = pca_directions(x, 6)
    np.testing.assert_allclose(dirs @ dirs.T, np.eye(6), atol=1e-8)
    assert np.all(np.diff(lam) <= 0)
    for row in dirs:
        assert row[np.argmax(np.abs(row))] > 0
    xc = x - x.mean(0)
    np.testing.assert_allclose(xc @ dirs.T @ dirs, xc, atol=1e-5)
    with pytest.raises(ValueError):
        pca_directions(x, 7)


def test_traverse_endpoints_and_midpoint():
    z = np.array([1.0, 2.0, 3.0])
    s = np.array([0.0, 1.0, 0.0])
    out = traverse(z, s, 4.0, 2)
    np.testing.assert_array_equal(out, [z - 2 * s, z + 2 * s])
    out = traverse(z, s, 4.0, 5)
    assert np.array_equal(out[2], z)
    np.testing.assert_allclose(np.diff(out[:, 1]), 1.0)
    with pytest.raises(ValueError):
        traverse(z, s, 1.0, 1)


def test_section_restricted_traversal():
    z = np.random.default_rng(0).standard_normal(10)
    sec = slice(3, 6)
    out = traverse(z, np.array([0.6, 0.0, 0.8]), 2.0, 7, section=sec)
    mask = np.ones(10, bool)
    mask[sec] = False
    assert all(np.array_equal(row[mask], z[mask]) for row in out)
    assert not np.array_equal(out[0, sec], z[sec])


def test_interpolate():
    z1, z2 = np.array([0.0, 1.0]), np.array([4.0, -3.0])
    out = interpolate(z1, z2, 9)
    assert np.array_equal(out[0], z1) and np.array_equal(out[-1], z2)
    np.testing.assert_allclose(out[4], (z1 + z2) / 2)
    assert np.linalg.norm(np.diff(out, axis=0), axis=1).sum() == pytest.approx(np.linalg.norm(z2 - z1))
    with pytest.raises(ValueError):
        interpolate(z1, z2, 1)


# ----------------------------------------------------------------- report


def test_report_serialization(tmp_path):
    r = EvalReport("abc123", 7, {"b": 0.1 + 0.2, "a": 1}, {"note": [1, 2]})
    payload = json.loads(r.to_json())
    assert payload["config_hash"] == "abc123" and payload["seed"] == 7
    assert payload["metrics"] == {"a": 1.0, "b": 0.3}
    lines = r.to_csv().splitlines()
    assert lines[0] == "name,value,config_hash,seed"
    assert lines[1] == "b,0.3,abc123,7"
    r.write(tmp_path, "probe")
    assert (tmp_path / "probe.json").read_text() == r.to_json()
    assert (tmp_path / "probe.csv").read_text() == r.to_csv()
