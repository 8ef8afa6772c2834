import numpy as np
import pytest

from mvbss import spatial as sp
from mvbss.errors import DimensionMismatch
from mvbss.linalg import sqrtm_psd


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_pd_stack(rng, shape, M):
    Z = crandn(rng, *shape, M, M)
    return Z @ np.conj(np.swapaxes(Z, -1, -2)) + 0.1 * np.eye(M)


# mixture covariance


def test_covariance_unit_vector():
    x = np.zeros((1, 4, 2), dtype=complex)
    x[..., 0] = 1.0
    G = sp.mixture_covariance_estimate(x, np.ones((1, 1, 4)))
    assert np.allclose(G[0, 0], np.diag([1.0, 0.0]))


def test_covariance_scaling():
    rng = np.random.default_rng(0)
    x = crandn(rng, 3, 10, 2)
    lam = rng.uniform(0.5, 2, (2, 3, 10))
    assert np.allclose(sp.mixture_covariance_estimate(x, 4.0 * lam), sp.mixture_covariance_estimate(x, lam) / 4.0)


def test_covariance_naive():
    rng = np.random.default_rng(1)
    x = crandn(rng, 3, 6, 2)
    lam = rng.uniform(0.5, 2, (2, 3, 6))
    G = sp.mixture_covariance_estimate(x, lam)
    for n in range(2):
        for i in range(3):
            ref = sum(np.outer(x[i, j], np.conj(x[i, j])) / lam[n, i, j] for j in range(6)) / 6
            assert np.abs(G[n, i] - ref).max() < 1e-12


# IP update


def test_ip_scalar():
    D = np.ones((1, 1, 1), dtype=complex)
    G = np.full((1, 1, 1, 1), 4.0)
    assert np.allclose(sp.ip_update_demixing(D, G, 0), 0.5)


def test_ip_identity():
    D = np.eye(2)[None].astype(complex)
    G = np.eye(2)[None, None].repeat(2, axis=0)
    D1 = sp.ip_update_demixing(D, G, 1)
    assert np.allclose(D1[0], np.eye(2))


def auxiva_surrogate(D, G):
    """-2 log|det D| + sum_n d_n^H G_n d_n per bin."""
    N = D.shape[1]
    q = sum(np.real(np.einsum("ia,iab,ib->i", D[:, n], G[n], np.conj(D[:, n]))) for n in range(N))
    return -2 * np.log(np.abs(np.linalg.det(D))) + q


@pytest.mark.parametrize("seed", range(5))
def test_ip_normalization_and_descent(seed):
    rng = np.random.default_rng(seed)
    I, M = 4, 2
    D = crandn(rng, I, M, M)
    G = random_pd_stack(rng, (M, I), M)
    for n in range(M):
        before = auxiva_surrogate(D, G)
        D = sp.ip_update_demixing(D, G, n)
        after = auxiva_surrogate(D, G)
        d = np.conj(D[:, n])  # row n stores d^H
        q = np.real(np.einsum("ia,iab,ib->i", np.conj(d), G[n], d))
        assert np.all(np.abs(q - 1.0) < 1e-10)
        assert np.all(after <= before + 1e-9)


def test_ip_requires_determined():
    with pytest.raises(DimensionMismatch):
        sp.ip_update_demixing(np.ones((2, 2, 3)), np.ones((2, 2, 3, 3)), 0)


# G updates


def test_G_m_mnmf_fixed_point():
    rng = np.random.default_rng(10)
    M, lam0 = 2, 1.7
    G0 = random_pd_stack(rng, (1, 1), M)
    root = sqrtm_psd(G0[0, 0])
    x = np.stack([np.sqrt(2 * lam0) * root[:, j] for j in range(M)])[None]  # (1, J=M, M)
    lam = np.full((1, 1, M), lam0)
    Xh = sp.model_covariance(lam, G0)
    G1 = sp.update_G_m_mnmf(G0, x, np.linalg.inv(Xh), lam)
    assert np.abs(G1 - G0).max() < 1e-8 * np.abs(G0).max()


def test_G_scalar_case():
    rng = np.random.default_rng(11)
    x = crandn(rng, 1, 7, 1)
    lam = rng.uniform(0.5, 2.0, (1, 1, 7))
    g0 = 1.3
    G0 = np.full((1, 1, 1, 1), g0)
    Xh = lam[0, 0] * g0
    A = np.sum(lam[0, 0] * np.abs(x[0, :, 0]) ** 2 / Xh**2)
    B = np.sum(lam[0, 0] / Xh)
    ref = g0 * np.sqrt(A / B)
    Xi = (1.0 / Xh)[None, :, None, None]
    assert abs(sp.update_G_m_mnmf(G0, x, Xi, lam).item() - ref) < 1e-9 * ref
    assert abs(sp.update_G_baseline_mnmf(G0, x, Xi, lam).item() - ref) < 1e-9 * ref


@pytest.mark.parametrize("seed", range(3))
def test_G_stationarity_residual(seed):
    rng = np.random.default_rng(20 + seed)
    N, I, J, M = 2, 3, 8, 2
    x = crandn(rng, I, J, M)
    lam = rng.uniform(0.5, 2.0, (N, I, J))
    G0 = random_pd_stack(rng, (N, I), M)
    Xi = np.linalg.inv(sp.model_covariance(lam, G0))
    A, B = sp._g_statistics(x, Xi, lam)
    target = G0 @ A @ G0
    for update in (sp.update_G_m_mnmf, sp.update_G_baseline_mnmf):
        G1 = update(G0, x, Xi, lam)
        before = np.linalg.norm(G0 @ B @ G0 - target)
        after = np.linalg.norm(G1 @ B @ G1 - target)
        assert after < 1e-6 * np.linalg.norm(target)
        assert after <= before
        assert np.allclose(G1, np.conj(np.swapaxes(G1, -1, -2)))
        assert np.linalg.eigvalsh(G1).min() >= 0


def test_G_baseline_identity():
    x = np.zeros((1, 2, 2), dtype=complex)
    x[0, 0, 0] = x[0, 1, 1] = np.sqrt(2.0)
    lam = np.ones((1, 1, 2))
    G0 = np.eye(2)[None, None]
    G1 = sp.update_G_baseline_mnmf(G0, x, np.linalg.inv(sp.model_covariance(lam, G0)), lam)
    assert np.allclose(G1[0, 0], np.eye(2), atol=1e-8)


def test_init_spatial_covariance():
    G = sp.init_spatial_covariance(2, 5, 3, np.random.default_rng(0))
    assert G.shape == (2, 5, 3, 3)
    assert np.allclose(G, np.conj(np.swapaxes(G, -1, -2)))
    assert np.linalg.eigvalsh(G).min() > 0
    assert np.abs(G - np.eye(3)).max() < 0.1


# demixing and reconstruction


def test_demix_identity():
    x = crandn(np.random.default_rng(30), 4, 5, 2)
    assert np.allclose(sp.demix(np.broadcast_to(np.eye(2), (4, 2, 2)), x), x)


def test_demix_inverse_mixing():
    rng = np.random.default_rng(31)
    s = crandn(rng, 4, 20, 2)
    A = crandn(rng, 4, 2, 2)
    x = np.einsum("imn,ijn->ijm", A, s)
    assert np.allclose(sp.demix(np.linalg.inv(A), x), s, atol=1e-10)


def test_demix_linear_and_naive():
    rng = np.random.default_rng(32)
    D = crandn(rng, 3, 2, 2)
    x1, x2 = crandn(rng, 3, 4, 2), crandn(rng, 3, 4, 2)
    a, b = 0.3 - 1j, 2.0
    lhs = sp.demix(D, a * x1 + b * x2)
    assert np.abs(lhs - (a * sp.demix(D, x1) + b * sp.demix(D, x2))).max() < 1e-12
    y = sp.demix(D, x1)
    for i in range(3):
        for j in range(4):
            assert np.allclose(y[i, j], D[i] @ x1[i, j], atol=1e-14)


def test_projection_back_sums_to_reference():
    rng = np.random.default_rng(33)
    x = crandn(rng, 5, 9, 2)
    D = crandn(rng, 5, 2, 2)
    y = sp.demix(D, x)
    for ref in (0, 1):
        z = sp.projection_back(y, D, ref)
        assert np.allclose(z.sum(axis=-1), x[..., ref], atol=1e-10)


def test_wiener_images_sum_to_mixture():
    rng = np.random.default_rng(34)
    N, I, J, M = 3, 4, 6, 2
    x = crandn(rng, I, J, M)
    lam = rng.uniform(0.5, 2.0, (N, I, J))
    G = random_pd_stack(rng, (N, I), M)
    images = sp.multichannel_wiener_filter(x, lam, G)
    assert np.abs(images.sum(axis=0) - x).max() < 1e-8 * np.abs(x).max()
    est = sp.multichannel_wiener_filter(x, lam, G, ref=1)
    assert np.allclose(est, np.transpose(images[..., 1], (1, 2, 0)))
