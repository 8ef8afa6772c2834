"""Spatial models: rank-1 demixing matrices and full-rank spatial covariances.

``x`` is the mixture ``(I, J, M)``, ``D`` stacks demixing matrices as
``(I, N, M)`` (row ``n`` of ``D[i]`` is ``d_in^H``), ``G`` stacks spatial
covariances as ``(N, I, M, M)`` and ``lam`` is ``(N, I, J)``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, SingularMatrix
from .linalg import geometric_mean, hermitian_inverse, hermitize, psd_project, solve_riccati

RIDGE = 1e-10


def ridge(A, scale=RIDGE):
    """``A + scale * tr(A)/M * I`` over the trailing two axes."""
    M = A.shape[-1]
    tr = np.real(np.trace(A, axis1=-2, axis2=-1))[..., None, None]
    return A + scale * np.abs(tr) / M * np.eye(M)


def demix(D, x):
    """``y[i, j, n] = sum_m D[i, n, m] x[i, j, m]``."""
    return np.einsum("inm,ijm->ijn", D, x)


def demixed_power(D, x):
    """``|y|^2`` arranged as ``(N, I, J)``."""
    return np.transpose(np.abs(demix(D, x)) ** 2, (2, 0, 1))


def mixture_covariance_estimate(x, lam):
    """Weighted covariance ``G[n, i] = (1/J) sum_j x x^H / lam[n, i, j]``."""
    J = x.shape[1]
    weighted = x[None] / lam[..., None]
    G = np.einsum("nija,ijb->niab", weighted, np.conj(x), optimize=True) / J
    return hermitize(G)


def ip_update_demixing(D, G, n):
    """Iterative-projection update of row ``n`` of every ``D[i]``.

    ``d = (D G_n)^{-1} e_n`` followed by ``d <- d / sqrt(d^H G_n d)``.
    ``G`` is ``(N, I, M, M)`` or, for a single source, ``(I, M, M)``.
    Returns a new array.
    """
    D = np.array(D, dtype=complex)
    I, N, M = D.shape
    if N != M:
        raise DimensionMismatch(f"demixing requires N == M, got N={N}, M={M}")
    Gn = G[n] if G.ndim == 4 else G
    A = ridge(D @ Gn)
    e = np.zeros((I, M, 1), dtype=complex)
    e[:, n, 0] = 1.0
    try:
        d = np.linalg.solve(A, e)[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("D G is singular") from exc
    q = np.real(np.einsum("ia,iab,ib->i", np.conj(d), Gn, d))
    if np.any(q <= 0) or not np.all(np.isfinite(q)):
        raise SingularMatrix("non-positive quadratic form in IP update")
    d = d / np.sqrt(q)[:, None]
    D[:, n, :] = np.conj(d)
    return D


def model_covariance(lam, G):
    """``Xh[i, j] = sum_n lam[n, i, j] G[n, i]``."""
    return hermitize(np.einsum("nij,niab->ijab", lam, G, optimize=True))


def inverse_model_covariance(X_hat):
    return hermitian_inverse(ridge(X_hat))


def _g_statistics(x, X_hat_inv, lam):
    z = np.einsum("ijab,ijb->ija", X_hat_inv, x)
    A = np.einsum("nij,ija,ijb->niab", lam, z, np.conj(z), optimize=True)
    B = np.einsum("nij,ijab->niab", lam, X_hat_inv, optimize=True)
    return hermitize(A), hermitize(B)


def update_G_m_mnmf(G_prev, x, X_hat_inv, lam):
    """Spatial covariance step ``G <- B^{-1} # (Gh A Gh)``.

    ``A = sum_j lam X_hat^-1 X X_hat^-1`` and ``B = sum_j lam X_hat^-1``;
    the result solves ``G B G = Gh A Gh`` and is returned PSD-projected.
    """
    A, B = _g_statistics(x, X_hat_inv, lam)
    rhs = ridge(hermitize(G_prev @ A @ G_prev))
    B_inv = hermitian_inverse(ridge(B))
    return psd_project(geometric_mean(B_inv, rhs))


def update_G_baseline_mnmf(G_prev, x, X_hat_inv, lam):
    """Same fixed point as :func:`update_G_m_mnmf` reached through the Riccati solver."""
    A, B = _g_statistics(x, X_hat_inv, lam)
    rhs = ridge(hermitize(G_prev @ A @ G_prev))
    return solve_riccati(ridge(B), rhs, G_prev)


def init_spatial_covariance(N, I, M, rng, perturbation=1e-2):
    """Identity plus a small seeded Hermitian perturbation, PSD-projected."""
    P = rng.standard_normal((N, I, M, M)) + 1j * rng.standard_normal((N, I, M, M))
    G = np.eye(M) + perturbation * hermitize(P)
    return psd_project(G)


def projection_back(y, D, ref=0):
    """Rescale demixed sources ``y`` ``(I, J, N)`` to their image at channel ``ref``."""
    try:
        Dinv = np.linalg.inv(D)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("demixing matrix is singular") from exc
    return y * Dinv[:, ref, :][:, None, :]


def multichannel_wiener_filter(x, lam, G, ref=None):
    """Source images ``lam_n G_n Xh^-1 x``.

    Returns ``(N, I, J, M)`` images, or ``(I, J, N)`` estimates at channel
    ``ref`` if it is given.
    """
    X_hat_inv = inverse_model_covariance(model_covariance(lam, G))
    z = np.einsum("ijab,ijb->ija", X_hat_inv, x)
    if ref is None:
        return np.einsum("nij,niab,ijb->nija", lam, G, z, optimize=True)
    return np.einsum("nij,nib,ijb->ijn", lam, G[:, :, ref, :], z, optimize=True)
