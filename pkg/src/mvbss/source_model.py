"""Low-rank NMF source model with the minimum-volume (log-det) prior.

Array conventions: ``W`` is ``(N, I, K)``, ``H`` is ``(N, K, J)`` and power
spectrograms ``lam`` are ``(N, I, J)``.

All four NMF-based separators share the same majorization of the
Itakura-Saito data term. It is expressed through two nonnegative
statistics of shape ``(N, I, J)``:

``num``
    data-weighted term, ``|y|^2 / lam^2`` for the rank-1 spatial model and
    ``tr(Xh^-1 X Xh^-1 G)`` for the full-rank one;
``den``
    model term, ``1 / lam`` and ``tr(Xh^-1 G)`` respectively.

The multiplicative updates then read ``H *= sqrt(W^T num / W^T den)`` and
``W *= sqrt(num H^T / den H^T)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDenominator, NumericalBreakdown, RankDeficientData
from .linalg import hermitian_inverse, logdet_hermitian, positive_cubic_root

EPS = 1e-12
GAMMA_MIN = 1e-6
GAMMA_MAX = 1e3


@dataclass
class SourceModel:
    W: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        if self.W.ndim != 3 or self.H.ndim != 3:
            raise ValueError("W must be (N, I, K) and H (N, K, J)")
        if self.W.shape[0] != self.H.shape[0] or self.W.shape[2] != self.H.shape[1]:
            raise ValueError(f"inconsistent shapes W{self.W.shape} H{self.H.shape}")

    @property
    def n_sources(self):
        return self.W.shape[0]

    @property
    def n_bases(self):
        return self.W.shape[2]

    def copy(self):
        return SourceModel(self.W.copy(), self.H.copy())

    def check_finite(self):
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.H))):
            raise NumericalBreakdown("source model contains NaN/Inf")


@dataclass
class MinVolConfig:
    eta: float = 0.5
    gamma_init: float = 0.05

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.gamma_init < 0:
            raise ValueError("gamma_init must be nonnegative")


def _floor(x):
    return np.maximum(x, EPS)


def power_spectrogram(model):
    """``lam[n, i, j] = sum_k W[n, i, k] H[n, k, j]``, floored at ``EPS``."""
    return _floor(model.W @ model.H)


def _gram(W, eta):
    K = W.shape[-1]
    return np.swapaxes(W, -1, -2) @ W + eta * np.eye(K)


def minvol_penalty(W, eta):
    """``log|W^T W + eta I|`` for one basis ``(I, K)`` or a stack ``(N, I, K)``."""
    return logdet_hermitian(_gram(np.asarray(W, dtype=float), eta))


def compute_V(W, eta):
    """Tangent point of the log-det bound, ``(W^T W + eta I)^{-1}``."""
    return np.real(hermitian_inverse(_gram(np.asarray(W, dtype=float), eta)))


def split_pos_neg(V):
    V = np.asarray(V)
    return np.maximum(V, 0.0), np.maximum(-V, 0.0)


def omega_diagonal(w, V_plus, V_minus):
    """Diagonal of ``Omega(w) = Diag(2 (V+ + V-) w / w)`` for row vector(s) ``w``.

    ``w`` may be a single row ``(K,)`` or rows ``(..., I, K)`` paired with
    ``V`` of shape ``(..., K, K)``.
    """
    w = _floor(np.asarray(w, dtype=float))
    S = V_plus + V_minus
    return 2.0 * (w @ np.swapaxes(S, -1, -2)) / w


def _mu_ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(num / den)
    if np.any(np.isnan(r)):
        raise NumericalBreakdown("NaN in multiplicative update ratio")
    return r


def mu_update_H(model, num, den):
    """Multiplicative H step from the shared statistics; returns a new H."""
    Wt = np.swapaxes(model.W, -1, -2)
    return _floor(model.H * _mu_ratio(Wt @ num, Wt @ den))


def mu_update_W(model, num, den):
    """Multiplicative W step from the shared statistics; returns a new W."""
    Ht = np.swapaxes(model.H, -1, -2)
    return _floor(model.W * _mu_ratio(num @ Ht, den @ Ht))


def minvol_cubic_coefficients(model, num, den, gamma, eta):
    """Coefficients ``(a, b, d)`` of ``a w^3 + b w^2 + d = 0`` for every ``w[n, i, k]``.

    Every element is expanded around the frozen current basis ``W_hat``:
    the data term through the IS-divergence auxiliary function, the
    log-det through its tangent plane at ``V = (W_hat^T W_hat + eta I)^-1``
    and the non-separable quadratic ``w V w^T`` through the diagonal
    majorizer built from ``V+`` and ``V-``. Each element's surrogate is
    strictly convex in ``w > 0`` and its unique stationary point is the only
    positive root of the cubic.
    """
    W_hat = _floor(model.W)
    Ht = np.swapaxes(model.H, -1, -2)
    c = den @ Ht
    d = W_hat**2 * (num @ Ht)
    if gamma == 0:
        return np.zeros_like(c), c, -d
    V = compute_V(W_hat, eta)
    Vp, Vm = split_pos_neg(V)
    half_omega = 0.5 * omega_diagonal(W_hat, Vp, Vm)
    a = 2.0 * gamma * half_omega
    b = c + 2.0 * gamma * (W_hat @ V) - a * W_hat
    return a, b, -d


def minvol_update_W(model, num, den, gamma, eta):
    """Cubic-root W step of the min-volume regularized model; returns a new W.

    With ``gamma == 0`` the cubic reduces to ``c w^2 = d`` whose root is the
    multiplicative update, evaluated in that closed form so the unregularized
    trajectory matches the baseline to the last bit.
    """
    if gamma == 0:
        return mu_update_W(model, num, den)
    a, b, d = minvol_cubic_coefficients(model, num, den, gamma, eta)
    if np.any(np.isnan(a)) or np.any(np.isnan(b)) or np.any(np.isnan(d)):
        raise NumericalBreakdown("NaN in cubic coefficients")
    w = positive_cubic_root(a, b, d)
    # a root always exists when d < 0; the floor covers the d == 0 corner
    w = np.where(np.isfinite(w), w, EPS)
    return _floor(w)


# ---------------------------------------------------------------------------
# statistics for the two spatial models


def ilrma_statistics(lam, demixed_power):
    """``(num, den)`` for the rank-1 model from ``|y|^2`` of shape ``(N, I, J)``."""
    return demixed_power / lam**2, 1.0 / lam


def mnmf_statistics(x, X_hat_inv, G):
    """``(num, den)`` for the full-rank model.

    ``x`` is ``(I, J, M)``, ``X_hat_inv`` is ``(I, J, M, M)`` and ``G`` is
    ``(N, I, M, M)``.
    """
    I, J, M = x.shape
    z = np.einsum("ijab,ijb->ija", X_hat_inv, x)
    # z^H G z = tr(G z z^H) and tr(Xh^-1 G) as inner products over (a, b)
    zz = (z[..., :, None] * np.conj(z[..., None, :])).reshape(I, J, M * M)
    Gt = np.swapaxes(G, -1, -2).reshape(G.shape[0], I, M * M, 1)
    num = np.real(zz[None] @ Gt)[..., 0]
    den = np.real(X_hat_inv.reshape(I, J, M * M)[None] @ Gt)[..., 0]
    return np.maximum(num, 0.0), _floor(den)


# ---------------------------------------------------------------------------
# per-method update operations


def update_H_baseline_mnmf(model, G, x, X_hat_inv):
    return mu_update_H(model, *mnmf_statistics(x, X_hat_inv, G))


def update_W_baseline_mnmf(model, G, x, X_hat_inv):
    return mu_update_W(model, *mnmf_statistics(x, X_hat_inv, G))


def update_H_m_mnmf(model, G, x, X_hat_inv):
    """H step of the regularized full-rank model.

    The prior does not involve H, so the rule coincides with the baseline.
    """
    return update_H_baseline_mnmf(model, G, x, X_hat_inv)


def update_W_m_mnmf(model, G, x, X_hat_inv, gamma, eta):
    return minvol_update_W(model, *mnmf_statistics(x, X_hat_inv, G), gamma, eta)


def update_H_baseline_ilrma(model, demixed_power):
    lam = power_spectrogram(model)
    return mu_update_H(model, *ilrma_statistics(lam, demixed_power))


def update_W_baseline_ilrma(model, demixed_power):
    lam = power_spectrogram(model)
    return mu_update_W(model, *ilrma_statistics(lam, demixed_power))


def update_H_m_ilrma(model, demixed_power):
    """``h <- h * sqrt(a_h / b_h)`` with ``a_h = sum_i w |s|^2 lam^-2``, ``b_h = sum_i w / lam``."""
    lam = power_spectrogram(model)
    Wt = np.swapaxes(model.W, -1, -2)
    a_h = Wt @ (demixed_power / lam**2)
    b_h = Wt @ (1.0 / lam)
    return _floor(model.H * _mu_ratio(a_h, b_h))


def update_W_m_ilrma(model, demixed_power, gamma, eta):
    lam = power_spectrogram(model)
    return minvol_update_W(model, *ilrma_statistics(lam, demixed_power), gamma, eta)


def update_gamma(gamma_prev, nll, W, eta):
    """Rebalance the prior weight against the data term.

    ``gamma <- gamma_prev * nll / sum_n log|W_n^T W_n + eta I|`` where ``nll``
    is ``sum_ij tr(X_ij Xh_ij^-1) + log|Xh_ij|``. The result is clamped to
    ``[1e-6, 1e3]``. A denominator below ``1e-12`` in magnitude keeps
    ``gamma_prev`` and emits a ``RuntimeWarning``; a non-finite ratio raises
    :class:`DegenerateDenominator`.
    """
    denom = float(np.sum(minvol_penalty(W, eta)))
    if abs(denom) < 1e-12:
        warnings.warn(
            f"gamma update skipped, log-det denominator {denom:.3g} ~ 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return gamma_prev
    gamma = gamma_prev * float(nll) / denom
    if not np.isfinite(gamma):
        raise DegenerateDenominator("gamma update produced a non-finite value")
    return float(np.clip(gamma, GAMMA_MIN, GAMMA_MAX))


# ---------------------------------------------------------------------------
# initialization


def _simplex_ls(X, W, n_iter=200):
    """Columns of ``H >= 0`` with ``sum(H[:, j]) <= 1`` minimizing ``||X - W H||``.

    Fast projected gradient with Nesterov momentum.
    """
    K = W.shape[1]
    WtW = W.T @ W
    WtX = W.T @ X
    L = max(np.linalg.eigvalsh(WtW)[-1], 1e-300)
    H = np.full((K, X.shape[1]), 1.0 / K)
    Y = H.copy()
    t = 1.0
    for _ in range(n_iter):
        H_new = _project_capped_simplex(Y - (WtW @ Y - WtX) / L)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = H_new + ((t - 1.0) / t_new) * (H_new - H)
        H, t = H_new, t_new
    return H


def _project_capped_simplex(Y):
    """Euclidean projection of each column onto ``{h >= 0, sum h <= 1}``."""
    P = np.maximum(Y, 0.0)
    over = P.sum(axis=0) > 1.0
    if np.any(over):
        Z = Y[:, over]
        U = -np.sort(-Z, axis=0)
        css = np.cumsum(U, axis=0) - 1.0
        idx = np.arange(1, Z.shape[0] + 1)[:, None]
        cond = U - css / idx > 0
        rho = Z.shape[0] - 1 - np.argmax(cond[::-1], axis=0)
        theta = css[rho, np.arange(Z.shape[1])] / (rho + 1)
        P[:, over] = np.maximum(Z - theta, 0.0)
    return P


def snpa_initialize(X_power, K):
    """Successive nonnegative projection: pick ``K`` extreme columns of ``X_power``.

    Returns the selected columns ``(I, K)`` in selection order and their
    indices. Deterministic for a given input.
    """
    X = np.asarray(X_power, dtype=float)
    if X.ndim != 2 or np.any(X < 0):
        raise ValueError("X_power must be a nonnegative matrix")
    I, J = X.shape
    if K > min(I, J):
        raise RankDeficientData(f"K={K} exceeds min(I, J)={min(I, J)}")
    norms = np.sum(X**2, axis=0)
    if np.count_nonzero(norms) < K:
        raise RankDeficientData("fewer than K nonzero columns")
    tol = 1e-12 * norms.max()
    R = X.copy()
    chosen = []
    for _ in range(K):
        res = np.sum(R**2, axis=0)
        res[chosen] = -1.0
        j = int(np.argmax(res))
        if res[j] <= tol:
            raise RankDeficientData("data has fewer than K distinct extreme columns")
        chosen.append(j)
        Wsel = X[:, chosen]
        R = X - Wsel @ _simplex_ls(X, Wsel)
    return X[:, chosen].copy(), chosen


def init_source_model(power, n_sources, n_bases, rng, method="random"):
    """Initial ``W`` and ``H`` for all sources.

    ``method="random"`` draws both factors uniformly. ``method="snpa"``
    takes ``n_sources * n_bases`` columns of ``power`` (``(I, J)``) selected
    by :func:`snpa_initialize` and deals them to the sources round-robin.
    In both cases ``H`` is uniform random, rescaled so that the model's
    mean power matches the data.
    """
    I, J = power.shape
    level = max(float(power.mean()), EPS)
    if method == "random":
        W = rng.uniform(size=(n_sources, I, n_bases)) + 1e-2
    elif method == "snpa":
        total = n_sources * n_bases
        try:
            cols, _ = snpa_initialize(power, min(total, I, J))
        except RankDeficientData:
            cols = np.empty((I, 0))
        missing = total - cols.shape[1]
        if missing > 0:
            cols = np.concatenate([cols, rng.uniform(0.5, 1.5, size=(I, missing)) * level], axis=1)
        W = np.stack([cols[:, n::n_sources][:, :n_bases] for n in range(n_sources)])
        W = W + 1e-3 * level
    else:
        raise ValueError(f"unknown init method {method!r}")
    H = rng.uniform(size=(n_sources, n_bases, J)) + 1e-2
    model = SourceModel(W, H)
    model.H *= level / (n_sources * power_spectrogram(model).mean())
    return model
