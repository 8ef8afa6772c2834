"""Hermitian positive (semi)definite matrix utilities.

Every function accepts a single matrix of shape ``(M, M)`` or a stack of
matrices of shape ``(..., M, M)`` and operates on the trailing two axes.
"""

import numpy as np

from .errors import NoPositiveRoot, SingularMatrix

SINGULAR_RTOL = 1e-14
PSD_RTOL = 1e-12


def hermitize(A):
    """Return the Hermitian part ``(A + A^H) / 2``."""
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def _eye_like(A):
    return np.broadcast_to(np.eye(A.shape[-1], dtype=A.dtype), A.shape)


def _check_square(A):
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < 1:
        raise ValueError(f"expected square matrices, got shape {A.shape}")


def _eigh_checked(A):
    """Eigendecomposition of Hermitian ``A`` raising on (near) singularity."""
    e, U = np.linalg.eigh(hermitize(A))
    mag = np.abs(e)
    largest = mag.max(axis=-1)
    if np.any(mag.min(axis=-1) < SINGULAR_RTOL * largest) or np.any(largest == 0):
        raise SingularMatrix("matrix is numerically singular")
    return e, U


def _from_eig(e, U):
    return (U * e[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


def hermitian_inverse(A, ridge=0.0):
    """Inverse of ``A + ridge * I`` for Hermitian ``A``.

    The inverse is assembled from an eigendecomposition so that the result
    is Hermitian to machine precision.

    Raises
    ------
    SingularMatrix
        If the smallest singular value of ``A + ridge * I`` is below
        ``1e-14`` times the largest.
    """
    A = np.asarray(A)
    _check_square(A)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if ridge:
        A = A + ridge * _eye_like(A)
    if A.shape[-1] == 2:
        return _inverse_2x2(A)
    e, U = _eigh_checked(A)
    return _from_eig(1.0 / e, U)


def _inverse_2x2(A):
    """Closed-form Hermitian 2x2 inverse with the same singularity test."""
    a = np.real(A[..., 0, 0])
    d = np.real(A[..., 1, 1])
    b = 0.5 * (A[..., 0, 1] + np.conj(A[..., 1, 0]))
    det = a * d - np.abs(b) ** 2
    m = 0.5 * (a + d)
    r = np.hypot(0.5 * (a - d), np.abs(b))
    big = m + np.copysign(r, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0, det / big, 0.0)
    if np.any(np.abs(small) < SINGULAR_RTOL * np.abs(big)) or np.any(big == 0):
        raise SingularMatrix("matrix is numerically singular")
    out = np.empty(A.shape, dtype=np.result_type(A.dtype, np.complex128))
    out[..., 0, 0] = d
    out[..., 1, 1] = a
    out[..., 0, 1] = -b
    out[..., 1, 0] = -np.conj(b)
    return out / det[..., None, None]


def psd_project(A, rtol=PSD_RTOL):
    """Symmetrize ``A`` and lift eigenvalues below ``rtol * max_eig`` to that floor."""
    e, U = np.linalg.eigh(hermitize(np.asarray(A)))
    floor = rtol * np.maximum(e.max(axis=-1, keepdims=True), 0.0)
    return _from_eig(np.maximum(e, floor), U)


def sqrtm_psd(A):
    """Principal square root of a Hermitian PSD matrix."""
    e, U = np.linalg.eigh(hermitize(np.asarray(A)))
    return _from_eig(np.sqrt(np.clip(e, 0.0, None)), U)


def geometric_mean(A, B):
    """Matrix geometric mean ``A # B`` of PD ``A`` and PSD ``B``.

    ``A # B = A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}`` is the unique PSD
    solution ``X`` of ``X A^{-1} X = B``.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    _check_square(A)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError("A and B must have the same dimension")
    a, U = _eigh_checked(A)
    if np.any(a <= 0):
        raise SingularMatrix("A must be positive definite")
    sa = np.sqrt(a)
    A_half = _from_eig(sa, U)
    A_mhalf = _from_eig(1.0 / sa, U)
    C = hermitize(A_mhalf @ B @ A_mhalf)
    return hermitize(A_half @ sqrtm_psd(C) @ A_half)


def solve_riccati(A, B, G_prev=None):
    """Solve ``G A G = B`` for Hermitian PSD ``G``.

    Uses the eigenvectors of the block matrix ``[[0, -A], [-B, 0]]`` that
    belong to its negative eigenvalues: stacking them as ``[F; E]`` gives
    ``G = E F^{-1}``. This route is independent of :func:`geometric_mean`,
    which solves the same equation as ``A^{-1} # B``.

    Where the eigenvector block ``F`` is singular the corresponding entry of
    ``G_prev`` is returned instead, when given.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    _check_square(A)
    M = A.shape[-1]
    try:
        _eigh_checked(A)
    except SingularMatrix:
        raise SingularMatrix("A is degenerate") from None

    batch = np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    A = np.broadcast_to(A, batch + (M, M)).astype(complex)
    B = np.broadcast_to(B, batch + (M, M)).astype(complex)
    Z = np.zeros(batch + (2 * M, 2 * M), dtype=complex)
    Z[..., :M, M:] = -A
    Z[..., M:, :M] = -B
    ev, vec = np.linalg.eig(Z)
    order = np.argsort(ev.real, axis=-1)[..., :M]
    sel = np.take_along_axis(vec, order[..., None, :], axis=-1)
    F = sel[..., :M, :]
    E = sel[..., M:, :]

    s = np.linalg.svd(F, compute_uv=False)
    ok = s[..., -1] > 1e-10 * s[..., 0]
    F_safe = np.where(ok[..., None, None], F, np.eye(M))
    G = E @ np.linalg.inv(F_safe)
    G = psd_project(G)
    if not np.all(ok):
        if G_prev is None:
            raise SingularMatrix("Riccati eigenvector block is singular")
        G_prev = np.broadcast_to(np.asarray(G_prev), G.shape)
        G = np.where(ok[..., None, None], G, G_prev)
    return G


def logdet_hermitian(A):
    """Natural log-determinant of a Hermitian PD matrix via Cholesky."""
    A = np.asarray(A)
    _check_square(A)
    try:
        L = np.linalg.cholesky(hermitize(A))
    except np.linalg.LinAlgError:
        raise SingularMatrix("matrix is not positive definite") from None
    return 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


# ---------------------------------------------------------------------------
# cubic a w^3 + b w^2 + d = 0


def _poly(a, b, d, w):
    with np.errstate(over="ignore", invalid="ignore"):
        return (a * w + b) * w * w + d


def _residual_ok(a, b, d, w, rtol=1e-8):
    with np.errstate(over="ignore", invalid="ignore"):
        scale = np.maximum.reduce(
            [np.abs(a * w**3), np.abs(b * w**2), np.abs(d), np.full_like(w, 1e-300)]
        )
        return np.abs(_poly(a, b, d, w)) <= rtol * scale


def _depressed_real_roots(P, Q):
    """Real roots of ``u^3 + P u + Q = 0``, as a (..., 3) array padded with nan.

    Also returns a mask of entries whose discriminant is within ``1e-12`` of
    zero relative to its terms (repeated-root regime).
    """
    out = np.full(P.shape + (3,), np.nan)
    disc = (Q / 2.0) ** 2 + (P / 3.0) ** 3
    near = np.abs(disc) <= 1e-12 * ((Q / 2.0) ** 2 + np.abs(P / 3.0) ** 3)

    one = disc > 0
    if np.any(one):
        # tiny |P| can underflow P * sqrt(P); those entries fall back to the companion solver
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            # hyperbolic forms: free of the cancellation in Cardano's sum of cube roots
            q, p = Q[one], P[one]
            u = np.cbrt(-q)
            pos = p > 0
            if np.any(pos):
                pp, qq = p[pos], q[pos]
                s3 = np.sqrt(pp / 3.0)
                u[pos] = -2.0 * s3 * np.sinh(np.arcsinh(1.5 * qq / (pp * s3)) / 3.0)
            neg = p < 0
            if np.any(neg):
                pp, qq = p[neg], q[neg]
                s3 = np.sqrt(-pp / 3.0)
                arg = np.maximum(-1.5 * np.abs(qq) / (pp * s3), 1.0)
                u[neg] = -2.0 * np.sign(qq) * s3 * np.cosh(np.arccosh(arg) / 3.0)
        out[one, 0] = u

    three = ~one
    if np.any(three):
        q, p = Q[three], P[three]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = 2.0 * np.sqrt(np.maximum(-p / 3.0, 0.0))
            arg = np.where(p < 0, (3.0 * q / (2.0 * p)) * np.sqrt(-3.0 / p), 0.0)
        theta = np.arccos(np.clip(arg, -1.0, 1.0)) / 3.0
        roots = np.stack(
            [r * np.cos(theta - 2.0 * np.pi * k / 3.0) for k in range(3)], axis=-1
        )
        # smallest-magnitude root from Vieta (u1 u2 u3 = -Q) to keep its precision
        order = np.argsort(np.abs(roots), axis=-1)
        rs = np.take_along_axis(roots, order, axis=-1)
        prod = rs[..., 1] * rs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            rs[..., 0] = np.where(prod != 0, -q / prod, rs[..., 0])
        out[three] = rs
    return out, near


def _newton_polish(a, b, d, w, steps=3):
    for _ in range(steps):
        f = _poly(a, b, d, w)
        fp = (3.0 * a * w + 2.0 * b) * w
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = w - f / fp
        better = np.isfinite(cand) & (cand > 0) & (
            np.abs(_poly(a, b, d, cand)) < np.abs(f)
        )
        w = np.where(better, cand, w)
    return w


def _companion_root(a, b, d):
    roots = np.roots([a, b, 0.0, d]) if (a != 0 or b != 0) else np.array([])
    real = roots[np.abs(roots.imag) <= 1e-8 * np.maximum(np.abs(roots), 1e-300)].real
    real = real[real > 0]
    return real.max() if real.size else np.nan


def positive_cubic_root(a, b, d):
    """Largest positive real root of ``a w^3 + b w^2 + d``, elementwise.

    Returns nan where no positive root exists. With ``d != 0`` the cubic is
    solved in ``u = 1/w``, where it becomes the depressed form
    ``u^3 + (b/d) u + a/d = 0`` and needs no Tschirnhaus shift; this keeps
    the ``a -> 0`` limit (plain multiplicative update) accurate. Roots are
    Newton-polished and any that fail the residual check are recomputed
    from companion-matrix eigenvalues.
    """
    a, b, d = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, b, d)))
    shape = a.shape
    a, b, d = a.ravel(), b.ravel(), d.ravel()
    if np.any(a < 0):
        raise ValueError("leading coefficient must be nonnegative")
    w = np.full(a.shape, np.nan)
    near = np.zeros(a.shape, dtype=bool)

    nz = d != 0
    if np.any(nz):
        u, near[nz] = _depressed_real_roots(b[nz] / d[nz], a[nz] / d[nz])
        u = np.where(u > 0, u, np.inf)
        umin = u.min(axis=-1)
        w[nz] = np.where(np.isfinite(umin), 1.0 / umin, np.nan)

    z = ~nz
    if np.any(z):
        # w^2 (a w + b) = 0: positive root only from the linear factor
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(a[z] > 0, -b[z] / a[z], np.nan)
        w[z] = np.where(r > 0, r, np.nan)

    found = np.isfinite(w) & (w > 0)
    w[found] = _newton_polish(a[found], b[found], d[found], w[found])
    bad = near | ~found | ~_residual_ok(a, b, d, np.where(found, w, 1.0))
    for idx in np.flatnonzero(bad):
        ai, bi, di = a[idx : idx + 1], b[idx : idx + 1], d[idx : idx + 1]
        cands = [w[idx]] if found[idx] else []
        r = _companion_root(ai[0], bi[0], di[0])
        if np.isfinite(r):
            cands.append(_newton_polish(ai, bi, di, np.array([r]))[0])
        if not cands:
            continue
        cands = np.array(cands)
        ok = _residual_ok(np.full_like(cands, ai[0]), np.full_like(cands, bi[0]),
                          np.full_like(cands, di[0]), cands)
        w[idx] = cands[ok].max() if np.any(ok) else cands[np.argmin(
            np.abs(_poly(ai[0], bi[0], di[0], cands)))]
    return w.reshape(shape)


def largest_positive_cubic_root(a, b, d):
    """Scalar version of :func:`positive_cubic_root` that raises when no root exists."""
    w = float(positive_cubic_root(a, b, d))
    if not np.isfinite(w) or w <= 0:
        raise NoPositiveRoot(f"no positive real root for ({a}, {b}, {d})")
    return w
