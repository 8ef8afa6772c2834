"""Separation metrics and basis identifiability measurements."""

from __future__ import annotations

import csv
import itertools
import sys
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, RankDeficientH, ZeroColumn, ZeroReference

DB_CAP = 300.0
_TINY = 10.0 ** (-DB_CAP / 10)


def _db(num, den):
    """``10 log10(num / den)`` clipped to ``[-300, 300]`` dB."""
    if den <= _TINY * num:
        return DB_CAP
    if num <= _TINY * den:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def _decompose(estimate, reference, interferers):
    e = np.asarray(estimate, dtype=float).ravel()
    s = np.asarray(reference, dtype=float).ravel()
    ref_energy = s @ s
    if ref_energy == 0:
        raise ZeroReference("reference signal is all zeros")
    others = np.atleast_2d(np.asarray(interferers, dtype=float)) if interferers is not None else None
    if others is not None and others.size:
        if others.shape[-1] != e.size:
            raise CountMismatch("interferers must match the estimate length")
    if s.size != e.size:
        raise CountMismatch("estimate and reference lengths differ")
    s_target = (e @ s) / ref_energy * s
    if others is None or not others.size:
        return s_target, np.zeros_like(e), e - s_target
    basis = np.vstack([s, others]).T
    coef, *_ = np.linalg.lstsq(basis, e, rcond=None)
    proj = basis @ coef
    return s_target, proj - s_target, e - proj


def sdr(estimate, reference, interferers=None):
    """Source-to-distortion ratio (dB) with a zero-lag projection decomposition.

    The estimate splits into its projection on the reference, the extra
    part explained by the interferers and a residual. Invariant to scaling
    of the estimate.
    """
    t, i, a = _decompose(estimate, reference, interferers)
    return _db(t @ t, (i + a) @ (i + a))


def sir(estimate, reference, interferers=None):
    """Source-to-interference ratio (dB), capped at 300 dB."""
    t, i, _ = _decompose(estimate, reference, interferers)
    return _db(t @ t, i @ i)


@dataclass
class EvalReport:
    """Per-source metrics under the chosen permutation.

    ``permutation[n]`` is the index of the estimate assigned to reference ``n``.
    Improvements are relative to the unprocessed mixture channel when one
    was supplied, otherwise ``None``.
    """

    permutation: tuple
    sdr: np.ndarray
    sir: np.ndarray
    sdr_improvement: np.ndarray | None = None
    sir_improvement: np.ndarray | None = None


def _metrics(estimates, references, perm):
    N = len(references)
    sdrs, sirs = np.empty(N), np.empty(N)
    for n in range(N):
        others = np.delete(references, n, axis=0)
        sdrs[n] = sdr(estimates[perm[n]], references[n], others)
        sirs[n] = sir(estimates[perm[n]], references[n], others)
    return sdrs, sirs


def align_permutation(estimates, references, mixture=None):
    """Exhaustively choose the estimate-to-reference assignment maximizing total SIR.

    Parameters
    ----------
    estimates, references : array_like, shape (N, L)
    mixture : array_like, shape (L,), optional
        Unprocessed reference-channel signal, for SDR/SIR improvements.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    ref = np.atleast_2d(np.asarray(references, dtype=float))
    if est.shape[0] != ref.shape[0]:
        raise CountMismatch(f"{est.shape[0]} estimates for {ref.shape[0]} references")
    N = ref.shape[0]
    if N > 4:
        raise CountMismatch("exhaustive alignment supports at most 4 sources")
    L = min(est.shape[1], ref.shape[1])
    est, ref = est[:, :L], ref[:, :L]
    best = None
    for perm in itertools.permutations(range(N)):
        sdrs, sirs = _metrics(est, ref, perm)
        if best is None or sirs.sum() > best[2].sum():
            best = (perm, sdrs, sirs)
    perm, sdrs, sirs = best
    report = EvalReport(permutation=tuple(perm), sdr=sdrs, sir=sirs)
    if mixture is not None:
        mix = np.broadcast_to(np.asarray(mixture, dtype=float)[:L], (N, L))
        sdr0, sir0 = _metrics(mix, ref, tuple(range(N)))
        report.sdr_improvement = sdrs - sdr0
        report.sir_improvement = sirs - sir0
    return report


# ---------------------------------------------------------------------------
# identifiability


def sparseness(W):
    """Mean column sparseness ``(sqrt(n) - |w|_1/|w|_2) / (sqrt(n) - 1)``."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if np.any(W < 0):
        raise ValueError("W must be nonnegative")
    n = W.shape[0]
    l2 = np.linalg.norm(W, axis=0)
    if np.any(l2 == 0):
        raise ZeroColumn("W has an all-zero column")
    if n == 1:
        return 1.0
    l1 = W.sum(axis=0)
    z = (np.sqrt(n) - l1 / l2) / (np.sqrt(n) - 1)
    return float(np.clip(z, 0.0, 1.0).mean())


def orthogonality_score(W):
    """``||W^T W - I||_F``."""
    W = np.asarray(W, dtype=float)
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


def uniqueness_score(W, T, H):
    """``||W - T pinv(H)||_F^2``."""
    W = np.asarray(W, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if np.linalg.matrix_rank(H) < H.shape[0]:
        raise RankDeficientH("H does not have full row rank")
    W_prime = np.asarray(T, dtype=float) @ np.linalg.pinv(H)
    return float(np.linalg.norm(W - W_prime) ** 2)


def normalize_columns(W, H):
    """Unit-L2 columns of ``W`` with ``H`` rescaled so that ``W H`` is unchanged."""
    norms = np.maximum(np.linalg.norm(W, axis=-2, keepdims=True), 1e-300)
    return W / norms, H * np.swapaxes(norms, -1, -2)


# ---------------------------------------------------------------------------
# CSV


def write_csv(rows, out=None, fieldnames=None):
    """Write dict ``rows`` as UTF-8 CSV with a header and LF line endings.

    ``out`` is a path, a text stream or ``None`` for stdout.
    """
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    if out is None or hasattr(out, "write"):
        stream = out or sys.stdout
        writer = csv.DictWriter(stream, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
