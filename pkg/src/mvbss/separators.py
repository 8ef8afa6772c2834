"""Iterative blind source separation drivers.

Five methods share one configuration and one result type:

``auxiva``   frequency-domain IVA with a spherical Laplace prior,
``ilrma``    rank-1 spatial model with an NMF source model,
``m-ilrma``  ILRMA with the min-volume prior on the bases,
``mnmf``     full-rank spatial model with an NMF source model,
``m-mnmf``   MNMF with the min-volume prior on the bases.

Every driver records the objective after each iteration (to be maximized,
constants dropped) and raises :class:`NumericalBreakdown` carrying the
partial run as ``exc.run`` if a NaN appears or an update fails numerically.
"""

from __future__ import annotations

import hashlib
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import source_model as sm
from . import spatial
from .audio import MultichannelSpectrogram, istft, stft
from .errors import BSSError, DimensionMismatch, NumericalBreakdown
from .linalg import logdet_hermitian

METHODS = ("auxiva", "ilrma", "m-ilrma", "mnmf", "m-mnmf")
GAMMA_POLICIES = ("once", "every", "off")


@dataclass
class SeparatorConfig:
    """Run parameters.

    Attributes
    ----------
    gamma_update : str
        ``"once"`` rebalances ``gamma`` after the first iteration and keeps
        it fixed afterwards, ``"every"`` rebalances after each iteration,
        ``"off"`` keeps ``gamma_init``.
    spatial_solver : str or None
        G step for the full-rank methods, ``"geometric"`` or ``"riccati"``.
        ``None`` picks ``"geometric"`` for ``m-mnmf`` and ``"riccati"`` for
        ``mnmf``.
    init : str
        ``"random"`` or ``"snpa"`` initial bases, see
        :func:`~mvbss.source_model.init_source_model`.
    tol : float or None
        Stop early when the relative objective change stays below ``tol``
        for five consecutive iterations.
    """

    method: str = "m-ilrma"
    n_sources: int = 2
    n_bases: int = 10
    max_iterations: int = 100
    eta: float = 0.5
    gamma_init: float = 0.05
    gamma_update: str = "once"
    spatial_solver: str | None = None
    seed: int = 0
    frame_length: int = 1024
    frame_shift: int = 512
    reference_channel: int = 0
    init: str = "random"
    tol: float | None = None

    def __post_init__(self):
        self.method = self.method.replace("_", "-")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.gamma_update not in GAMMA_POLICIES:
            raise ValueError(f"gamma_update must be one of {GAMMA_POLICIES}")
        if self.init not in ("random", "snpa"):
            raise ValueError("init must be 'random' or 'snpa'")
        if self.spatial_solver not in (None, "geometric", "riccati"):
            raise ValueError("spatial_solver must be 'geometric' or 'riccati'")
        if self.n_sources < 1 or self.n_bases < 1 or self.max_iterations < 0:
            raise ValueError("n_sources, n_bases must be >= 1 and max_iterations >= 0")
        if self.eta <= 0 or self.gamma_init < 0:
            raise ValueError("eta must be positive and gamma_init nonnegative")


@dataclass
class SeparationRun:
    """Result of one driver call.

    ``objective_trace`` and ``gamma_trace`` hold one value per iteration.
    ``estimates`` are source spectrograms at the reference channel.
    ``source_power`` is ``(N, I, J)`` on the driver's internal unit-power
    scale, matching ``model``.
    """

    config: SeparatorConfig
    objective_trace: list = field(default_factory=list)
    gamma_trace: list = field(default_factory=list)
    estimates: MultichannelSpectrogram | None = None
    model: sm.SourceModel | None = None
    demixing: np.ndarray | None = None
    covariances: np.ndarray | None = None
    source_power: np.ndarray | None = None
    wall_time: float = 0.0
    iteration_count: int = 0
    manifest: dict = field(default_factory=dict)

    @property
    def separated(self):
        """Time-domain estimates, one channel per source."""
        if self.estimates is None:
            return None
        return istft(self.estimates)


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class _Driver:
    """Shared bookkeeping: scaling, tracing, stopping and manifest."""

    def __init__(self, X, cfg):
        self.spec = X
        self.cfg = cfg
        x = np.asarray(X.values, dtype=complex)
        # unit mean power keeps eta and the initial gamma scale-free
        self.scale = float(np.sqrt(np.mean(np.abs(x) ** 2)))
        if not np.isfinite(self.scale) or self.scale == 0:
            raise NumericalBreakdown("mixture is silent or non-finite")
        self.x = x / self.scale
        self.I, self.J, self.M = x.shape
        self.N = cfg.n_sources
        self.rng = np.random.default_rng(cfg.seed)
        self.run = SeparationRun(config=cfg)
        self.t0 = time.perf_counter()

    def record(self, value):
        if not np.isfinite(value):
            self.fail(f"objective became {value} at iteration {len(self.run.objective_trace) + 1}")
        self.run.objective_trace.append(float(value))
        self.run.iteration_count = len(self.run.objective_trace)

    def fail(self, message):
        self.run.wall_time = time.perf_counter() - self.t0
        exc = NumericalBreakdown(message)
        exc.run = self.run
        raise exc

    @contextmanager
    def guard(self):
        """Turn numerical failures inside the loop into :class:`NumericalBreakdown`."""
        try:
            yield
        except NumericalBreakdown:
            raise
        except (BSSError, np.linalg.LinAlgError) as exc:
            it = len(self.run.objective_trace) + 1
            self.fail(f"{type(exc).__name__} at iteration {it}: {exc}")

    def check_finite(self, **arrays):
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                self.fail(f"NaN/Inf in {name} at iteration {len(self.run.objective_trace) + 1}")

    def converged(self):
        tol = self.cfg.tol
        tr = self.run.objective_trace
        if tol is None or len(tr) < 6:
            return False
        last = np.asarray(tr[-6:])
        rel = np.abs(np.diff(last)) / np.maximum(np.abs(last[1:]), 1e-300)
        return bool(np.all(rel < tol))

    def finish(self, y, model=None, D=None, G=None, power=None):
        run = self.run
        run.wall_time = time.perf_counter() - self.t0
        run.model, run.demixing, run.covariances = model, D, G
        run.source_power = power
        run.estimates = MultichannelSpectrogram(
            values=y * self.scale,
            frame_length=self.spec.frame_length,
            frame_shift=self.spec.frame_shift,
            sample_rate=self.spec.sample_rate,
            length=self.spec.length,
        )
        run.manifest = {
            "method": self.cfg.method,
            "seed": self.cfg.seed,
            "config": asdict(self.cfg),
            "iterations": run.iteration_count,
            "final_objective": run.objective_trace[-1] if run.objective_trace else None,
            "gamma_final": run.gamma_trace[-1] if run.gamma_trace else None,
            "input_sha256": _digest(self.spec.values),
            "W_sha256": _digest(model.W) if model is not None else None,
            "H_sha256": _digest(model.H) if model is not None else None,
            "D_sha256": _digest(D),
            "G_sha256": _digest(G),
        }
        return run


def _require_determined(N, M):
    if N != M:
        raise DimensionMismatch(f"this method requires N == M, got N={N}, M={M}")


# ---------------------------------------------------------------------------
# objectives


def _logdet_DDh(D):
    return logdet_hermitian(D @ np.conj(np.swapaxes(D, -1, -2)))


def objective_m_ilrma(y_power, lam, D, W, gamma, eta):
    """``-sum(|y|^2/lam + log lam) + J sum_i log|D D^H| - gamma sum_n log|W^T W + eta I|``."""
    J = lam.shape[-1]
    value = -np.sum(y_power / lam + np.log(lam)) + J * np.sum(_logdet_DDh(D))
    if gamma:
        value -= gamma * np.sum(sm.minvol_penalty(W, eta))
    return float(value)


def gaussian_nll(x, X_hat, X_hat_inv=None):
    """``sum_ij x^H Xh^-1 x + log|Xh|``."""
    if X_hat_inv is None:
        X_hat_inv = spatial.inverse_model_covariance(X_hat)
    quad = np.real(np.einsum("ija,ijab,ijb->", np.conj(x), X_hat_inv, x))
    return float(quad + np.sum(logdet_hermitian(X_hat)))


def is_misfit_rank1(y_power, lam):
    """Itakura-Saito divergence ``sum(r - log r - 1)`` with ``r = |y|^2 / lam``.

    Positive and invariant to the data scale, used as the data term when
    rebalancing ``gamma``.
    """
    r = np.maximum(y_power / lam, sm.EPS)
    return float(np.sum(r - np.log(r) - 1.0))


def is_misfit_full_rank(x, X_hat_inv):
    """Same divergence on the whitened powers ``x^H Xh^-1 x`` of the full-rank model."""
    q = np.real(np.einsum("ija,ijab,ijb->ij", np.conj(x), X_hat_inv, x))
    r = np.maximum(q, sm.EPS)
    return float(np.sum(r - np.log(r) - 1.0))


def objective_m_mnmf(x, X_hat, W, gamma, eta, X_hat_inv=None):
    """``-sum_ij (x^H Xh^-1 x + log|Xh|) - gamma sum_n log|W^T W + eta I|``."""
    value = -gaussian_nll(x, X_hat, X_hat_inv)
    if gamma:
        value -= gamma * np.sum(sm.minvol_penalty(W, eta))
    return float(value)


def objective_auxiva(y, D):
    """``-sum_jn ||y_jn||_2 + J sum_i log|det D_i|``."""
    J = y.shape[1]
    r = np.sqrt(np.sum(np.abs(y) ** 2, axis=0))
    return float(-np.sum(r) + 0.5 * J * np.sum(_logdet_DDh(D)))


# ---------------------------------------------------------------------------
# drivers


def run_auxiva(X, cfg):
    drv = _Driver(X, cfg)
    _require_determined(drv.N, drv.M)
    x = drv.x
    D = np.tile(np.eye(drv.M, dtype=complex), (drv.I, 1, 1))
    with drv.guard():
        for _ in range(cfg.max_iterations):
            y = spatial.demix(D, x)
            r = np.maximum(np.sqrt(np.sum(np.abs(y) ** 2, axis=0)), sm.EPS)  # (J, N)
            lam = np.broadcast_to(r.T[:, None, :], (drv.N, drv.I, drv.J))
            G = spatial.mixture_covariance_estimate(x, lam)
            for n in range(drv.N):
                D = spatial.ip_update_demixing(D, G, n)
            drv.record(objective_auxiva(spatial.demix(D, x), D))
            if drv.converged():
                break
    y = spatial.projection_back(spatial.demix(D, x), D, cfg.reference_channel)
    return drv.finish(y, D=D)


def _gamma_step(drv, t, gamma, misfit_fn, W):
    cfg = drv.cfg
    if gamma == 0 or cfg.gamma_update == "off":
        return gamma
    if cfg.gamma_update == "once" and t > 0:
        return gamma
    return sm.update_gamma(gamma, misfit_fn(), W, cfg.eta)


def _run_rank1(X, cfg, minvol):
    drv = _Driver(X, cfg)
    _require_determined(drv.N, drv.M)
    x = drv.x
    D = np.tile(np.eye(drv.M, dtype=complex), (drv.I, 1, 1))
    model = sm.init_source_model(np.mean(np.abs(x) ** 2, axis=2), drv.N, cfg.n_bases, drv.rng, cfg.init)
    gamma = cfg.gamma_init if minvol else 0.0
    P = spatial.demixed_power(D, x)

    def misfit():
        return is_misfit_rank1(P, sm.power_spectrogram(model))

    with drv.guard():
        for t in range(cfg.max_iterations):
            model.H = sm.update_H_m_ilrma(model, P)
            if minvol:
                model.W = sm.update_W_m_ilrma(model, P, gamma, cfg.eta)
            else:
                model.W = sm.update_W_baseline_ilrma(model, P)
            if minvol:
                gamma = _gamma_step(drv, t, gamma, misfit, model.W)
            drv.run.gamma_trace.append(gamma)

            lam = sm.power_spectrogram(model)
            G = spatial.mixture_covariance_estimate(x, lam)
            for n in range(drv.N):
                D = spatial.ip_update_demixing(D, G, n)
            P = spatial.demixed_power(D, x)

            # one scalar per source, absorbed by D and H so the objective is unchanged
            c = np.sqrt(np.maximum(P.mean(axis=(1, 2)), sm.EPS))
            D = D / c[None, :, None]
            P = P / c[:, None, None] ** 2
            model.H = sm._floor(model.H / c[:, None, None] ** 2)

            drv.check_finite(D=D, W=model.W, H=model.H)
            lam = sm.power_spectrogram(model)
            drv.record(objective_m_ilrma(P, lam, D, model.W, gamma, cfg.eta))
            if drv.converged():
                break
    y = spatial.projection_back(spatial.demix(D, x), D, cfg.reference_channel)
    return drv.finish(y, model=model, D=D, power=P)


def run_ilrma(X, cfg):
    return _run_rank1(X, cfg, minvol=False)


def run_m_ilrma(X, cfg):
    return _run_rank1(X, cfg, minvol=True)


def _run_full_rank(X, cfg, minvol):
    drv = _Driver(X, cfg)
    x = drv.x
    solver = cfg.spatial_solver or ("geometric" if minvol else "riccati")
    update_G = spatial.update_G_m_mnmf if solver == "geometric" else spatial.update_G_baseline_mnmf
    model = sm.init_source_model(np.mean(np.abs(x) ** 2, axis=2), drv.N, cfg.n_bases, drv.rng, cfg.init)
    G = spatial.init_spatial_covariance(drv.N, drv.I, drv.M, drv.rng)
    gamma = cfg.gamma_init if minvol else 0.0

    def state():
        lam = sm.power_spectrogram(model)
        X_hat = spatial.model_covariance(lam, G)
        return lam, X_hat, spatial.inverse_model_covariance(X_hat)

    _, _, Xi = state()
    with drv.guard():
        for t in range(cfg.max_iterations):
            model.H = sm.update_H_m_mnmf(model, G, x, Xi)
            _, _, Xi = state()
            if minvol:
                model.W = sm.update_W_m_mnmf(model, G, x, Xi, gamma, cfg.eta)
            else:
                model.W = sm.update_W_baseline_mnmf(model, G, x, Xi)
            lam, X_hat, Xi = state()
            if minvol:
                gamma = _gamma_step(drv, t, gamma, lambda: is_misfit_full_rank(x, Xi), model.W)
            drv.run.gamma_trace.append(gamma)

            G = update_G(G, x, Xi, lam)
            # per-source trace normalization, absorbed by H
            c = np.maximum(np.real(np.trace(G, axis1=-2, axis2=-1)).mean(axis=1) / drv.M, sm.EPS)
            G = G / c[:, None, None, None]
            model.H = sm._floor(model.H * c[:, None, None])

            drv.check_finite(G=G, W=model.W, H=model.H)
            lam, X_hat, Xi = state()
            drv.record(objective_m_mnmf(x, X_hat, model.W, gamma, cfg.eta, X_hat_inv=Xi))
            if drv.converged():
                break
    lam = sm.power_spectrogram(model)
    y = spatial.multichannel_wiener_filter(x, lam, G, ref=cfg.reference_channel)
    return drv.finish(y, model=model, G=G, power=np.transpose(np.abs(y) ** 2, (2, 0, 1)))


def run_mnmf(X, cfg):
    return _run_full_rank(X, cfg, minvol=False)


def run_m_mnmf(X, cfg):
    return _run_full_rank(X, cfg, minvol=True)


RUNNERS = {
    "auxiva": run_auxiva,
    "ilrma": run_ilrma,
    "m-ilrma": run_m_ilrma,
    "mnmf": run_mnmf,
    "m-mnmf": run_m_mnmf,
}


def separate(waveform, cfg):
    """STFT ``waveform``, run ``cfg.method`` and return the :class:`SeparationRun`."""
    X = stft(waveform, cfg.frame_length, cfg.frame_shift)
    return RUNNERS[cfg.method](X, cfg)
