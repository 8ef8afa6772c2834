"""Synthetic mixtures with known ground truth.

Instantaneous mixing, shoebox image-source room impulse responses,
convolutive mixing and low-rank Gaussian source synthesis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .audio import MultichannelSpectrogram, MultichannelWaveform, istft, stft
from .errors import CountMismatch, IllConditionedMixing, InvalidGeometry

SPEED_OF_SOUND = 343.0
SINC_TAPS = 16
HIGHPASS_HZ = 50.0


@dataclass
class RoomScenario:
    """Shoebox room with point sources and microphones.

    ``order`` limits the number of wall reflections per image; ``None``
    keeps every image arriving within ``rir_length`` seconds.
    ``rir_length`` defaults to ``max(1.2 * rt60, 0.05)``.
    """

    room: np.ndarray
    sources: np.ndarray
    mics: np.ndarray
    rt60: float = 0.0
    order: int | None = None
    sample_rate: int = 16000
    rir_length: float | None = None

    def __post_init__(self):
        self.room = np.asarray(self.room, dtype=float).reshape(3)
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        self.mics = np.atleast_2d(np.asarray(self.mics, dtype=float))
        if np.any(self.room <= 0):
            raise InvalidGeometry("room dimensions must be positive")
        for name, pts in (("source", self.sources), ("mic", self.mics)):
            if pts.shape[1] != 3:
                raise InvalidGeometry(f"{name} positions must be (count, 3)")
            if np.any(pts <= 0) or np.any(pts >= self.room):
                raise InvalidGeometry(f"{name} position outside the room")
        if self.rt60 < 0:
            raise InvalidGeometry("rt60 must be >= 0")
        if self.order is not None and self.order < 0:
            raise InvalidGeometry("order must be >= 0")
        if self.rir_length is None:
            self.rir_length = max(1.2 * self.rt60, 0.05)

    @property
    def n_sources(self):
        return self.sources.shape[0]

    @property
    def n_mics(self):
        return self.mics.shape[0]


def default_room_scenario(
    rt60=0.13,
    angles_deg=(-45.0, 45.0),
    distance=2.0,
    mic_spacing=0.0566,
    n_mics=2,
    room=(6.0, 6.0, 3.0),
    sample_rate=16000,
    order=None,
):
    """Linear array at the room center, sources on a circle around it."""
    room = np.asarray(room, dtype=float)
    center = np.array([room[0] / 2, room[1] / 2, 1.5])
    offsets = (np.arange(n_mics) - (n_mics - 1) / 2) * mic_spacing
    mics = center + np.outer(offsets, [1.0, 0.0, 0.0])
    th = np.deg2rad(np.asarray(angles_deg, dtype=float))
    sources = center + distance * np.stack([np.sin(th), np.cos(th), np.zeros_like(th)], axis=1)
    return RoomScenario(room, sources, mics, rt60=rt60, order=order, sample_rate=sample_rate)


def eyring_reflection_coefficient(room, rt60):
    """Uniform pressure reflection coefficient from Eyring's formula."""
    if rt60 <= 0:
        return 0.0
    Lx, Ly, Lz = room
    V = Lx * Ly * Lz
    S = 2 * (Lx * Ly + Lx * Lz + Ly * Lz)
    alpha = 1.0 - np.exp(-0.161 * V / (S * rt60))
    return float(np.sqrt(1.0 - alpha))


def _axis_images(L, s, n_max):
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate([2 * n * L + s, 2 * n * L - s])
    refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return pos, refl


def _image_set(sc, src, max_dist):
    """Image positions and reflection counts reaching ``max_dist`` from anywhere in the room."""
    if sc.rt60 <= 0 or sc.order == 0:
        n_max = np.zeros(3, dtype=int)
    else:
        n_max = np.ceil(max_dist / (2 * sc.room)).astype(int) + 1
    axes = [_axis_images(sc.room[a], src[a], n_max[a]) for a in range(3)]
    px, py, pz = np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij")
    rx, ry, rz = np.meshgrid(axes[0][1], axes[1][1], axes[2][1], indexing="ij")
    images = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
    refl = (rx + ry + rz).ravel()
    keep = np.ones(len(refl), dtype=bool)
    if sc.order is not None:
        keep &= refl <= sc.order
    if sc.rt60 <= 0:
        keep &= refl == 0
    return images[keep], refl[keep]


def _decay_time(times, energy, fit_range=(-5.0, -25.0)):
    """Line fit to the backward-integrated energy of ``energy`` sorted by ``times``."""
    e = np.cumsum(energy[::-1])[::-1]
    if e[0] <= 0:
        return float("nan")
    edc = 10 * np.log10(np.maximum(e / e[0], 1e-300))
    hi, lo = fit_range
    sel = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if len(sel) < 2 or edc[-1] > lo:
        return float("nan")
    slope = np.polyfit(times[sel], edc[sel], 1)[0]
    return float(-60.0 / slope)


def calibrated_reflection_coefficient(sc, src, mic, max_dist, iterations=40):
    """Reflection coefficient whose image-set decay time equals ``sc.rt60``.

    With uniform walls the image method decays more slowly than Sabine's or
    Eyring's diffuse-field formulas predict, because late energy comes from
    near-axial paths that hit few walls. The coefficient is found by
    bisection on the backward-integrated image energies, starting from the
    Eyring value.
    """
    if sc.rt60 <= 0:
        return 0.0
    images, refl = _image_set(sc, src, max_dist)
    dist = np.linalg.norm(images - mic, axis=1)
    order = np.argsort(dist)
    dist, refl = dist[order], refl[order]
    ok = dist <= max_dist
    dist, refl = dist[ok], refl[ok]
    times = dist / SPEED_OF_SOUND
    spread = 1.0 / dist**2

    def t60(beta):
        return _decay_time(times, spread * np.power(beta, 2 * refl))

    lo, hi = 1e-6, 1.0 - 1e-9
    beta = eyring_reflection_coefficient(sc.room, sc.rt60)
    for _ in range(iterations):
        t = t60(beta)
        if not np.isfinite(t) or t > sc.rt60:
            hi = beta
        else:
            lo = beta
        beta = 0.5 * (lo + hi)
    return float(beta)


def _fractional_delay_taps(delay):
    """16-tap Hann-windowed sinc kernels for fractional ``delay`` (samples), unit DC gain."""
    base = np.floor(delay).astype(int) - SINC_TAPS // 2 + 1
    idx = base[:, None] + np.arange(SINC_TAPS)
    t = idx - delay[:, None]
    win = 0.5 + 0.5 * np.cos(np.pi * t / (SINC_TAPS / 2))
    taps = np.sinc(t) * win
    taps /= taps.sum(axis=1, keepdims=True)
    return idx, taps


def image_source_rir(scenario):
    """Impulse responses ``(N, M, L)`` from every source to every microphone.

    Every image contributes ``beta^k / (4 pi r)`` through a 16-tap
    windowed-sinc fractional delay, ``k`` being its number of wall
    reflections. ``beta`` is calibrated per source against the first
    microphone so that the decay time matches ``rt60``. Reverberant
    responses are high-passed at 50 Hz: all image amplitudes are positive,
    so without it the dense tail adds up coherently near DC and decays too
    slowly.
    """
    sc = scenario
    fs = sc.sample_rate
    length = int(np.ceil(sc.rir_length * fs))
    max_dist = SPEED_OF_SOUND * length / fs
    rirs = np.zeros((sc.n_sources, sc.n_mics, length + SINC_TAPS))
    for n, src in enumerate(sc.sources):
        beta = calibrated_reflection_coefficient(sc, src, sc.mics[0], max_dist)
        images, refl = _image_set(sc, src, max_dist)
        gain = np.power(beta, refl) if beta > 0 else np.ones(len(refl))
        for m, mic in enumerate(sc.mics):
            dist = np.linalg.norm(images - mic, axis=1)
            delay = dist / SPEED_OF_SOUND * fs
            ok = delay < length
            amp = gain[ok] / (4 * np.pi * dist[ok])
            idx, taps = _fractional_delay_taps(delay[ok])
            valid = idx >= 0
            np.add.at(rirs[n, m], idx[valid], (taps * amp[:, None])[valid])
    rirs = rirs[:, :, :length]
    if sc.rt60 > 0 and sc.order != 0:
        sos = butter(2, HIGHPASS_HZ, "highpass", fs=fs, output="sos")
        rirs = sosfilt(sos, rirs, axis=-1)
    return rirs


def schroeder_t60(h, sample_rate, fit_range=(-5.0, -25.0)):
    """Decay time from a line fit to the backward-integrated energy curve.

    The slope between the two ``fit_range`` levels (dB) is extrapolated to
    60 dB. Returns NaN if the curve never reaches the lower level.
    """
    h = np.asarray(h, dtype=float)
    return _decay_time(np.arange(len(h)) / sample_rate, h**2, fit_range)


@dataclass
class GroundTruth:
    """Clean sources ``(N, L)``, their images ``(N, M, L)`` and how they were mixed."""

    sources: np.ndarray
    images: np.ndarray
    mixing: np.ndarray | None = None
    rirs: np.ndarray | None = None
    models: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[0] != self.sources.shape[0]:
            raise CountMismatch("images and sources disagree on N")
        if self.images.shape[-1] != self.sources.shape[-1]:
            raise CountMismatch("images and sources disagree on length")

    def reference(self, channel=0):
        """Source images at one microphone, ``(N, L)``."""
        return self.images[:, channel, :]


def _as_sources(sources):
    if isinstance(sources, MultichannelWaveform):
        return sources.samples, sources.sample_rate
    return np.atleast_2d(np.asarray(sources, dtype=float)), None


def instantaneous_mix(sources, A, sample_rate=None, frame_length=1024, frame_shift=512):
    """Mix ``sources`` ``(N, L)`` through ``A``.

    ``A`` of shape ``(M, N)`` is one real matrix for all frequencies and is
    applied sample-wise, which commutes exactly with the STFT. ``A`` of shape
    ``(I, M, N)`` is applied per frequency bin in the STFT domain and the
    result is resynthesized, so the mixture's own STFT only approximates
    ``A_i s_ij``.
    """
    s, fs = _as_sources(sources)
    fs = fs or sample_rate or 16000
    A = np.asarray(A)
    N, L = s.shape
    if A.shape[-1] != N:
        raise CountMismatch(f"A has {A.shape[-1]} columns for {N} sources")
    M = A.shape[-2]
    if M == N and np.max(np.linalg.cond(A)) >= 1e6:
        raise IllConditionedMixing("mixing matrix condition number >= 1e6")
    if A.ndim == 2:
        images = np.real(A.T[:, :, None] * s[:, None, :])
    else:
        S = stft(MultichannelWaveform(s, fs), frame_length, frame_shift)
        images = np.empty((N, M, L))
        for n in range(N):
            Y = A[:, None, :, n] * S.values[:, :, n : n + 1]
            spec = MultichannelSpectrogram(Y, frame_length, frame_shift, fs, L)
            images[n] = istft(spec).samples
    mixture = MultichannelWaveform(images.sum(axis=0), fs)
    return mixture, GroundTruth(sources=s, images=images, mixing=A)


def convolve_mix(sources, rirs, sample_rate=None):
    """Channel ``m`` is ``sum_n sources[n] * rirs[n, m]``, truncated to the source length."""
    s, fs = _as_sources(sources)
    fs = fs or sample_rate or 16000
    rirs = np.asarray(rirs, dtype=float)
    N, L = s.shape
    if rirs.shape[0] != N:
        raise CountMismatch(f"{rirs.shape[0]} RIR sets for {N} sources")
    M = rirs.shape[1]
    images = np.empty((N, M, L))
    for n in range(N):
        for m in range(M):
            images[n, m] = fftconvolve(s[n], rirs[n, m])[:L]
    mixture = MultichannelWaveform(images.sum(axis=0), fs)
    return mixture, GroundTruth(sources=s, images=images, rirs=rirs)


def synth_lowrank_source(W, H, seed, sample_rate=16000, frame_length=1024, frame_shift=512):
    """Synthesize a Gaussian source whose power spectrogram is ``W H`` in expectation.

    ``W`` is ``(I, K)`` with ``I = frame_length // 2 + 1`` and ``H`` is
    ``(K, J)``. The output length is ``(J - 1) * frame_shift``.
    """
    W = np.asarray(W, dtype=float)
    H = np.asarray(H, dtype=float)
    if np.any(W < 0) or np.any(H < 0):
        raise ValueError("W and H must be nonnegative")
    lam = W @ H
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(lam.shape) + 1j * rng.standard_normal(lam.shape)
    # overlap-add of independent frames loses a factor frame_shift / frame_length
    # of power on re-analysis; compensate so that E|stft(s)|^2 = lam
    s = np.sqrt(lam / 2.0 * frame_length / frame_shift) * z
    s[0] = np.real(s[0]) * np.sqrt(2.0)
    s[-1] = np.real(s[-1]) * np.sqrt(2.0)
    length = (lam.shape[1] - 1) * frame_shift
    spec = MultichannelSpectrogram(s, frame_length, frame_shift, sample_rate, length)
    return istft(spec)


def random_lowrank_factors(rng, n_freqs, n_frames, n_components=4, sample_rate=16000):
    """Harmonic basis spectra with sparse on/off activations.

    Each basis is a harmonic comb with a random fundamental, a spectral
    tilt and a small noise floor; each activation switches on for random
    segments.
    """
    freqs = np.arange(n_freqs) * (sample_rate / 2) / (n_freqs - 1)
    W = np.empty((n_freqs, n_components))
    for k in range(n_components):
        f0 = rng.uniform(110.0, 440.0)
        width = rng.uniform(15.0, 30.0)
        harmonics = np.arange(1, int((sample_rate / 2) // f0) + 1) * f0
        comb = np.exp(-0.5 * ((freqs[:, None] - harmonics[None, :]) / width) ** 2)
        tilt = np.exp(-np.arange(1, len(harmonics) + 1) / rng.uniform(4.0, 10.0))
        W[:, k] = comb @ tilt + 1e-3
    W /= W.sum(axis=0, keepdims=True)
    H = np.zeros((n_components, n_frames))
    for k in range(n_components):
        t = 0
        while t < n_frames:
            dur = int(rng.integers(4, 16))
            if rng.uniform() < 0.5:
                H[k, t : t + dur] = rng.gamma(2.0, 1.0) * np.exp(-np.arange(min(dur, n_frames - t)) / dur)
            t += dur
    H += 1e-3
    return W, H


def synthetic_sources(n_sources, duration, seed, sample_rate=16000, n_components=4,
                      frame_length=1024, frame_shift=512):
    """Independent low-rank sources of ``duration`` seconds and their factors.

    Returns ``(sources (N, L), [(W, H), ...])`` with unit-variance sources.
    """
    rng = np.random.default_rng(seed)
    L = int(round(duration * sample_rate))
    J = -(-L // frame_shift) + 1
    I = frame_length // 2 + 1
    out = np.empty((n_sources, L))
    models = []
    for n in range(n_sources):
        W, H = random_lowrank_factors(rng, I, J, n_components, sample_rate)
        w = synth_lowrank_source(W, H, int(rng.integers(2**31)), sample_rate, frame_length, frame_shift)
        x = w.samples[0, :L]
        out[n] = x / np.std(x)
        models.append((W, H))
    return out, models


def random_mixing_matrix(rng, n_mics, n_sources, max_cond=10.0):
    """Real matrix with unit diagonal and off-diagonal gains in [0.3, 0.9]."""
    while True:
        A = rng.uniform(0.3, 0.9, size=(n_mics, n_sources))
        A *= rng.choice([-1.0, 1.0], size=A.shape)
        k = min(n_mics, n_sources)
        A[np.arange(k), np.arange(k)] = 1.0
        if n_mics != n_sources or np.linalg.cond(A) < max_cond:
            return A


# ---------------------------------------------------------------------------
# scenario files


@dataclass
class MixScenario:
    """Everything needed to regenerate one mixture.

    ``kind`` is ``"instantaneous"`` or ``"convolutive"``.
    """

    kind: str = "convolutive"
    n_sources: int = 2
    n_mics: int = 2
    duration: float = 2.0
    sample_rate: int = 16000
    rt60: float = 0.13
    room: tuple = (6.0, 6.0, 3.0)
    distance: float = 2.0
    angles: tuple = (-45.0, 45.0)
    mic_spacing: float = 0.0566
    order: int | None = None
    mixing: np.ndarray | None = None
    n_components: int = 4

    def __post_init__(self):
        if self.kind not in ("instantaneous", "convolutive"):
            raise InvalidGeometry(f"unknown scenario kind {self.kind!r}")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise InvalidGeometry("duration and sample_rate must be positive")
        if self.kind == "convolutive" and len(self.angles) != self.n_sources:
            raise InvalidGeometry("need one angle per source")

    def room_scenario(self):
        return default_room_scenario(
            rt60=self.rt60,
            angles_deg=self.angles,
            distance=self.distance,
            mic_spacing=self.mic_spacing,
            n_mics=self.n_mics,
            room=self.room,
            sample_rate=self.sample_rate,
            order=self.order,
        )


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_scenario(text):
    """Read ``key = value`` lines (``#`` starts a comment) into a :class:`MixScenario`.

    Vector values are comma or space separated; ``mixing`` rows are
    separated by ``;``.
    """
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidGeometry(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            if key == "kind":
                kw[key] = value
            elif key in ("n_sources", "n_mics", "sample_rate", "n_components"):
                kw[key] = int(value)
            elif key == "order":
                kw[key] = None if value.lower() in ("none", "auto") else int(value)
            elif key in ("duration", "rt60", "distance", "mic_spacing"):
                kw[key] = float(value)
            elif key in ("room", "angles"):
                kw[key] = _floats(value)
            elif key == "mixing":
                kw[key] = np.array([_floats(r) for r in value.split(";")])
            else:
                raise InvalidGeometry(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise InvalidGeometry(f"line {lineno}: bad value for {key}: {exc}") from exc
    return MixScenario(**kw)


def load_scenario(path):
    with open(path, encoding="utf-8") as f:
        return parse_scenario(f.read())


def make_mixture(scenario, seed, sources=None):
    """Generate (or mix the given) sources under ``scenario``.

    Returns ``(mixture, GroundTruth)``. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    fs = scenario.sample_rate
    models = []
    if sources is None:
        sources, models = synthetic_sources(
            scenario.n_sources, scenario.duration, int(rng.integers(2**31)), fs,
            scenario.n_components,
        )
    sources = np.atleast_2d(sources)
    if sources.shape[0] != scenario.n_sources:
        raise CountMismatch(f"scenario expects {scenario.n_sources} sources, got {sources.shape[0]}")
    if scenario.kind == "instantaneous":
        A = scenario.mixing
        if A is None:
            A = random_mixing_matrix(rng, scenario.n_mics, scenario.n_sources)
        mixture, truth = instantaneous_mix(sources, A, fs)
    else:
        rirs = image_source_rir(scenario.room_scenario())
        mixture, truth = convolve_mix(sources, rirs, fs)
    truth.models = models
    return mixture, truth


def scenario_digest(scenario, seed):
    h = hashlib.sha256(repr((sorted(vars(scenario).items(), key=lambda kv: kv[0]), seed)).encode())
    return h.hexdigest()
