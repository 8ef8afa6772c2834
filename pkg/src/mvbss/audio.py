"""Multichannel waveforms, STFT analysis/synthesis and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import InvalidFraming, IoFailure, UnsupportedFormat

DEFAULT_FRAME_LENGTH = 1024
DEFAULT_FRAME_SHIFT = 512


@dataclass
class MultichannelWaveform:
    """Real samples of shape ``(channels, length)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"samples must be (channels, length), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = x
        self.sample_rate = int(self.sample_rate)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class MultichannelSpectrogram:
    """One-sided complex STFT indexed ``(freq, frame, channel)``.

    ``length`` is the number of time samples of the analysed signal, kept so
    that synthesis can trim to the original duration.
    """

    values: np.ndarray
    frame_length: int
    frame_shift: int
    sample_rate: int
    length: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise InvalidFraming(f"values must be (I, J, M), got {v.shape}")
        if v.shape[0] != self.frame_length // 2 + 1:
            raise InvalidFraming(
                f"{v.shape[0]} bins inconsistent with frame_length {self.frame_length}"
            )
        self.values = v

    @property
    def shape(self):
        return self.values.shape


def sqrt_hann(frame_length):
    """Periodic square-root Hann window."""
    n = np.arange(frame_length)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_length))


def _check_framing(frame_length, frame_shift):
    if frame_length < 2 or frame_length % 2:
        raise InvalidFraming("frame_length must be an even integer >= 2")
    if frame_shift < 1 or frame_length % frame_shift:
        raise InvalidFraming("frame_shift must divide frame_length")


def n_frames(length, frame_length, frame_shift):
    return 1 + -(-length // frame_shift)


def stft(w, frame_length=DEFAULT_FRAME_LENGTH, frame_shift=DEFAULT_FRAME_SHIFT):
    """Centered one-sided STFT of every channel of ``w``.

    The signal is reflect-padded by ``frame_length // 2`` at both ends and
    zero-padded at the end to a whole number of hops.
    """
    _check_framing(frame_length, frame_shift)
    x = w.samples
    L = x.shape[1]
    if L < frame_length:
        raise InvalidFraming(f"signal length {L} shorter than frame_length {frame_length}")
    half = frame_length // 2
    J = n_frames(L, frame_length, frame_shift)
    padded = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    total = frame_length + (J - 1) * frame_shift
    padded = np.pad(padded, ((0, 0), (0, total - padded.shape[1])))
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_length, axis=1)
    frames = frames[:, ::frame_shift][:, :J]  # (M, J, N)
    spec = np.fft.rfft(frames * sqrt_hann(frame_length), axis=-1)
    return MultichannelSpectrogram(
        values=np.transpose(spec, (2, 1, 0)),
        frame_length=frame_length,
        frame_shift=frame_shift,
        sample_rate=w.sample_rate,
        length=L,
    )


def istft(s, output_length=None):
    """Weighted overlap-add inverse of :func:`stft`."""
    N, hop = s.frame_length, s.frame_shift
    _check_framing(N, hop)
    I, J, M = s.values.shape
    if I != N // 2 + 1:
        raise InvalidFraming("bin count does not match frame_length")
    if output_length is None:
        output_length = s.length
    half = N // 2
    win = sqrt_hann(N)
    frames = np.fft.irfft(np.transpose(s.values, (2, 1, 0)), n=N, axis=-1) * win
    total = N + (J - 1) * hop
    out = np.zeros((M, total))
    norm = np.zeros(total)
    for j in range(J):
        out[:, j * hop : j * hop + N] += frames[:, j]
        norm[j * hop : j * hop + N] += win**2
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    out = out[:, half : half + output_length]
    if out.shape[1] < output_length:
        out = np.pad(out, ((0, 0), (0, output_length - out.shape[1])))
    return MultichannelWaveform(out, s.sample_rate)


def read_wav(path):
    """Read a PCM-16 or IEEE float-32 WAV file."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise IoFailure(str(exc)) from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except ValueError as exc:
        raise UnsupportedFormat(str(exc)) from exc
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(float)
    else:
        raise UnsupportedFormat(f"unsupported sample type {data.dtype}")
    x = x.T if x.ndim == 2 else x[None, :]
    return MultichannelWaveform(x, rate)


def write_wav(path, w, bit_depth=32):
    """Write ``w`` as interleaved PCM-16 (``bit_depth=16``) or float-32 (``32``)."""
    x = w.samples.T
    if bit_depth == 16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif bit_depth == 32:
        data = x.astype(np.float32)
    else:
        raise UnsupportedFormat(f"bit_depth must be 16 or 32, got {bit_depth}")
    if data.shape[1] == 1:
        data = data[:, 0]
    try:
        wavfile.write(path, w.sample_rate, np.ascontiguousarray(data))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
