"""Audio I/O, short-time Fourier analysis and Griffin-Lim projection.

Spectra follow the unnormalised DFT convention, so a full-scale sinusoid
analysed with a length-``L`` Hann window peaks at roughly ``L / 4``.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 22050
PCM_SCALE = 32768.0
# Clamp threshold for round-off negatives in magnitude arrays.
NEGATIVE_TOLERANCE = 1e-8


class SpectralError(ValueError):
    """Raised on malformed audio, spectra or sequences."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SpectralError("audio must be mono (1-D samples)")
        if not np.all(np.isfinite(samples)):
            raise SpectralError("audio samples must be finite")
        if self.sample_rate <= 0:
            raise SpectralError("sample rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 512

    def __post_init__(self):
        if self.window_length <= 0 or self.window_length % 2:
            raise SpectralError("window length must be even and positive")
        if self.hop <= 0 or self.window_length % self.hop:
            raise SpectralError("hop must divide the window length")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return hann(self.window_length)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            return 0
        return (n_samples - self.window_length) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.window_length


def hann(length: int) -> np.ndarray:
    """Periodic Hann window, ``w[l] = sin^2(pi l / L)``."""
    n = np.arange(length)
    return np.sin(np.pi * n / length) ** 2


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Half spectrum, ``D = L/2 + 1`` rows by ``U`` frames."""

    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.config.n_bins:
            raise SpectralError(
                f"expected {self.config.n_bins} rows, got shape {bins.shape}")
        object.__setattr__(self, "bins", bins)

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def full(self) -> np.ndarray:
        return full_spectrum(self.bins, self.config.window_length)


def full_spectrum(half: np.ndarray, window_length: int) -> np.ndarray:
    """Extend a half spectrum to all ``L`` bins by conjugate symmetry.

    Row ``m >= D`` is ``conj(half[L - m])``.
    """
    L = window_length
    D = L // 2 + 1
    full = np.empty((L,) + half.shape[1:], dtype=np.complex128)
    full[:D] = half
    full[D:] = np.conj(half[L - np.arange(D, L)])
    return full


@dataclass(frozen=True)
class SpectralSequence:
    """Network input: ``N`` non-negative magnitude blocks of ``D x T`` frames.

    ``magnitudes`` has shape ``(N, D, T)``.  ``phase`` (``D x N*T``) is the
    phase the magnitudes are paired with when they are resynthesised.
    """

    magnitudes: np.ndarray
    phase: np.ndarray | None = None
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        mags = np.array(self.magnitudes, dtype=np.float64)
        if mags.ndim != 3:
            raise SpectralError("magnitudes must have shape (N, D, T)")
        if mags.shape[1] != self.config.n_bins:
            raise SpectralError(
                f"elements must have {self.config.n_bins} rows, got {mags.shape[1]}")
        if not np.all(np.isfinite(mags)):
            raise SpectralError("magnitudes must be finite")
        if mags.size and mags.min() < -NEGATIVE_TOLERANCE:
            raise SpectralError(f"negative magnitude {mags.min():g}")
        np.maximum(mags, 0.0, out=mags)
        mags.setflags(write=False)
        object.__setattr__(self, "magnitudes", mags)
        if self.phase is not None:
            phase = np.array(self.phase, dtype=np.float64)
            if phase.shape != (mags.shape[1], mags.shape[0] * mags.shape[2]):
                raise SpectralError(
                    f"phase shape {phase.shape} does not match sequence {mags.shape}")
            phase.setflags(write=False)
            object.__setattr__(self, "phase", phase)

    def __len__(self):
        return self.magnitudes.shape[0]

    @property
    def frames_per_element(self) -> int:
        return self.magnitudes.shape[2]

    @property
    def element_shape(self) -> tuple[int, int]:
        return self.magnitudes.shape[1:]

    def frames(self) -> np.ndarray:
        """Magnitudes laid out as a ``D x N*T`` spectrogram."""
        N, D, T = self.magnitudes.shape
        return self.magnitudes.transpose(1, 0, 2).reshape(D, N * T)

    def complex_frames(self) -> np.ndarray:
        if self.phase is None:
            raise SpectralError("sequence carries no phase")
        return self.frames() * np.exp(1j * self.phase)

    def with_magnitudes(self, magnitudes: np.ndarray) -> "SpectralSequence":
        return SpectralSequence(magnitudes, self.phase, self.config)

    @classmethod
    def from_frames(cls, frames: np.ndarray, T: int, phase=None,
                    config: StftConfig | None = None) -> "SpectralSequence":
        D, U = frames.shape
        N = U // T
        mags = frames[:, :N * T].reshape(D, N, T).transpose(1, 0, 2)
        if phase is not None:
            phase = phase[:, :N * T]
        return cls(mags, phase, config or StftConfig())


# -- audio files -------------------------------------------------------------

def load_audio(path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV sampled at 22050 Hz."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise SpectralError(f"cannot read {path}: {exc}") from exc
    if channels != 1:
        raise SpectralError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise SpectralError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise SpectralError(f"{path}: sample rate {rate} Hz, need {SAMPLE_RATE} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return AudioSignal(samples, rate)


def store_audio(path, x: AudioSignal) -> None:
    """Write ``x`` as 16-bit PCM, hard-clipping to the representable range."""
    pcm = np.clip(np.round(x.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(x.sample_rate)
            wf.writeframes(pcm.tobytes())
    except OSError as exc:
        raise SpectralError(f"cannot write {path}: {exc}") from exc


# -- analysis / synthesis ----------------------------------------------------

def stft(x: AudioSignal, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    L, H = cfg.window_length, cfg.hop
    U = cfg.n_frames(len(x))
    if U == 0:
        raise SpectralError(f"signal of {len(x)} samples is shorter than one window ({L})")
    idx = np.arange(L)[:, None] + H * np.arange(U)[None, :]
    segments = x.samples[idx] * cfg.window[:, None]
    return ComplexSpectrogram(np.fft.rfft(segments, axis=0), cfg)


def _overlap_add(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add of time-domain frames (``L x U``)."""
    L, H = cfg.window_length, cfg.hop
    U = frames.shape[1]
    w = cfg.window
    out = np.zeros(cfg.n_samples(U))
    norm = np.zeros_like(out)
    w2 = w * w
    for u in range(U):
        out[u * H:u * H + L] += w * frames[:, u]
        norm[u * H:u * H + L] += w2
    # Samples where every window vanishes carry no information.
    covered = norm > 1e-12
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out


def istft(S: ComplexSpectrogram) -> AudioSignal:
    """Least-squares inverse of :func:`stft` (normalised weighted overlap-add)."""
    cfg = S.config
    if S.n_frames == 0:
        raise SpectralError("empty spectrogram")
    frames = np.fft.ifft(S.full(), axis=0).real
    return AudioSignal(_overlap_add(frames, cfg))


def magnitude_sequence(S: ComplexSpectrogram, T: int) -> SpectralSequence:
    if T < 1:
        raise SpectralError("T must be positive")
    if S.n_frames < T:
        raise SpectralError(f"{S.n_frames} frames cannot fill one element of T={T}")
    return SpectralSequence.from_frames(np.abs(S.bins), T, np.angle(S.bins), S.config)


def analyse(x: AudioSignal, T: int, cfg: StftConfig | None = None) -> SpectralSequence:
    """Network input sequence of a waveform."""
    return magnitude_sequence(stft(x, cfg), T)


def resynthesise(complex_frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """``F(F^-1(U))`` on a half spectrum; the result is a consistent STFT."""
    x = istft(ComplexSpectrogram(complex_frames, cfg))
    return stft(x, cfg).bins


def gl_project(X: SpectralSequence) -> SpectralSequence:
    """One Griffin-Lim projection onto the set of valid sequences.

    The magnitudes are paired with the carried phase, taken to the time
    domain and analysed again.  The returned sequence carries the phase of
    that re-analysis, so it is exactly realisable by a waveform and a second
    projection leaves it unchanged.
    """
    if X.phase is None:
        raise SpectralError("gl_project needs the sequence phase")
    Y = resynthesise(X.complex_frames(), X.config)
    return SpectralSequence.from_frames(np.abs(Y), X.frames_per_element,
                                        np.angle(Y), X.config)


def render_frames(X: SpectralSequence) -> AudioSignal:
    return istft(ComplexSpectrogram(X.complex_frames(), X.config))


# -- SNR arithmetic ----------------------------------------------------------

def total_norm(X: SpectralSequence | np.ndarray) -> float:
    mags = X.magnitudes if isinstance(X, SpectralSequence) else X
    return float(np.sqrt(np.sum(np.abs(mags) ** 2)))


def epsilon_snr(X: SpectralSequence, snr_db: float) -> float:
    """Per-element perturbation budget for a minimum SNR in dB."""
    N = len(X)
    if N == 0:
        raise SpectralError("empty sequence")
    return total_norm(X) / N / 10.0 ** (snr_db / 20.0)


def perturbation_snr(X: SpectralSequence, X_hat: SpectralSequence) -> float:
    """SNR of ``X_hat - X`` in dB; ``inf`` when there is no perturbation."""
    if X.magnitudes.shape != X_hat.magnitudes.shape:
        raise SpectralError(
            f"shape mismatch {X.magnitudes.shape} vs {X_hat.magnitudes.shape}")
    noise = total_norm(X_hat.magnitudes - X.magnitudes)
    if noise == 0.0:
        return float("inf")
    return 20.0 * np.log10(total_norm(X) / noise)


# -- sequence persistence ----------------------------------------------------

_SPSQ_MAGIC = b"SPSQ"
_SPSQ_VERSION = 1
_SPSQ_HEADER = struct.Struct("<4sIIIII")


def save_sequence(path, X: SpectralSequence) -> None:
    """Flat binary: magic, version, N, T, D, has_phase, magnitudes, phase."""
    N, D, T = X.magnitudes.shape
    has_phase = X.phase is not None
    with open(path, "wb") as fh:
        fh.write(_SPSQ_HEADER.pack(_SPSQ_MAGIC, _SPSQ_VERSION, N, T, D, int(has_phase)))
        fh.write(X.magnitudes.astype("<f8").tobytes())
        if has_phase:
            fh.write(X.phase.astype("<f8").tobytes())


def load_sequence(path) -> SpectralSequence:
    data = Path(path).read_bytes()
    if len(data) < _SPSQ_HEADER.size:
        raise SpectralError(f"{path}: truncated header")
    magic, version, N, T, D, has_phase = _SPSQ_HEADER.unpack_from(data)
    if magic != _SPSQ_MAGIC:
        raise SpectralError(f"{path}: not a spectral sequence file")
    if version != _SPSQ_VERSION:
        raise SpectralError(f"{path}: unsupported version {version}")
    n_mag = N * D * T
    n_phase = D * N * T if has_phase else 0
    expected = _SPSQ_HEADER.size + 8 * (n_mag + n_phase)
    if len(data) != expected:
        raise SpectralError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_SPSQ_HEADER.size)
    mags = body[:n_mag].reshape(N, D, T)
    phase = body[n_mag:].reshape(D, N * T) if has_phase else None
    cfg = StftConfig(window_length=2 * (D - 1), hop=(D - 1))
    return SpectralSequence(mags, phase, cfg)
