"""MFCC and zero-crossing texture features with a minimum-Mahalanobis classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.linalg import cho_factor, cho_solve

from .network.features import texture_frames, texture_stats, window_starts
from .spectral import SAMPLE_RATE, AudioSignal, StftConfig, stft

N_MEL = 40
N_MFCC = 13
LOG_FLOOR = 1e-10
FRAME_DIMS = N_MFCC + 1
TEXTURE_DIMS = 2 * FRAME_DIMS


class BaselineError(ValueError):
    pass


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_bins=513, sample_rate=SAMPLE_RATE, n_filters=N_MEL):
    """Triangular filters equally spaced in mel from 0 Hz to Nyquist.

    Each row sums to one, so a flat spectrum gives equal energies in every
    band.
    """
    nyquist = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_filters + 2))
    freqs = np.linspace(0.0, nyquist, n_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    sums = bank.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise BaselineError("a mel filter covers no frequency bin")
    return bank / sums


_BANKS = {}


def _bank(n_bins, sample_rate):
    key = (n_bins, sample_rate)
    if key not in _BANKS:
        _BANKS[key] = mel_filterbank(n_bins, sample_rate)
    return _BANKS[key]


def mfcc(magnitudes, sample_rate=SAMPLE_RATE, n_bins=513) -> np.ndarray:
    """First 13 cepstral coefficients of one magnitude frame, or of each row."""
    mag = np.asarray(magnitudes, dtype=float)
    if mag.shape[-1] != n_bins:
        raise BaselineError(f"expected {n_bins} bins, got {mag.shape[-1]}")
    if np.any(mag < 0):
        raise BaselineError("magnitudes must be non-negative")
    energies = (mag * mag) @ _bank(n_bins, sample_rate).T
    logs = np.log(np.maximum(energies, LOG_FLOOR))
    return dct(logs, type=2, norm="ortho", axis=-1)[..., :N_MFCC]


def zero_crossing_rate(frame) -> float:
    """Fraction of adjacent sample pairs whose signs differ (zero counts as positive)."""
    x = np.asarray(frame, dtype=float)
    if x.size < 2:
        raise BaselineError("need at least two samples")
    positive = x >= 0
    return float(np.count_nonzero(positive[1:] != positive[:-1]) / (x.size - 1))


def frame_features(x: AudioSignal, cfg: StftConfig | None = None) -> np.ndarray:
    """Per analysis frame: 13 MFCCs then the zero-crossing rate (frames x 14)."""
    cfg = cfg or StftConfig()
    S = stft(x, cfg)
    coeffs = mfcc(np.abs(S.bins).T, x.sample_rate, cfg.n_bins)
    U = S.n_frames
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop * np.arange(U)[:, None]
    pos = x.samples[idx] >= 0
    zcr = np.count_nonzero(pos[:, 1:] != pos[:, :-1], axis=1) / (cfg.window_length - 1)
    return np.column_stack([coeffs, zcr])


def texture_aggregate(frames, window=None, hop=None) -> np.ndarray:
    """Mean then population variance of frame features over 5 s windows hopped by half."""
    frames = np.asarray(frames, dtype=float)
    if window is None:
        window, default_hop = texture_frames()
        hop = default_hop if hop is None else hop
    elif hop is None:
        hop = window // 2
    if frames.ndim != 2 or not window_starts(frames.shape[0], window, hop):
        raise BaselineError(f"need at least {window} frames of features")
    return texture_stats(frames, window, hop, moment="var")


def texture_features(x: AudioSignal) -> np.ndarray:
    return texture_aggregate(frame_features(x))


@dataclass
class MahalanobisModel:
    class_means: np.ndarray
    covariance: np.ndarray
    label_names: list

    def __post_init__(self):
        self._factor = cho_factor(self.covariance)

    def distances(self, features) -> np.ndarray:
        """Squared Mahalanobis distance of each feature row to each class mean."""
        f = np.atleast_2d(np.asarray(features, dtype=float))
        diff = f[:, None, :] - self.class_means[None, :, :]
        flat = diff.reshape(-1, diff.shape[-1])
        solved = cho_solve(self._factor, flat.T).T
        return np.einsum("ij,ij->i", flat, solved).reshape(diff.shape[:2])

    def predict(self, features) -> np.ndarray:
        return np.argmin(self.distances(features), axis=1)


def fit_mahalanobis(features, labels, label_names=None) -> MahalanobisModel:
    """Class means and one covariance pooled over all classes."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise BaselineError("features and labels differ in length")
    K = int(y.max()) + 1 if label_names is None else len(label_names)
    names = list(label_names) if label_names is not None else [str(k) for k in range(K)]
    counts = np.bincount(y, minlength=K)
    if np.any(counts < 2):
        raise BaselineError("every class needs at least two feature vectors")
    means = np.stack([X[y == k].mean(axis=0) for k in range(K)])
    centred = X - means[y]
    cov = centred.T @ centred / X.shape[0]
    d = X.shape[1]
    cov = cov + max(1e-6 * np.trace(cov) / d, 1e-8) * np.eye(d)
    return MahalanobisModel(means, cov, names)


def classify_majority(model: MahalanobisModel, features) -> int:
    """Plurality vote over texture windows; ties go to the lowest class index."""
    f = np.atleast_2d(np.asarray(features, dtype=float))
    if f.shape[0] == 0:
        raise BaselineError("no texture features to classify")
    votes = np.bincount(model.predict(f), minlength=len(model.label_names))
    return int(np.argmax(votes))
