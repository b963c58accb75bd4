"""Deterministic synthetic music-like corpus standing in for licensed datasets.

Each class is an audio family: a harmonic register and spectral tilt, an
amplitude-modulation rate and a coloured noise bed.  Each artist applies a
fixed offset to those parameters, so recordings by one artist resemble each
other more than they resemble the rest of their class.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .evaluation import DataError, DatasetManifest, ManifestEntry, manifest_text
from .spectral import SAMPLE_RATE, AudioSignal, store_audio


def class_name(index: int) -> str:
    return f"class{index:02d}"


def _family(k: int, K: int):
    """Parameters of class ``k``; registers are spread over ~4 octaves."""
    pos = k / max(1, K - 1)
    return {
        "f0": 80.0 * 2.0 ** (4.0 * pos),
        "tilt": 0.6 + 1.4 * ((k * 3) % K) / max(1, K - 1),
        "am_rate": 1.5 + 6.0 * ((k * 5 + 1) % K) / max(1, K),
        "noise_color": -1.0 + 2.0 * ((k * 7 + 2) % K) / max(1, K - 1),
        "noise_level": 0.02 + 0.04 * ((k + 1) % 3),
    }


def _artist(params, rng):
    p = dict(params)
    p["f0"] *= 2.0 ** (rng.uniform(-0.35, 0.35))
    p["tilt"] *= rng.uniform(0.8, 1.25)
    p["am_rate"] *= rng.uniform(0.8, 1.25)
    p["noise_color"] += rng.uniform(-0.3, 0.3)
    p["formant"] = rng.uniform(600.0, 4000.0)
    return p


def _coloured_noise(n, exponent, rng):
    """Noise whose power spectrum falls as ``f ** exponent``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    f[0] = f[1]
    spec *= (f / 1000.0) ** (exponent / 2.0)
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def synthesize_item(params, duration, rng) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    start = 0
    nyquist = SAMPLE_RATE / 2
    while start < n:
        length = min(n - start, int(rng.uniform(0.25, 0.8) * SAMPLE_RATE))
        f0 = params["f0"] * 2.0 ** (rng.integers(-5, 6) / 12.0)
        tt = t[:length]
        note = np.zeros(length)
        h = 1
        while h * f0 < nyquist * 0.9 and h <= 40:
            fh = h * f0
            gain = h ** (-params["tilt"]) * (1.0 + 2.0 * np.exp(-((fh - params["formant"]) / 500.0) ** 2))
            note += gain * np.sin(2 * np.pi * fh * tt + rng.uniform(0, 2 * np.pi))
            h += 1
        attack = np.minimum(1.0, tt / 0.02)
        release = np.minimum(1.0, (tt[::-1]) / 0.05)
        x[start:start + length] = note * attack * release
        start += length
    x *= 1.0 + 0.5 * np.sin(2 * np.pi * params["am_rate"] * t)
    x /= np.max(np.abs(x)) + 1e-12
    x += params["noise_level"] * _coloured_noise(n, params["noise_color"], rng)
    return 0.5 * x / (np.max(np.abs(x)) + 1e-12)


def synthesize_corpus(class_count: int, items_per_class: int, artists_per_class: int,
                      seed: int, out_dir, duration: float = 30.0) -> DatasetManifest:
    """Write ``class_count * items_per_class`` WAVs and ``manifest.csv``.

    Items are dealt round-robin to the artists of their class.
    """
    if class_count < 2 or items_per_class < 1 or artists_per_class < 1:
        raise DataError("need at least two classes, one item and one artist per class")
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    entries = []
    for k in range(class_count):
        label = class_name(k)
        base = _family(k, class_count)
        artists = [_artist(base, np.random.default_rng([seed, k, a, 0]))
                   for a in range(artists_per_class)]
        for i in range(items_per_class):
            a = i % artists_per_class
            rng = np.random.default_rng([seed, k, a, i + 1])
            x = synthesize_item(artists[a], duration, rng)
            rel = f"audio/{label}_a{a:02d}_{i:03d}.wav"
            store_audio(out_dir / rel, AudioSignal(x))
            entries.append(ManifestEntry(rel, label, f"{label}-artist{a:02d}"))
    manifest = DatasetManifest(entries, out_dir)
    (out_dir / "manifest.csv").write_text(manifest_text(manifest), encoding="utf-8")
    return manifest
