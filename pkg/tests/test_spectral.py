import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from advmca.spectral import (AudioSignal, ComplexSpectrogram, SpectralError, SpectralSequence,
                             StftConfig, analyse, epsilon_snr, full_spectrum, gl_project, hann,
                             istft, load_audio, load_sequence, magnitude_sequence,
                             perturbation_snr, render_frames, save_sequence, stft, store_audio,
                             total_norm)

from conftest import rel_err


def naive_stft(x, L, H):
    """Direct windowed DFT sums, one frame at a time."""
    U = (len(x) - L) // H + 1
    out = np.zeros((L // 2 + 1, U), dtype=complex)
    for u in range(U):
        for m in range(L // 2 + 1):
            acc = 0j
            for l in range(L):
                w = np.sin(np.pi * l / L) ** 2
                acc += x[u * H + l] * w * np.exp(-2j * np.pi * m * l / L)
            out[m, u] = acc
    return out


def test_hann_is_periodic():
    w = hann(8)
    assert w[0] == 0.0
    assert np.allclose(w, 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(8) / 8))


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(64)
    cfg = StftConfig(16, 8)
    S = stft(AudioSignal(x), cfg)
    assert S.bins.shape == (9, 7)
    np.testing.assert_allclose(S.bins, naive_stft(x, 16, 8), atol=1e-12)


def test_stft_default_shape_and_sinusoid_peak():
    n = 22050
    t = np.arange(n) / 22050
    f = 100 * 22050 / 1024  # exactly on bin 100
    S = stft(AudioSignal(np.sin(2 * np.pi * f * t)))
    assert S.bins.shape == (513, (n - 1024) // 512 + 1)
    mags = np.abs(S.bins)
    assert np.all(np.argmax(mags, axis=0) == 100)
    assert mags[100].mean() == pytest.approx(1024 / 4, rel=1e-6)


def test_short_signal_rejected():
    with pytest.raises(SpectralError):
        stft(AudioSignal(np.zeros(100)))


def test_full_spectrum_is_hermitian():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((16, 3))
    half = np.fft.rfft(x, axis=0)
    np.testing.assert_allclose(full_spectrum(half, 16), np.fft.fft(x, axis=0), atol=1e-12)


def test_istft_reconstructs_everything_but_the_first_sample():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(512 * 20 + 1024)
    y = istft(stft(AudioSignal(x))).samples
    assert y.shape == x.shape
    assert y[0] == 0.0
    np.testing.assert_allclose(y[1:], x[1:], atol=1e-10)


def test_overlap_normaliser_is_positive_but_not_constant():
    # squared periodic Hann windows at half overlap sum to sin^4 + cos^4
    L = 1024
    w2 = hann(L) ** 2
    total = w2[:512] + w2[512:]
    assert total.min() == pytest.approx(0.5, abs=1e-5)
    assert total.max() == pytest.approx(1.0)


@given(arrays(np.float64, st.integers(1024, 4096), elements=st.floats(-1, 1)))
def test_istft_is_a_left_inverse_on_the_covered_span(x):
    S = stft(AudioSignal(x))
    y = istft(S).samples
    n = y.shape[0]
    np.testing.assert_allclose(y[1:], x[1:n], atol=1e-9)


def test_istft_is_pseudo_inverse_on_consistent_spectra():
    rng = np.random.default_rng(3)
    S = stft(AudioSignal(rng.standard_normal(8192)))
    S2 = stft(istft(S))
    assert rel_err(S2.bins, S.bins) < 1e-12


def test_wrong_spectrum_height():
    with pytest.raises(SpectralError):
        ComplexSpectrogram(np.zeros((10, 3)))


def test_sequence_layout_round_trip():
    rng = np.random.default_rng(4)
    frames = rng.random((513, 23))
    phase = rng.uniform(-np.pi, np.pi, (513, 23))
    X = SpectralSequence.from_frames(frames, 5, phase)
    assert X.magnitudes.shape == (4, 513, 5)
    np.testing.assert_array_equal(X.frames(), frames[:, :20])
    np.testing.assert_array_equal(X.magnitudes[2], frames[:, 10:15])
    np.testing.assert_allclose(X.complex_frames(), frames[:, :20] * np.exp(1j * phase[:, :20]))


def test_round_off_negatives_are_clamped():
    m = np.ones((1, 513, 1))
    m[0, 3, 0] = -1e-9
    assert SpectralSequence(m).magnitudes.min() == 0.0
    m[0, 3, 0] = -1e-3
    with pytest.raises(SpectralError):
        SpectralSequence(m)


def test_sequence_rejects_bad_phase_and_nan():
    with pytest.raises(SpectralError):
        SpectralSequence(np.ones((2, 513, 1)), np.zeros((513, 3)))
    bad = np.ones((1, 513, 1))
    bad[0, 0, 0] = np.nan
    with pytest.raises(SpectralError):
        SpectralSequence(bad)


def test_magnitude_sequence_needs_enough_frames():
    S = stft(AudioSignal(np.zeros(4096)))
    with pytest.raises(SpectralError):
        magnitude_sequence(S, S.n_frames + 1)


def audio_sequence(seed, seconds=1.0, T=1):
    rng = np.random.default_rng(seed)
    return analyse(AudioSignal(rng.standard_normal(int(22050 * seconds)) * 0.1), T)


@pytest.mark.parametrize("T", [1, 4])
def test_gl_projection_fixes_audio_sequences(T):
    X = audio_sequence(5, T=T)
    Y = gl_project(X)
    assert rel_err(Y.magnitudes, X.magnitudes) < 1e-10


def test_gl_projection_is_idempotent_on_random_sequences():
    rng = np.random.default_rng(6)
    X = SpectralSequence(rng.random((30, 513, 1)), rng.uniform(-np.pi, np.pi, (513, 30)))
    Y = gl_project(X)
    assert rel_err(Y.magnitudes, X.magnitudes) > 1e-2  # random data is not valid
    Z = gl_project(Y)
    assert rel_err(Z.magnitudes, Y.magnitudes) < 1e-12


def test_gl_projection_needs_phase():
    with pytest.raises(SpectralError):
        gl_project(SpectralSequence(np.ones((2, 513, 1))))


def test_render_of_analysed_audio_matches_signal():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(22050) * 0.1
    X = analyse(AudioSignal(x), 1)
    y = render_frames(X).samples
    np.testing.assert_allclose(y[1:], x[1:len(y)], atol=1e-10)


def test_snr_arithmetic():
    X = audio_sequence(8)
    assert perturbation_snr(X, X) == float("inf")
    Y = X.with_magnitudes(X.magnitudes * 1.1)
    assert perturbation_snr(X, Y) == pytest.approx(20.0, abs=1e-9)
    eps = epsilon_snr(X, 20.0)
    assert eps * len(X) == pytest.approx(total_norm(X) / 10.0)
    with pytest.raises(SpectralError):
        perturbation_snr(X, SpectralSequence(np.ones((1, 513, 1))))


def test_audio_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    x = rng.uniform(-0.9, 0.9, 5000)
    store_audio(tmp_path / "a.wav", AudioSignal(x))
    y = load_audio(tmp_path / "a.wav")
    assert y.sample_rate == 22050
    assert np.max(np.abs(y.samples - x)) <= 0.5 / 32768 + 1e-12


def test_audio_clipping_on_write(tmp_path):
    store_audio(tmp_path / "c.wav", AudioSignal(np.array([2.0, -2.0, 0.0])))
    y = load_audio(tmp_path / "c.wav").samples
    np.testing.assert_allclose(y, [32767 / 32768, -1.0, 0.0])


def test_audio_format_checks(tmp_path):
    import wave
    path = tmp_path / "s.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(22050)
        wf.writeframes(b"\0" * 400)
    with pytest.raises(SpectralError, match="mono"):
        load_audio(path)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(44100)
        wf.writeframes(b"\0" * 400)
    with pytest.raises(SpectralError, match="sample rate"):
        load_audio(path)
    with pytest.raises(SpectralError):
        load_audio(tmp_path / "missing.wav")


def test_audio_rejects_non_finite():
    with pytest.raises(SpectralError):
        AudioSignal(np.array([0.0, np.inf]))
    with pytest.raises(SpectralError):
        AudioSignal(np.zeros((2, 2)))


def test_sequence_file_round_trip(tmp_path):
    X = audio_sequence(10, T=3)
    save_sequence(tmp_path / "x.spsq", X)
    Y = load_sequence(tmp_path / "x.spsq")
    np.testing.assert_array_equal(Y.magnitudes, X.magnitudes)
    np.testing.assert_array_equal(Y.phase, X.phase)
    assert Y.config == X.config
    Z = SpectralSequence(X.magnitudes)
    save_sequence(tmp_path / "z.spsq", Z)
    assert load_sequence(tmp_path / "z.spsq").phase is None


def test_sequence_file_corruption(tmp_path):
    X = audio_sequence(11)
    save_sequence(tmp_path / "x.spsq", X)
    data = (tmp_path / "x.spsq").read_bytes()
    (tmp_path / "bad.spsq").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(SpectralError, match="not a spectral"):
        load_sequence(tmp_path / "bad.spsq")
    (tmp_path / "short.spsq").write_bytes(data[:-8])
    with pytest.raises(SpectralError, match="bytes"):
        load_sequence(tmp_path / "short.spsq")
