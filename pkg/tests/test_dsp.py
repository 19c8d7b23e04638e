import numpy as np
import pytest

from priorvoc import dsp


def tone(freq, seconds=1.0, sr=24000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return dsp.AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


# ---------------------------------------------------------------------------
# framing / STFT
# ---------------------------------------------------------------------------


def test_stft_zero_signal():
    Z = dsp.stft(dsp.AudioBuffer(np.zeros(4096), 24000))
    assert Z.shape == (1 + 4096 // 256, 513)
    assert np.all(Z == 0)


def test_stft_requires_power_of_two():
    with pytest.raises(ValueError):
        dsp.stft(tone(440), n_fft=1000, hop=256, win_length=1000)


def test_stft_bin_centered_sine_peak():
    sr, n_fft = 24000, 1024
    k = 20
    freq = k * sr / n_fft
    Z = dsp.stft(tone(freq, sr=sr), n_fft=n_fft, hop=256, win_length=n_fft)
    mags = np.abs(Z)
    for t in range(2, Z.shape[0] - 2):
        assert np.argmax(mags[t]) == k


def test_stft_energy_conservation():
    # Sum|STFT|^2 (one-sided, interior bins doubled) / n_fft equals the
    # windowed frame energy; for long stationary noise that tracks
    # T * sum(w^2) * mean(x^2) within 1%.
    rng = np.random.default_rng(99)
    x = rng.normal(size=48000) * 0.3
    n_fft, hop = 1024, 256
    Z, _ = dsp.stft_complex(x, n_fft, hop, n_fft)
    w = dsp.hann_window(n_fft)
    c = np.full(Z.shape[1], 2.0)
    c[0] = c[-1] = 1.0
    energy_spec = float(np.sum(c * np.abs(Z) ** 2) / n_fft)
    expected = Z.shape[0] * np.sum(w**2) * np.mean(x**2)
    assert abs(energy_spec - expected) / expected < 0.01


def test_stft_hop_shift_property():
    rng = np.random.default_rng(5)
    x = rng.normal(size=8192)
    hop = 256
    Z1, _ = dsp.stft_complex(x, 1024, hop, 1024)
    Z2, _ = dsp.stft_complex(x[hop:], 1024, hop, 1024)
    # frame t of the shifted signal equals frame t+1 of the original (interior)
    for t in range(3, Z2.shape[0] - 3):
        assert np.allclose(Z2[t], Z1[t + 1], atol=1e-6)


def test_stft_magnitude_gradient_matches_fd():
    rng = np.random.default_rng(11)
    x = rng.normal(size=300)
    gm = rng.normal(size=dsp.stft_magnitude(x, 64, 16, 64)[0].shape)
    _, cache = dsp.stft_magnitude(x, 64, 16, 64)
    gx = dsp.stft_magnitude_backward(cache, gm)
    eps = 1e-6
    for i in [0, 13, 150, 299]:
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        num = (np.sum(dsp.stft_magnitude(xp, 64, 16, 64)[0] * gm) - np.sum(dsp.stft_magnitude(xm, 64, 16, 64)[0] * gm)) / (2 * eps)
        assert abs(num - gx[i]) < 1e-5 * max(1.0, abs(num))


# ---------------------------------------------------------------------------
# mel
# ---------------------------------------------------------------------------


def test_log_mel_silence_floor():
    mel = dsp.log_mel(dsp.AudioBuffer(np.zeros(24000), 24000), dsp.MelConfig())
    assert np.all(mel.frames == np.log(1e-5))


def test_log_mel_frame_count_one_second():
    mel = dsp.log_mel(dsp.AudioBuffer(np.zeros(24000), 24000), dsp.MelConfig())
    # convention: T = 1 + floor(len / hop)
    assert mel.n_frames == 1 + 24000 // 256 == 94


def test_log_mel_rate_mismatch():
    with pytest.raises(ValueError):
        dsp.log_mel(dsp.AudioBuffer(np.zeros(8000), 8000), dsp.MelConfig())


def test_mel_filterbank_invariants():
    fb = dsp.mel_filterbank(24000, 1024, 80, 0.0, 12000.0)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    centers = dsp.mel_center_freqs(dsp.MelConfig())
    assert np.all(np.diff(centers) > 0)


def test_log_mel_440hz_band():
    cfg = dsp.MelConfig()
    mel = dsp.log_mel(tone(440.0), cfg)
    centers = dsp.mel_center_freqs(cfg)
    nearest = int(np.argmin(np.abs(centers - 440.0)))
    interior = np.argmax(mel.frames[2:-2], axis=1)
    assert np.all(interior == interior[0])
    assert interior[0] == nearest


# ---------------------------------------------------------------------------
# FIR design / resamplers
# ---------------------------------------------------------------------------


def test_lowpass_fir_dc_and_symmetry():
    h = dsp.design_lowpass_fir(0.5, 63, 8.0)
    assert abs(h.sum() - 1.0) <= 1e-9
    assert np.allclose(h, h[::-1], atol=0)


def test_lowpass_fir_rejects_even_taps():
    with pytest.raises(ValueError):
        dsp.design_lowpass_fir(0.5, 64, 8.0)
    with pytest.raises(ValueError):
        dsp.design_lowpass_fir(1.5, 63, 8.0)


def test_lowpass_fir_stopband_attenuation():
    h = dsp.design_lowpass_fir(0.5, 63, 8.0)
    w = 0.9 * np.pi
    H = abs(np.sum(h * np.exp(-1j * w * np.arange(63))))
    assert -20 * np.log10(H) >= 50.0


def test_resamplers_preserve_dc():
    c = np.full(512, 0.7)
    assert np.abs(dsp.upsample2_filtered(c) - 0.7).max() < 1e-6
    assert np.abs(dsp.downsample2_filtered(c) - 0.7).max() < 1e-6


def test_resampler_roundtrip_snr():
    n = 4096
    x = np.sin(2 * np.pi * 0.1 * np.arange(n))  # 0.2 * Nyquist
    y = dsp.downsample2_filtered(dsp.upsample2_filtered(x))
    snr = 10 * np.log10(np.sum(x**2) / np.sum((y - x) ** 2))
    assert snr > 50.0


def test_downsample_stopband():
    # 0.9 * input-Nyquist content must not fold into the decimated band
    n = 8192
    x = np.sin(2 * np.pi * 0.45 * np.arange(n))
    y = dsp.downsample2_filtered(x)
    atten = 10 * np.log10(np.mean(x**2) / max(np.mean(y**2), 1e-30))
    assert atten >= 40.0


def test_downsample_odd_length_rejected():
    with pytest.raises(ValueError):
        dsp.downsample2_filtered(np.zeros(11))


def test_resampler_adjoint_identities():
    rng = np.random.default_rng(3)
    for n in [64, 6, 2]:
        x = rng.normal(size=(3, n))
        yu = dsp.upsample2_filtered(x)
        g = rng.normal(size=yu.shape)
        lhs = np.sum(yu * g)
        rhs = np.sum(x * dsp.upsample2_backward(g))
        assert abs(lhs - rhs) < 1e-10 * max(abs(lhs), 1.0)

        x2 = rng.normal(size=(3, 2 * n))
        yd = dsp.downsample2_filtered(x2)
        g = rng.normal(size=yd.shape)
        lhs = np.sum(yd * g)
        rhs = np.sum(x2 * dsp.downsample2_backward(g))
        assert abs(lhs - rhs) < 1e-10 * max(abs(lhs), 1.0)


def test_edge_pad_matches_numpy():
    rng = np.random.default_rng(8)
    for mode in ["reflect", "symmetric"]:
        for n, pad in [(10, 3), (6, 16), (3, 7), (2, 9)]:
            x = rng.normal(size=(2, n))
            assert np.array_equal(dsp._pad_last(x, pad, mode), np.pad(x, ((0, 0), (pad, pad)), mode=mode))
            g = rng.normal(size=(2, n + 2 * pad))
            lhs = np.sum(dsp._pad_last(x, pad, mode) * g)
            rhs = np.sum(x * dsp._unpad_adjoint(g, n, pad, mode))
            assert abs(lhs - rhs) < 1e-10 * max(abs(lhs), 1.0)


# ---------------------------------------------------------------------------
# f0
# ---------------------------------------------------------------------------


def test_estimate_f0_pure_tone():
    f0, voiced = dsp.estimate_f0(tone(200.0))
    inner = slice(4, -4)
    assert np.all(voiced[inner])
    assert np.abs(f0[inner] - 200.0).max() < 2.0


def test_estimate_f0_white_noise_unvoiced():
    rng = np.random.default_rng(7)
    buf = dsp.AudioBuffer(0.1 * rng.normal(size=24000), 24000)
    _, voiced = dsp.estimate_f0(buf)
    assert (~voiced).mean() > 0.9


def test_estimate_f0_silence():
    f0, voiced = dsp.estimate_f0(dsp.AudioBuffer(np.zeros(4096), 24000))
    assert not voiced.any()
    assert np.all(f0 == 0.0)


def test_estimate_f0_scale_invariant():
    base = tone(220.0)
    ref_f0, ref_v = dsp.estimate_f0(base)
    for c in (0.1, 10.0):
        f0, v = dsp.estimate_f0(dsp.AudioBuffer(c * base.samples, 24000))
        assert np.array_equal(v, ref_v)
        assert np.allclose(f0, ref_f0, atol=1e-9)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        dsp.AudioBuffer(np.array([np.nan]), 24000)
    with pytest.raises(ValueError):
        dsp.AudioBuffer(np.zeros(10), 44100)
    with pytest.raises(ValueError):
        dsp.AudioBuffer(np.zeros((2, 10)), 24000)


def test_mel_config_validation():
    with pytest.raises(ValueError):
        dsp.MelConfig(fmax=13000.0)
    with pytest.raises(ValueError):
        dsp.MelConfig(win_length=2048)
