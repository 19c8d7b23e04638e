"""Signal-processing front-end: STFT, log-mel extraction, FIR design,
filtered 2x resamplers, and a basic autocorrelation f0 estimator.

All spectral analysis shares one framing convention: center=True with
reflected edges, frame count T = 1 + floor(len/hop), frame t centered at
sample t*hop.  The STFT magnitude path and the resamplers also expose their
exact adjoints so losses and networks can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

SUPPORTED_RATES = (8000, 16000, 22050, 24000)

LOG_MEL_FLOOR = 1e-5


@dataclass
class AudioBuffer:
    """Mono waveform samples (nominal [-1, 1]) plus sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"unsupported sample rate {self.sample_rate}; expected one of {SUPPORTED_RATES}")

    def __len__(self):
        return len(self.samples)


@dataclass
class MelConfig:
    n_fft: int = 1024
    hop: int = 256
    win_length: int = 1024
    n_mels: int = 80
    sample_rate: int = 24000
    fmin: float = 0.0
    fmax: float = 12000.0

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError("win_length must be <= n_fft")
        if self.hop > self.win_length:
            raise ValueError("hop must be <= win_length")
        if self.fmax > self.sample_rate / 2:
            raise ValueError("fmax must be <= Nyquist")


@dataclass
class MelSpectrogram:
    """T x n_mels matrix of natural-log mel magnitudes, floored at 1e-5."""

    frames: np.ndarray
    config: MelConfig

    @property
    def n_frames(self):
        return self.frames.shape[0]


def hann_window(n):
    """Periodic Hann window (sums to a constant at 50% overlap)."""
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def frame_count(n_samples, hop):
    return 1 + n_samples // hop


# ---------------------------------------------------------------------------
# edge padding with exact adjoints
# ---------------------------------------------------------------------------


def _mirror_indices(n, pad, mode):
    """Source index for each position of a (pad, pad)-padded length-n axis."""
    j = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(j)
    if mode == "reflect":
        period = 2 * (n - 1)
        jm = np.mod(j, period)
        return np.where(jm >= n, period - jm, jm)
    if mode == "symmetric":
        period = 2 * n
        jm = np.mod(j, period)
        return np.where(jm >= n, period - 1 - jm, jm)
    raise ValueError(mode)


def _pad_last(x, pad, mode):
    width = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, width, mode=mode)


def _unpad_adjoint(g, n, pad, mode):
    """Adjoint of _pad_last (fast fold when pad fits in one reflection)."""
    if pad == 0:
        return g.copy()
    if mode == "reflect" and 0 < pad <= n - 1:
        out = g[..., pad : pad + n].copy()
        out[..., 1 : pad + 1] += g[..., :pad][..., ::-1]
        out[..., n - 1 - pad : n - 1] += g[..., pad + n :][..., ::-1]
        return out
    if mode == "symmetric" and 0 < pad <= n:
        out = g[..., pad : pad + n].copy()
        out[..., :pad] += g[..., :pad][..., ::-1]
        out[..., n - pad :] += g[..., pad + n :][..., ::-1]
        return out
    idx = _mirror_indices(n, pad, mode)
    flat = g.reshape(-1, g.shape[-1])
    res = np.zeros((flat.shape[0], n), dtype=g.dtype)
    for r in range(flat.shape[0]):
        np.add.at(res[r], idx, flat[r])
    return res.reshape(g.shape[:-1] + (n,))


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def _check_n_fft(n_fft):
    if n_fft < 2 or (n_fft & (n_fft - 1)) != 0:
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")


def _stft_window(n_fft, win_length):
    w = hann_window(win_length)
    if win_length < n_fft:
        lpad = (n_fft - win_length) // 2
        w = np.pad(w, (lpad, n_fft - win_length - lpad))
    return w


def _frame_signal(samples, n_fft, hop):
    n = len(samples)
    pad = n_fft // 2
    xp = _pad_last(samples.astype(np.float64, copy=False), pad, "reflect")
    n_frames = frame_count(n, hop)
    frames = sliding_window_view(xp, n_fft)[:: hop][:n_frames]
    return frames, n_frames


def stft(x: AudioBuffer, n_fft=1024, hop=256, win_length=1024):
    """One-sided complex STFT, shape (T, n_fft//2 + 1), Hann window,
    center-padded with reflection; frame t is centered at sample t*hop."""
    Z, _ = stft_complex(x.samples, n_fft, hop, win_length)
    return Z


def stft_complex(samples, n_fft, hop, win_length):
    _check_n_fft(n_fft)
    if len(samples) < 1:
        raise ValueError("signal must contain at least one sample")
    window = _stft_window(n_fft, win_length)
    frames, n_frames = _frame_signal(samples, n_fft, hop)
    Z = np.fft.rfft(frames * window, axis=1)
    cache = {"n": len(samples), "n_fft": n_fft, "hop": hop, "window": window, "n_frames": n_frames}
    return Z, cache


def stft_magnitude(samples, n_fft, hop, win_length):
    """|STFT| with a cache for the adjoint w.r.t. the waveform."""
    Z, cache = stft_complex(samples, n_fft, hop, win_length)
    mag = np.abs(Z)
    cache["Z"] = Z
    cache["mag"] = mag
    return mag, cache


def _rfft_adjoint(g_spec, n_fft):
    """Exact adjoint of np.fft.rfft acting on real length-n_fft frames."""
    g = g_spec.copy()
    g[..., 1:-1] *= 0.5
    return n_fft * np.fft.irfft(g, n=n_fft, axis=-1)


def stft_magnitude_backward(cache, g_mag):
    """Chain a gradient w.r.t. |STFT| back to the waveform samples."""
    Z = cache["Z"]
    mag = cache["mag"]
    safe = np.maximum(mag, 1e-30)
    gZ = (g_mag / safe) * Z
    g_frames = _rfft_adjoint(gZ, cache["n_fft"]) * cache["window"]
    n, hop, n_fft = cache["n"], cache["hop"], cache["n_fft"]
    pad = n_fft // 2
    gxp = np.zeros(n + 2 * pad, dtype=np.float64)
    for t in range(cache["n_frames"]):
        gxp[t * hop : t * hop + n_fft] += g_frames[t]
    return _unpad_adjoint(gxp, n, pad, "reflect")


# ---------------------------------------------------------------------------
# mel filterbank
# ---------------------------------------------------------------------------

_MEL_CACHE = {}


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    """HTK-formula triangular filterbank (n_mels, n_fft//2+1), each triangle
    normalized to unit area over Hz."""
    key = (sample_rate, n_fft, n_mels, float(fmin), float(fmax))
    fb = _MEL_CACHE.get(key)
    if fb is not None:
        return fb
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - ctr, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    fb.flags.writeable = False
    _MEL_CACHE[key] = fb
    return fb


def mel_center_freqs(cfg: MelConfig):
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def log_mel(x: AudioBuffer, cfg: MelConfig) -> MelSpectrogram:
    """Natural-log mel spectrogram, log(max(melfb @ |STFT|, 1e-5))."""
    if x.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio rate {x.sample_rate} != mel config rate {cfg.sample_rate}")
    frames, _ = log_mel_arr(x.samples, cfg)
    return MelSpectrogram(frames=frames, config=cfg)


def log_mel_arr(samples, cfg: MelConfig):
    """Array-level log-mel with a cache for the adjoint."""
    mag, cache = stft_magnitude(samples, cfg.n_fft, cfg.hop, cfg.win_length)
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mel = mag @ fb.T
    frames = np.log(np.maximum(mel, LOG_MEL_FLOOR))
    cache["fb"] = fb
    cache["mel"] = mel
    return frames, cache


def log_mel_backward(cache, g_frames):
    """Chain a gradient w.r.t. log-mel frames back to the waveform."""
    mel = cache["mel"]
    g_mel = np.where(mel > LOG_MEL_FLOOR, g_frames / np.maximum(mel, LOG_MEL_FLOOR), 0.0)
    g_mag = g_mel @ cache["fb"]
    return stft_magnitude_backward(cache, g_mag)


# ---------------------------------------------------------------------------
# FIR design and 2x resamplers
# ---------------------------------------------------------------------------


def design_lowpass_fir(cutoff_ratio, n_taps, kaiser_beta):
    """Kaiser-windowed sinc low-pass: linear phase, taps sum to exactly 1.

    ``cutoff_ratio`` is the cutoff as a fraction of Nyquist at the rate the
    filter runs at.
    """
    if not 0.0 < cutoff_ratio < 1.0:
        raise ValueError("cutoff_ratio must lie strictly between 0 and 1")
    if n_taps % 2 == 0:
        raise ValueError("n_taps must be odd for a symmetric zero-delay filter")
    m = np.arange(n_taps) - (n_taps - 1) / 2
    h = cutoff_ratio * np.sinc(cutoff_ratio * m) * np.kaiser(n_taps, kaiser_beta)
    return h / h.sum()


_RESAMPLE_TAPS = design_lowpass_fir(0.5, 63, 8.0)
_RESAMPLE_TAPS.flags.writeable = False
_HALF_PAD = (len(_RESAMPLE_TAPS) - 1) // 2  # 31

# FFT of the (symmetric) resample taps, cached per transform length; the
# resamplers run in every anti-aliased activation, so recomputing the tap
# spectrum on each call is measurable.
_TAP_FFT_CACHE = {}


def _resample_conv_full(x, gain):
    """Full convolution of x with gain*taps along the last axis, cached-FFT."""
    from scipy import fft as sfft

    n = x.shape[-1]
    k = len(_RESAMPLE_TAPS)
    nf = sfft.next_fast_len(n + k - 1)
    key = (nf, np.dtype(x.dtype).char)
    tf = _TAP_FFT_CACHE.get(key)
    if tf is None:
        tf = sfft.rfft(_RESAMPLE_TAPS.astype(x.dtype, copy=False), n=nf)
        _TAP_FFT_CACHE[key] = tf
    spec = sfft.rfft(x, n=nf, axis=-1, workers=-1)
    spec *= tf
    y = sfft.irfft(spec, n=nf, axis=-1, workers=-1)[..., : n + k - 1]
    return (gain * y).astype(x.dtype, copy=False)


def _fir_valid(x, taps):
    """Valid-mode correlation along the last axis."""
    t = np.asarray(taps, dtype=x.dtype)[::-1]
    t = t.reshape((1,) * (x.ndim - 1) + (-1,))
    return fftconvolve(x, t, mode="valid", axes=-1)


def _resample_valid(x, gain):
    """Valid correlation with gain*taps (symmetric, so conv == correlation)."""
    k = len(_RESAMPLE_TAPS)
    return _resample_conv_full(x, gain)[..., k - 1 : x.shape[-1]]


def upsample2_filtered(x):
    """2x upsampling: zero-stuff then half-band low-pass (gain compensated).

    Works on the last axis; output length is exactly 2*len.  Edges are
    extended symmetrically before stuffing so DC is preserved at the ends.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    xp = _pad_last(x, _HALF_PAD // 2 + 1, "symmetric")  # 16 source samples
    z = np.zeros(xp.shape[:-1] + (2 * xp.shape[-1],), dtype=x.dtype)
    z[..., ::2] = xp
    y = _resample_valid(z, 2.0)
    return np.ascontiguousarray(y[..., 1 : 2 * n + 1])


def upsample2_backward(g):
    """Adjoint of upsample2_filtered."""
    g = np.asarray(g)
    n2 = g.shape[-1]
    n = n2 // 2
    pad = _HALF_PAD // 2 + 1
    gv = np.zeros(g.shape[:-1] + (n2 + 2,), dtype=g.dtype)
    gv[..., 1 : n2 + 1] = g
    gz = _resample_conv_full(gv, 2.0)
    gxp = gz[..., ::2]
    return _unpad_adjoint(np.ascontiguousarray(gxp), n, pad, "symmetric")


def downsample2_filtered(x):
    """2x decimation: half-band low-pass then keep every other sample."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n % 2:
        raise ValueError("downsample2_filtered needs an even-length input")
    xp = _pad_last(x, _HALF_PAD, "symmetric")
    y = _resample_valid(xp, 1.0)
    return np.ascontiguousarray(y[..., ::2])


def downsample2_backward(g):
    """Adjoint of downsample2_filtered."""
    g = np.asarray(g)
    n = 2 * g.shape[-1]
    gy = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    gy[..., ::2] = g
    gxp = _resample_conv_full(gy, 1.0)
    return _unpad_adjoint(gxp, n, _HALF_PAD, "symmetric")


# ---------------------------------------------------------------------------
# f0 estimation
# ---------------------------------------------------------------------------

F0_WINDOW = 1024
VOICING_THRESHOLD = 0.3


def estimate_f0(x: AudioBuffer, hop=256, fmin=50.0, fmax=1000.0):
    """Per-frame f0 by normalized-autocorrelation peak picking.

    Returns (f0, voiced): f0 in Hz per frame (0 where unvoiced), and a
    boolean voicing flag.  Framing matches the mel convention (centered,
    T = 1 + floor(len/hop)).
    """
    sr = x.sample_rate
    frames, n_frames = _frame_signal(x.samples, F0_WINDOW, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    w = F0_WINDOW

    lag_min = max(2, int(np.floor(sr / fmax)))
    lag_max = min(w - 2, int(np.ceil(sr / fmin)))

    # raw autocorrelation via FFT
    spec = np.fft.rfft(frames, n=2 * w, axis=1)
    r = np.fft.irfft(spec * np.conj(spec), axis=1)[:, :w]

    # McLeod-style normalization: 2*r[tau] / (E[0:w-tau] + E[tau:w])
    sq = np.cumsum(np.square(frames), axis=1)
    total = sq[:, -1:]
    taus = np.arange(w)
    e_head = np.where(taus == 0, total, np.take_along_axis(np.pad(sq, ((0, 0), (1, 0))), (w - taus)[None, :].repeat(n_frames, 0), axis=1))
    e_tail = total - np.take_along_axis(np.pad(sq, ((0, 0), (1, 0))), taus[None, :].repeat(n_frames, 0), axis=1)
    denom = e_head + e_tail
    norm = np.where(denom > 1e-12, 2.0 * r / np.maximum(denom, 1e-12), 0.0)

    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    energy = total[:, 0]

    for t in range(n_frames):
        band = norm[t, lag_min : lag_max + 1]
        gmax = band.max()
        if energy[t] < 1e-12 or gmax < VOICING_THRESHOLD:
            continue
        # periodic signals peak at every lag multiple; take the shortest local
        # maximum comparable to the global one to avoid octave-down errors
        is_peak = (band[1:-1] >= band[:-2]) & (band[1:-1] >= band[2:]) & (band[1:-1] >= 0.9 * gmax)
        cand = np.flatnonzero(is_peak)
        tau = (cand[0] + 1 + lag_min) if cand.size else (int(np.argmax(band)) + lag_min)
        # parabolic refinement around the integer-lag peak
        if 1 <= tau < w - 1:
            ym, y0, yp = norm[t, tau - 1], norm[t, tau], norm[t, tau + 1]
            denom_p = ym - 2.0 * y0 + yp
            delta = 0.5 * (ym - yp) / denom_p if abs(denom_p) > 1e-12 else 0.0
            delta = np.clip(delta, -0.5, 0.5)
        else:
            delta = 0.0
        voiced[t] = True
        f0[t] = sr / (tau + delta)
    return f0, voiced
