"""Harmonic-plus-noise prior synthesizer and its control decoder.

The synthesizer turns frame-rate controls (f0, overall harmonic amplitude,
a distribution over harmonics, and noise-filter magnitudes) into audio:
a bank of phase-accumulated sinusoids plus linear-time-varying filtered
noise, overlap-added at the hop spacing.  Holding the phase track and the
noise realization fixed, the output is linear in the amplitude controls,
so the backward passes here are exact adjoints.

The control decoder is a small per-frame network mapping
[mel ‖ normalized log-f0 ‖ voiced] to the three amplitude-like controls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import nnops
from .dsp import AudioBuffer, MelSpectrogram, hann_window

N_HARMONICS = 64
N_NOISE_BINS = 65
DECODER_HIDDEN = 256

_EXP_SIGMOID_POWER = np.log(10.0)


@dataclass
class DdspControls:
    """Frame-rate synthesis controls.

    f0: (T,) Hz, 0 marks unvoiced frames.
    harmonic_amp: (T,) overall amplitude, >= 0.
    harmonic_dist: (T, K) non-negative rows summing to 1.
    noise_mags: (T, B) non-negative noise-filter magnitude response on B
        uniform bins spanning [0, Nyquist].
    """

    f0: np.ndarray
    harmonic_amp: np.ndarray
    harmonic_dist: np.ndarray
    noise_mags: np.ndarray

    def __post_init__(self):
        T = len(self.f0)
        if self.harmonic_amp.shape != (T,) or self.harmonic_dist.shape[0] != T or self.noise_mags.shape[0] != T:
            raise ValueError("control fields disagree on frame count")
        for name in ("f0", "harmonic_amp", "harmonic_dist", "noise_mags"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
            if np.any(v < 0):
                raise ValueError(f"{name} must be non-negative")
        sums = self.harmonic_dist.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("harmonic_dist rows must sum to 1")

    @property
    def n_frames(self):
        return len(self.f0)


# ---------------------------------------------------------------------------
# frame-rate -> sample-rate linear interpolation with adjoint
# ---------------------------------------------------------------------------


def _interp_plan(n_frames, hop):
    n = n_frames * hop
    pos = np.arange(n) / hop
    idx = np.minimum(pos.astype(np.int64), max(n_frames - 2, 0))
    w = np.clip(pos - idx, 0.0, 1.0)
    return idx, w


def _interp_apply(frames_last, idx, w):
    """Linear interp along the last axis from frame rate to sample rate."""
    return frames_last[..., idx] * (1.0 - w) + frames_last[..., np.minimum(idx + 1, frames_last.shape[-1] - 1)] * w


def _interp_adjoint(g, idx, w, n_frames):
    """Adjoint of _interp_apply for g shaped (..., N)."""
    hi = np.minimum(idx + 1, n_frames - 1)
    flat = g.reshape(-1, g.shape[-1])
    out = np.empty((flat.shape[0], n_frames), dtype=g.dtype)
    for r in range(flat.shape[0]):
        out[r] = np.bincount(idx, weights=flat[r] * (1.0 - w), minlength=n_frames)
        out[r] += np.bincount(hi, weights=flat[r] * w, minlength=n_frames)
    return out.reshape(g.shape[:-1] + (n_frames,))


# ---------------------------------------------------------------------------
# harmonic oscillator
# ---------------------------------------------------------------------------


def harmonic_forward(f0, harmonic_amp, harmonic_dist, sample_rate, hop):
    """Sum of phase-accumulated sinusoids; returns (samples, cache).

    Per-sample frequency is the linear interpolation of the frame f0 track;
    the phase of harmonic k is k times the accumulated base phase.
    Harmonics beyond Nyquist and unvoiced frames contribute nothing.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 < 0):
        raise ValueError("f0 must be non-negative")
    T = len(f0)
    K = harmonic_dist.shape[1]
    if K > 256:
        raise ValueError("harmonic count above 256 is unsupported")
    idx, w = _interp_plan(T, hop)

    voiced = (f0 > 0.0).astype(np.float64)
    amp_frames = (harmonic_amp * voiced)[None, :] * harmonic_dist.T  # (K, T)
    a = _interp_apply(amp_frames, idx, w)  # (K, N)

    f0_n = _interp_apply(f0, idx, w)
    base_phase = 2.0 * np.pi * np.cumsum(f0_n) / sample_rate
    k = np.arange(1, K + 1, dtype=np.float64)
    sinus = np.sin(np.mod(k[:, None] * base_phase[None, :], 2.0 * np.pi))
    mask = (k[:, None] * f0_n[None, :] <= sample_rate / 2.0) & (f0_n[None, :] > 0.0)
    sinmask = sinus * mask

    samples = np.einsum("kn,kn->n", a, sinmask)
    cache = {
        "sinmask": sinmask,
        "idx": idx,
        "w": w,
        "T": T,
        "amp": harmonic_amp,
        "dist": harmonic_dist,
        "voiced": voiced,
    }
    return samples, cache


def harmonic_backward(cache, g):
    """Adjoint w.r.t. (harmonic_amp, harmonic_dist); phase is held fixed."""
    g_a = g[None, :] * cache["sinmask"]  # (K, N)
    g_frames = _interp_adjoint(g_a, cache["idx"], cache["w"], cache["T"])  # (K, T)
    voiced = cache["voiced"]
    g_amp = np.einsum("kt,tk->t", g_frames, cache["dist"]) * voiced
    g_dist = g_frames.T * (cache["amp"] * voiced)[:, None]
    return g_amp, g_dist


def harmonic_oscillator(f0, harmonic_amp, harmonic_dist, sample_rate, hop) -> AudioBuffer:
    samples, _ = harmonic_forward(f0, harmonic_amp, harmonic_dist, sample_rate, hop)
    return AudioBuffer(samples, sample_rate)


# ---------------------------------------------------------------------------
# filtered noise
# ---------------------------------------------------------------------------


def _irfft_adjoint(g_time, n):
    """Adjoint of np.fft.irfft(mags, n) for real magnitude inputs."""
    R = np.fft.rfft(g_time, n=n, axis=-1).real
    R *= 2.0 / n
    R[..., 0] *= 0.5
    R[..., -1] *= 0.5
    return R


def noise_forward(noise_mags, sample_rate, hop, seed):
    """Per-frame zero-phase FIR filtering of seeded white noise, overlap-added
    with periodic Hann synthesis windows at hop spacing; returns (samples, cache)."""
    noise_mags = np.asarray(noise_mags, dtype=np.float64)
    if np.any(noise_mags < 0):
        raise ValueError("noise magnitudes must be non-negative")
    T, B = noise_mags.shape
    n_ir = 2 * (B - 1)
    half = n_ir // 2
    L = 2 * hop
    N = T * hop

    ir = np.fft.irfft(noise_mags, n=n_ir, axis=1)
    ir = np.roll(ir, half, axis=1) * np.hanning(n_ir)

    rng = np.random.default_rng(seed)
    u = rng.standard_normal((T, L))
    v = fftconvolve(u, ir, mode="same", axes=1)
    syn = hann_window(L)
    seg = v * syn

    padded = np.zeros(N + 2 * hop, dtype=np.float64)
    for t in range(T):
        padded[t * hop : t * hop + L] += seg[t]
    samples = padded[hop : hop + N]
    cache = {"u": u, "T": T, "B": B, "hop": hop, "syn": syn, "n_ir": n_ir}
    return samples, cache


def noise_backward(cache, g):
    """Adjoint w.r.t. noise_mags; the noise realization is held fixed."""
    T, hop, n_ir = cache["T"], cache["hop"], cache["n_ir"]
    B = cache["B"]
    L = 2 * hop
    half = n_ir // 2
    N = T * hop
    gpad = np.zeros(N + 2 * hop, dtype=np.float64)
    gpad[hop : hop + N] = g
    g_seg = np.stack([gpad[t * hop : t * hop + L] for t in range(T)])
    g_v = g_seg * cache["syn"]
    # v = fftconvolve(u, ir, 'same'): v[i] = sum_k u[k] ir[i + (n_ir-1)//2 - k]
    off = (n_ir - 1) // 2
    g_full = np.zeros((T, L + n_ir - 1), dtype=np.float64)
    g_full[:, off : off + L] = g_v
    u_flip = cache["u"][:, ::-1]
    g_ir = fftconvolve(g_full, u_flip, mode="valid", axes=1)  # (T, n_ir)
    g_ir = g_ir * np.hanning(n_ir)
    g_ir = np.roll(g_ir, -half, axis=1)
    return _irfft_adjoint(g_ir, n_ir)[:, :B]


def filtered_noise(noise_mags, sample_rate, hop, seed) -> AudioBuffer:
    samples, _ = noise_forward(noise_mags, sample_rate, hop, seed)
    return AudioBuffer(samples, sample_rate)


# ---------------------------------------------------------------------------
# full synthesizer
# ---------------------------------------------------------------------------


def synth_forward(controls: DdspControls, sample_rate, hop, seed):
    sh, hc = harmonic_forward(controls.f0, controls.harmonic_amp, controls.harmonic_dist, sample_rate, hop)
    sn, nc = noise_forward(controls.noise_mags, sample_rate, hop, seed)
    return sh + sn, {"harmonic": hc, "noise": nc}


def synth_backward(cache, g):
    g_amp, g_dist = harmonic_backward(cache["harmonic"], g)
    g_noise = noise_backward(cache["noise"], g)
    return g_amp, g_dist, g_noise


def ddsp_synthesize(controls: DdspControls, sample_rate, hop, seed) -> AudioBuffer:
    """Harmonic plus filtered-noise synthesis; output length is T*hop."""
    samples, _ = synth_forward(controls, sample_rate, hop, seed)
    return AudioBuffer(samples, sample_rate)


# ---------------------------------------------------------------------------
# control decoder
# ---------------------------------------------------------------------------


def exp_sigmoid(x):
    """2 * sigmoid(x)**ln(10) + 1e-7: smooth positive amplitude activation."""
    s = _sigmoid(x)
    return 2.0 * s**_EXP_SIGMOID_POWER + 1e-7


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _exp_sigmoid_grad(x):
    s = _sigmoid(x)
    return 2.0 * _EXP_SIGMOID_POWER * s**_EXP_SIGMOID_POWER * (1.0 - s)


@dataclass
class DecoderParams:
    """Weights of the per-frame control decoder (dense layers as 1x1 convs)."""

    w1: nnops.Parameter
    b1: nnops.Parameter
    w2: nnops.Parameter
    b2: nnops.Parameter
    w_amp: nnops.Parameter
    b_amp: nnops.Parameter
    w_dist: nnops.Parameter
    b_dist: nnops.Parameter
    w_noise: nnops.Parameter
    b_noise: nnops.Parameter

    def named_params(self):
        return [(name, getattr(self, name)) for name in (
            "w1", "b1", "w2", "b2", "w_amp", "b_amp", "w_dist", "b_dist", "w_noise", "b_noise")]

    def params(self):
        return [p for _, p in self.named_params()]


def init_decoder_params(seed=0, n_mels=80, hidden=DECODER_HIDDEN,
                        n_harmonics=N_HARMONICS, n_noise_bins=N_NOISE_BINS,
                        dtype=np.float32) -> DecoderParams:
    rng = np.random.default_rng([seed, 0xDEC0DE])
    n_in = n_mels + 2

    def conv_init(c_out, c_in):
        return nnops.Parameter(nnops.uniform_init(rng, (c_out, c_in, 1), c_in, dtype))

    def bias_init(c_out, c_in):
        return nnops.Parameter(nnops.uniform_init(rng, (c_out,), c_in, dtype))

    return DecoderParams(
        w1=conv_init(hidden, n_in), b1=bias_init(hidden, n_in),
        w2=conv_init(hidden, hidden), b2=bias_init(hidden, hidden),
        w_amp=conv_init(1, hidden), b_amp=bias_init(1, hidden),
        w_dist=conv_init(n_harmonics, hidden), b_dist=bias_init(n_harmonics, hidden),
        w_noise=conv_init(n_noise_bins, hidden), b_noise=bias_init(n_noise_bins, hidden),
    )


def _normalized_log_f0(f0, voiced):
    lo, hi = np.log(50.0), np.log(1000.0)
    safe = np.log(np.maximum(f0, 1e-3))
    return np.where(voiced, (safe - lo) / (hi - lo), 0.0)


def decoder_forward(mel, f0, sample_rate, params: DecoderParams):
    """Map (mel frames, f0 track) to DdspControls; returns (controls, cache).

    Heads: overall amplitude and noise magnitudes through exp_sigmoid;
    harmonic distribution through a softmax followed by Nyquist masking and
    renormalization (the fundamental is never masked, which keeps every row
    a valid distribution).
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    f0 = np.asarray(f0, dtype=np.float64)
    if frames.shape[0] != len(f0):
        raise ValueError(f"mel has {frames.shape[0]} frames but f0 has {len(f0)}")
    voiced = f0 > 0.0
    dtype = params.w1.value.dtype
    x = np.concatenate(
        [frames.T, _normalized_log_f0(f0, voiced)[None, :], voiced[None, :].astype(np.float64)], axis=0
    ).astype(dtype)

    pre1 = nnops.conv1d_forward(x, params.w1.value, params.b1.value)
    h1 = nnops.leaky_relu_forward(pre1)
    pre2 = nnops.conv1d_forward(h1, params.w2.value, params.b2.value)
    h2 = nnops.leaky_relu_forward(pre2)

    amp_pre = nnops.conv1d_forward(h2, params.w_amp.value, params.b_amp.value)[0]
    amp = exp_sigmoid(amp_pre)

    dist_pre = nnops.conv1d_forward(h2, params.w_dist.value, params.b_dist.value)  # (K, T)
    z = dist_pre - dist_pre.max(axis=0, keepdims=True)
    ez = np.exp(z)
    soft = ez / ez.sum(axis=0, keepdims=True)
    k = np.arange(1, dist_pre.shape[0] + 1)
    mask = (k[:, None] * f0[None, :] <= sample_rate / 2.0) | (k[:, None] == 1)
    masked = soft * mask
    total = masked.sum(axis=0, keepdims=True)
    dist = masked / total

    noise_pre = nnops.conv1d_forward(h2, params.w_noise.value, params.b_noise.value)  # (B, T)
    noise = exp_sigmoid(noise_pre)

    controls = DdspControls(
        f0=f0,
        harmonic_amp=amp.astype(np.float64),
        harmonic_dist=dist.T.astype(np.float64),
        noise_mags=noise.T.astype(np.float64),
    )
    cache = {
        "x": x, "pre1": pre1, "h1": h1, "pre2": pre2, "h2": h2,
        "amp_pre": amp_pre, "soft": soft, "mask": mask, "total": total, "dist": dist,
        "noise_pre": noise_pre,
    }
    return controls, cache


def decoder_backward(cache, g_amp, g_dist, g_noise, params: DecoderParams):
    """Accumulate decoder parameter gradients from gradients on the controls."""
    h2 = cache["h2"]
    dtype = h2.dtype

    g_amp_pre = (np.asarray(g_amp) * _exp_sigmoid_grad(cache["amp_pre"].astype(np.float64))).astype(dtype)[None, :]
    g_h2, gw, gb = nnops.conv1d_backward(h2, params.w_amp.value, g_amp_pre)
    params.w_amp.grad += gw
    params.b_amp.grad += gb

    # renormalized masked softmax
    g_y = np.asarray(g_dist).T  # (K, T)
    dist, total, mask, soft = cache["dist"], cache["total"], cache["mask"], cache["soft"]
    g_masked = (g_y - (g_y * dist).sum(axis=0, keepdims=True)) / total
    g_soft = g_masked * mask
    g_dist_pre = (soft * (g_soft - (g_soft * soft).sum(axis=0, keepdims=True))).astype(dtype)
    gh, gw, gb = nnops.conv1d_backward(h2, params.w_dist.value, g_dist_pre)
    g_h2 = g_h2 + gh
    params.w_dist.grad += gw
    params.b_dist.grad += gb

    g_noise_pre = (np.asarray(g_noise).T * _exp_sigmoid_grad(cache["noise_pre"].astype(np.float64))).astype(dtype)
    gh, gw, gb = nnops.conv1d_backward(h2, params.w_noise.value, g_noise_pre)
    g_h2 = g_h2 + gh
    params.w_noise.grad += gw
    params.b_noise.grad += gb

    g_pre2 = nnops.leaky_relu_backward(cache["pre2"], g_h2)
    g_h1, gw, gb = nnops.conv1d_backward(cache["h1"], params.w2.value, g_pre2)
    params.w2.grad += gw
    params.b2.grad += gb

    g_pre1 = nnops.leaky_relu_backward(cache["pre1"], g_h1)
    _, gw, gb = nnops.conv1d_backward(cache["x"], params.w1.value, g_pre1)
    params.w1.grad += gw
    params.b1.grad += gb
