"""Discriminator stack: multi-period (reshaped-2D), multi-scale over
orthonormal wavelet sub-bands (energy-preserving, unlike average pooling),
and multi-resolution spectrogram discriminators.

Each family exposes a batched forward returning per-subdiscriminator logits
and per-layer feature maps, plus a backward that accumulates parameter
gradients and chains logit/feature gradients back to the input waveform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp, nnops
from .dwt import dwt_analysis

LEAKY_SLOPE = 0.1

MPD_PERIODS = (2, 3, 5, 7, 11)
MPD_CHANNELS = (8, 16, 32, 64, 64)
MPD_STRIDES = ((3, 1), (3, 1), (3, 1), (3, 1), (1, 1))

# (out_ch, kernel, stride, padding, groups)
MSD_LAYERS = (
    (16, 15, 2, 7, 1),
    (32, 21, 4, 10, 4),
    (64, 21, 4, 10, 8),
    (64, 21, 4, 10, 16),
    (64, 21, 2, 10, 16),
    (64, 5, 1, 2, 1),
)

MRD_RESOLUTIONS = ((512, 128, 512), (1024, 256, 1024), (2048, 512, 2048))
MRD_CHANNELS = (4, 8, 16, 32, 32)
MRD_KERNELS = ((3, 5), (3, 5), (3, 5), (3, 5), (3, 3))
MRD_STRIDES = ((1, 1), (1, 2), (2, 2), (2, 2), (1, 1))


@dataclass
class DiscriminatorOutput:
    """Per-subdiscriminator score tensors and per-layer feature maps."""

    logits: list
    feature_maps: list


@dataclass
class SubParams:
    convs: list  # [(w Parameter, b Parameter), ...], post conv last

    def named_params(self, prefix):
        out = []
        for i, (w, b) in enumerate(self.convs):
            out += [(f"{prefix}.l{i}.w", w), (f"{prefix}.l{i}.b", b)]
        return out


def _conv_param(rng, shape, dtype):
    fan = int(np.prod(shape[1:]))
    return (
        nnops.Parameter(nnops.uniform_init(rng, shape, fan, dtype)),
        nnops.Parameter(nnops.uniform_init(rng, (shape[0],), fan, dtype)),
    )


def init_mpd_params(seed=0, dtype=np.float32):
    rng = np.random.default_rng([seed, 0x390D])
    subs = []
    for _ in MPD_PERIODS:
        convs = []
        c_in = 1
        for c_out in MPD_CHANNELS:
            convs.append(_conv_param(rng, (c_out, c_in, 5, 1), dtype))
            c_in = c_out
        convs.append(_conv_param(rng, (1, c_in, 3, 1), dtype))
        subs.append(SubParams(convs))
    return subs


def init_msd_params(seed=0, dtype=np.float32):
    rng = np.random.default_rng([seed, 0x35D])
    subs = []
    for c_in0 in (1, 2, 4):
        convs = []
        c_in = c_in0
        for c_out, k, _s, _p, g in MSD_LAYERS:
            groups = g if c_in % g == 0 and c_out % g == 0 else 1
            convs.append(_conv_param(rng, (c_out, c_in // groups, k), dtype))
            c_in = c_out
        convs.append(_conv_param(rng, (1, c_in, 3), dtype))
        subs.append(SubParams(convs))
    return subs


def init_mrd_params(seed=0, dtype=np.float32):
    rng = np.random.default_rng([seed, 0x39D])
    subs = []
    for _ in MRD_RESOLUTIONS:
        convs = []
        c_in = 1
        for c_out, k in zip(MRD_CHANNELS, MRD_KERNELS):
            convs.append(_conv_param(rng, (c_out, c_in, k[0], k[1]), dtype))
            c_in = c_out
        convs.append(_conv_param(rng, (1, c_in, 3, 3), dtype))
        subs.append(SubParams(convs))
    return subs


# ---------------------------------------------------------------------------
# shared conv-stack machinery
# ---------------------------------------------------------------------------


def _stack2d_forward(x, sub: SubParams, strides, pads):
    feats = []
    acts = []
    for (w, b), s, p in zip(sub.convs[:-1], strides, pads):
        pre = nnops.conv2d_forward(x, w.value, b.value, stride=s, padding=p)
        acts.append((x, pre))
        x = nnops.leaky_relu_forward(pre, LEAKY_SLOPE)
        feats.append(x)
    w, b = sub.convs[-1]
    pre = nnops.conv2d_forward(x, w.value, b.value, stride=(1, 1), padding=pads[-1])
    acts.append((x, pre))
    feats.append(pre)
    return pre, feats, acts


def _stack2d_backward(sub: SubParams, strides, pads, acts, g_logit, g_feats):
    w, b = sub.convs[-1]
    x_in, _pre = acts[-1]
    g = g_logit if g_feats is None else g_logit + g_feats[-1]
    g, gw, gb = nnops.conv2d_backward(x_in, w.value, g, stride=(1, 1), padding=pads[-1])
    w.grad += gw
    b.grad += gb
    for i in range(len(sub.convs) - 2, -1, -1):
        if g_feats is not None:
            g = g + g_feats[i]
        x_in, pre = acts[i]
        g = nnops.leaky_relu_backward(pre, g, LEAKY_SLOPE)
        w, b = sub.convs[i]
        g, gw, gb = nnops.conv2d_backward(x_in, w.value, g, stride=strides[i], padding=pads[i])
        w.grad += gw
        b.grad += gb
    return g


def _stack1d_forward(x, sub: SubParams, specs):
    feats = []
    acts = []
    for (w, b), (_c, _k, s, p, g) in zip(sub.convs[:-1], specs):
        groups = _actual_groups(w.value, x.shape[-2], g)
        pre = nnops.conv1d_forward(x, w.value, b.value, stride=s, padding=p, groups=groups)
        acts.append((x, pre, s, p, groups))
        x = nnops.leaky_relu_forward(pre, LEAKY_SLOPE)
        feats.append(x)
    w, b = sub.convs[-1]
    pre = nnops.conv1d_forward(x, w.value, b.value, padding=1)
    acts.append((x, pre, 1, 1, 1))
    feats.append(pre)
    return pre, feats, acts


def _actual_groups(w, c_in, requested):
    return requested if (c_in % requested == 0 and w.shape[0] % requested == 0 and w.shape[1] * requested == c_in) else 1


def _stack1d_backward(sub: SubParams, acts, g_logit, g_feats):
    w, b = sub.convs[-1]
    x_in, _pre, s, p, groups = acts[-1]
    g = g_logit if g_feats is None else g_logit + g_feats[-1]
    g, gw, gb = nnops.conv1d_backward(x_in, w.value, g, stride=s, padding=p, groups=groups)
    w.grad += gw
    b.grad += gb
    for i in range(len(sub.convs) - 2, -1, -1):
        if g_feats is not None:
            g = g + g_feats[i]
        x_in, pre, s, p, groups = acts[i]
        g = nnops.leaky_relu_backward(pre, g, LEAKY_SLOPE)
        w, b = sub.convs[i]
        g, gw, gb = nnops.conv1d_backward(x_in, w.value, g, stride=s, padding=p, groups=groups)
        w.grad += gw
        b.grad += gb
    return g


# ---------------------------------------------------------------------------
# MPD
# ---------------------------------------------------------------------------

_MPD_PADS = [(2, 0)] * len(MPD_CHANNELS) + [(1, 0)]


def mpd_forward_batch(x, params):
    """x: (B, N) waveforms. Returns (DiscriminatorOutput, cache)."""
    x = np.atleast_2d(np.asarray(x))
    B, N = x.shape
    logits, fmaps, caches = [], [], []
    for period, sub in zip(MPD_PERIODS, params):
        pad = (-N) % period
        xp = np.pad(x, ((0, 0), (0, pad))) if pad else x
        img = xp.reshape(B, 1, (N + pad) // period, period)
        out, feats, acts = _stack2d_forward(img, sub, MPD_STRIDES, _MPD_PADS)
        logits.append(out)
        fmaps.append(feats)
        caches.append((acts, pad, period))
    return DiscriminatorOutput(logits, fmaps), {"subs": caches, "shape": (B, N)}


def mpd_backward_batch(params, cache, g_logits, g_feats=None):
    B, N = cache["shape"]
    g_x = np.zeros((B, N))
    for i, (sub, (acts, pad, period)) in enumerate(zip(params, cache["subs"])):
        gf = g_feats[i] if g_feats is not None else None
        g_img = _stack2d_backward(sub, MPD_STRIDES, _MPD_PADS, acts, g_logits[i], gf)
        flat = g_img.reshape(B, -1)
        g_x += flat[:, :N]
    return g_x


def mpd_forward(x, params):
    out, cache = mpd_forward_batch(np.asarray(x)[None], params)
    return DiscriminatorOutput([l[0] for l in out.logits], [[f[0] for f in fs] for fs in out.feature_maps]), cache


# ---------------------------------------------------------------------------
# MSD
# ---------------------------------------------------------------------------


def _msd_representations(x):
    """Raw waveform plus 1- and 2-level orthonormal sub-band stacks."""
    B, N = x.shape
    pad = (-N) % 4
    xp = np.pad(x, ((0, 0), (0, pad))) if pad else x
    a1, d1 = dwt_analysis(xp)
    rep1 = np.stack([a1, d1], axis=1)  # (B, 2, N/2)
    aa, ad = dwt_analysis(a1)
    da, dd = dwt_analysis(d1)
    rep2 = np.stack([aa, ad, da, dd], axis=1)  # (B, 4, N/4)
    return [xp[:, None, :], rep1, rep2], pad


def msd_dwt_forward_batch(x, params, check_energy=False):
    """x: (B, N). Three subdiscriminators on raw / 2-band / 4-band inputs."""
    x = np.atleast_2d(np.asarray(x))
    reps, pad = _msd_representations(x)
    if check_energy:
        e0 = float(np.sum(x**2))
        for rep in reps[1:]:
            e = float(np.sum(rep**2))
            assert abs(e - e0) <= 1e-8 * max(e0, 1.0), "sub-band energy drifted from waveform energy"
    logits, fmaps, caches = [], [], []
    for rep, sub in zip(reps, params):
        out, feats, acts = _stack1d_forward(rep, sub, MSD_LAYERS)
        logits.append(out)
        fmaps.append(feats)
        caches.append(acts)
    return DiscriminatorOutput(logits, fmaps), {"subs": caches, "pad": pad, "shape": x.shape}


def msd_dwt_backward_batch(params, cache, g_logits, g_feats=None):
    B, N = cache["shape"]
    pad = cache["pad"]
    g_x = np.zeros((B, N + pad))
    inv = 1.0 / np.sqrt(2.0)
    for i, (sub, acts) in enumerate(zip(params, cache["subs"])):
        gf = g_feats[i] if g_feats is not None else None
        g_rep = _stack1d_backward(sub, acts, g_logits[i], gf)
        if i == 0:
            g_x += g_rep[:, 0, :]
        elif i == 1:
            ga, gd = g_rep[:, 0], g_rep[:, 1]
            g_x[:, ::2] += (ga + gd) * inv
            g_x[:, 1::2] += (ga - gd) * inv
        else:
            gaa, gad, gda, gdd = (g_rep[:, j] for j in range(4))
            ga = np.empty((B, (N + pad) // 2))
            gd = np.empty_like(ga)
            ga[:, ::2] = (gaa + gad) * inv
            ga[:, 1::2] = (gaa - gad) * inv
            gd[:, ::2] = (gda + gdd) * inv
            gd[:, 1::2] = (gda - gdd) * inv
            g_x[:, ::2] += (ga + gd) * inv
            g_x[:, 1::2] += (ga - gd) * inv
    return g_x[:, :N]


def msd_dwt_forward(x, params, check_energy=False):
    out, cache = msd_dwt_forward_batch(np.asarray(x)[None], params, check_energy)
    return DiscriminatorOutput([l[0] for l in out.logits], [[f[0] for f in fs] for fs in out.feature_maps]), cache


# ---------------------------------------------------------------------------
# MRD
# ---------------------------------------------------------------------------

_MRD_PADS = [(k[0] // 2, k[1] // 2) for k in MRD_KERNELS] + [(1, 1)]


def mrd_forward_batch(x, params):
    """x: (B, N). Subdiscriminators on magnitude spectrograms at three
    STFT resolutions; the magnitudes stay differentiable w.r.t. x."""
    x = np.atleast_2d(np.asarray(x))
    B, N = x.shape
    logits, fmaps, caches = [], [], []
    for (n_fft, hop, win), sub in zip(MRD_RESOLUTIONS, params):
        mags, mag_caches = [], []
        for b in range(B):
            m, c = dsp.stft_magnitude(x[b], n_fft, hop, win)
            mags.append(m)
            mag_caches.append(c)
        img = np.stack(mags)[:, None, :, :].astype(sub.convs[0][0].value.dtype)
        out, feats, acts = _stack2d_forward(img, sub, MRD_STRIDES, _MRD_PADS)
        logits.append(out)
        fmaps.append(feats)
        caches.append((acts, mag_caches))
    return DiscriminatorOutput(logits, fmaps), {"subs": caches, "shape": (B, N)}


def mrd_backward_batch(params, cache, g_logits, g_feats=None):
    B, N = cache["shape"]
    g_x = np.zeros((B, N))
    for i, (sub, (acts, mag_caches)) in enumerate(zip(params, cache["subs"])):
        gf = g_feats[i] if g_feats is not None else None
        g_img = _stack2d_backward(sub, MRD_STRIDES, _MRD_PADS, acts, g_logits[i], gf)
        for b in range(B):
            g_x[b] += dsp.stft_magnitude_backward(mag_caches[b], g_img[b, 0])
    return g_x


def mrd_forward(x, params):
    out, cache = mrd_forward_batch(np.asarray(x)[None], params)
    return DiscriminatorOutput([l[0] for l in out.logits], [[f[0] for f in fs] for fs in out.feature_maps]), cache


# ---------------------------------------------------------------------------
# combined set
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorSet:
    mpd: list
    msd: list
    mrd: list

    def named_params(self):
        out = []
        for fam, subs in (("mpd", self.mpd), ("msd", self.msd), ("mrd", self.mrd)):
            for i, sub in enumerate(subs):
                out += sub.named_params(f"{fam}.sub{i}")
        return out

    def params(self):
        return [p for _, p in self.named_params()]


def init_discriminators(seed=0, dtype=np.float32) -> DiscriminatorSet:
    return DiscriminatorSet(
        mpd=init_mpd_params(seed, dtype),
        msd=init_msd_params(seed + 1, dtype),
        mrd=init_mrd_params(seed + 2, dtype),
    )
