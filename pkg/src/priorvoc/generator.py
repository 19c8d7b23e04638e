"""Mel-to-waveform generator: four transposed-convolution upsampling blocks
with anti-aliased Snake residual modules, plus two ways of injecting the
coarse prior signal (v1: summed onto the output; v2: wavelet-downsampled
and added at each block input through a learned 1x1 broadcast).

The forward pass records a tape of backward closures, so the backward pass
is the exact adjoint of whatever actually ran.  Snake alphas are stored in
the log domain to stay positive under optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp, nnops
from .dsp import AudioBuffer, MelSpectrogram
from .dwt import build_prior_pyramid, pyramid_backward


@dataclass
class GeneratorConfig:
    upsample_rates: tuple = (8, 8, 2, 2)
    upsample_kernel_sizes: tuple = (16, 16, 4, 4)
    base_channels: int = 128
    amp_kernel_sizes: tuple = (3, 7, 11)
    amp_dilations: tuple = (1, 3, 5)
    variant: str = "v2"
    n_mels: int = 80

    def __post_init__(self):
        if int(np.prod(self.upsample_rates)) != 256:
            raise ValueError("upsample rates must multiply to the 256-sample hop")
        for k, r in zip(self.upsample_kernel_sizes, self.upsample_rates):
            if k < r or (k - r) % 2:
                raise ValueError("each transposed-conv kernel must be >= its stride with even overlap")
        if self.variant not in ("v1", "v2"):
            raise ValueError("variant must be 'v1' or 'v2'")
        if self.base_channels % 2 ** len(self.upsample_rates):
            raise ValueError("base_channels must keep a whole channel after halving at every block")

    @property
    def channels(self):
        """Channel width entering each block (halving after every block)."""
        return [self.base_channels // 2**i for i in range(len(self.upsample_rates) + 1)]


@dataclass
class AmpUnit:
    """One dilated residual unit: aasnake -> conv(k, d) -> aasnake -> conv(k, 1)."""

    w1: nnops.Parameter
    b1: nnops.Parameter
    log_alpha1: nnops.Parameter
    w2: nnops.Parameter
    b2: nnops.Parameter
    log_alpha2: nnops.Parameter
    kernel: int
    dilation: int


@dataclass
class BlockParams:
    up_w: nnops.Parameter
    up_b: nnops.Parameter
    inject_w: nnops.Parameter | None
    amp: list  # [kernel_branch][dilation] -> AmpUnit


@dataclass
class GeneratorParams:
    config: GeneratorConfig
    pre_w: nnops.Parameter
    pre_b: nnops.Parameter
    blocks: list
    final_log_alpha: nnops.Parameter
    post_w: nnops.Parameter
    post_b: nnops.Parameter

    def named_params(self):
        out = [("pre.w", self.pre_w), ("pre.b", self.pre_b)]
        for i, blk in enumerate(self.blocks):
            out += [(f"block{i}.up.w", blk.up_w), (f"block{i}.up.b", blk.up_b)]
            if blk.inject_w is not None:
                out.append((f"block{i}.inject.w", blk.inject_w))
            for j, branch in enumerate(blk.amp):
                for d, unit in enumerate(branch):
                    base = f"block{i}.amp{j}.d{d}"
                    out += [
                        (f"{base}.w1", unit.w1), (f"{base}.b1", unit.b1),
                        (f"{base}.alpha1", unit.log_alpha1),
                        (f"{base}.w2", unit.w2), (f"{base}.b2", unit.b2),
                        (f"{base}.alpha2", unit.log_alpha2),
                    ]
        out += [("final.alpha", self.final_log_alpha), ("post.w", self.post_w), ("post.b", self.post_b)]
        return out

    def params(self):
        return [p for _, p in self.named_params()]


def init_generator_params(cfg: GeneratorConfig, seed=0, dtype=np.float32) -> GeneratorParams:
    rng = np.random.default_rng([seed, 0x6E6])
    ch = cfg.channels

    def conv(c_out, c_in, k):
        return nnops.Parameter(nnops.uniform_init(rng, (c_out, c_in, k), c_in * k, dtype))

    def bias(c_out, fan):
        return nnops.Parameter(nnops.uniform_init(rng, (c_out,), fan, dtype))

    def alpha(c):
        return nnops.Parameter(np.zeros(c, dtype=dtype))  # log domain, alpha = 1

    blocks = []
    for i, (rate, ksz) in enumerate(zip(cfg.upsample_rates, cfg.upsample_kernel_sizes)):
        c_in, c_out = ch[i], ch[i + 1]
        up_w = nnops.Parameter(nnops.uniform_init(rng, (c_in, c_out, ksz), c_in * ksz, dtype))
        amp = []
        for k in cfg.amp_kernel_sizes:
            branch = [
                AmpUnit(
                    w1=conv(c_out, c_out, k), b1=bias(c_out, c_out * k), log_alpha1=alpha(c_out),
                    w2=conv(c_out, c_out, k), b2=bias(c_out, c_out * k), log_alpha2=alpha(c_out),
                    kernel=k, dilation=d,
                )
                for d in cfg.amp_dilations
            ]
            amp.append(branch)
        inject = nnops.Parameter(nnops.uniform_init(rng, (c_in, 1, 1), 1, dtype)) if cfg.variant == "v2" else None
        blocks.append(BlockParams(up_w=up_w, up_b=bias(c_out, c_in * ksz), inject_w=inject, amp=amp))

    return GeneratorParams(
        config=cfg,
        pre_w=conv(ch[0], cfg.n_mels, 7),
        pre_b=bias(ch[0], cfg.n_mels * 7),
        blocks=blocks,
        final_log_alpha=alpha(ch[-1]),
        post_w=conv(1, ch[-1], 7),
        post_b=bias(1, ch[-1] * 7),
    )


# ---------------------------------------------------------------------------
# anti-aliased snake and the AMP module
# ---------------------------------------------------------------------------


def _snake_cached(x, alpha):
    """snake forward that also returns sin(alpha*x) for reuse in the adjoint."""
    a = alpha[:, None]
    s = np.sin(a * x)
    return x + np.square(s) / a, s


def _snake_cached_backward(x, s, alpha, upstream):
    a = alpha[:, None]
    sin2 = 2.0 * s * np.cos(a * x)
    grad_x = upstream * (1.0 + sin2)
    d_alpha = upstream * ((x * sin2 - np.square(s) / a) / a)
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    return grad_x, d_alpha.sum(axis=axes)


def _aa_snake(x, log_alpha: nnops.Parameter, anti_aliased=True):
    """Snake at temporarily doubled rate (upsample -> snake -> downsample).

    Returns (y, backward) where backward chains the upstream gradient to the
    input and accumulates the alpha gradient (log-domain chain rule).
    """
    alpha = np.exp(log_alpha.value).astype(x.dtype)
    if anti_aliased:
        u = dsp.upsample2_filtered(x)
        z, s = _snake_cached(u, alpha)
        y = dsp.downsample2_filtered(z)

        def backward(g):
            gu = dsp.downsample2_backward(g)
            gx, g_alpha = _snake_cached_backward(u, s, alpha, gu)
            log_alpha.grad += (g_alpha * alpha).astype(log_alpha.grad.dtype)
            return dsp.upsample2_backward(gx)

    else:
        y, s = _snake_cached(x, alpha)

        def backward(g):
            gx, g_alpha = _snake_cached_backward(x, s, alpha, g)
            log_alpha.grad += (g_alpha * alpha).astype(log_alpha.grad.dtype)
            return gx

    return y, backward


def amp_module_forward(x, amp_params, anti_aliased=True):
    """Multi-kernel residual stack with anti-aliased snake activations.

    Each kernel branch applies its dilated units sequentially with residual
    adds; the branch outputs are averaged.  Returns (y, backward).
    """
    n_branches = len(amp_params)
    branch_backwards = []
    acc = None
    for branch in amp_params:
        xb = x
        unit_bks = []
        for unit in branch:
            t1, bk1 = _aa_snake(xb, unit.log_alpha1, anti_aliased)
            pad1 = (unit.kernel - 1) * unit.dilation // 2
            c1 = nnops.conv1d_forward(t1, unit.w1.value, unit.b1.value, dilation=unit.dilation, padding=pad1)
            t2, bk2 = _aa_snake(c1, unit.log_alpha2, anti_aliased)
            pad2 = (unit.kernel - 1) // 2
            c2 = nnops.conv1d_forward(t2, unit.w2.value, unit.b2.value, padding=pad2)

            def unit_backward(g, unit=unit, t1=t1, t2=t2, bk1=bk1, bk2=bk2, pad1=pad1, pad2=pad2):
                gt2, gw2, gb2 = nnops.conv1d_backward(t2, unit.w2.value, g, padding=pad2)
                unit.w2.grad += gw2
                unit.b2.grad += gb2
                gc1 = bk2(gt2)
                gt1, gw1, gb1 = nnops.conv1d_backward(t1, unit.w1.value, gc1, dilation=unit.dilation, padding=pad1)
                unit.w1.grad += gw1
                unit.b1.grad += gb1
                return g + bk1(gt1)  # residual add

            unit_bks.append(unit_backward)
            xb = xb + c2
        branch_backwards.append(unit_bks)
        acc = xb if acc is None else acc + xb
    y = acc / n_branches

    def backward(g):
        gx = None
        for unit_bks in branch_backwards:
            gb = g / n_branches
            for bk in reversed(unit_bks):
                gb = bk(gb)
            gx = gb if gx is None else gx + gb
        return gx

    return y, backward


# ---------------------------------------------------------------------------
# generator forward / backward
# ---------------------------------------------------------------------------


def _mel_array(mel):
    return mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)


def generator_forward_batch(mels, priors, cfg: GeneratorConfig, params: GeneratorParams):
    """Batched mel -> waveform pass: mels (B, T, n_mels), priors (B, 256*T).

    Returns (out (B, 256*T), cache).  v2 injects the prior pyramid at every
    block input; v1 adds the raw prior to the bounded output and hard-clips
    back to [-1, 1].
    """
    mels = np.asarray(mels)
    priors = np.asarray(priors)
    B, T, _ = mels.shape
    if priors.shape != (B, 256 * T):
        raise ValueError(f"prior shape {priors.shape} != ({B}, 256 * {T}) for the mel frames")
    dtype = params.pre_w.value.dtype
    frames_T = np.ascontiguousarray(mels.transpose(0, 2, 1)).astype(dtype)

    tape = []
    inject_grads = [None] * len(params.blocks)

    x = nnops.conv1d_forward(frames_T, params.pre_w.value, params.pre_b.value, padding=3)

    def pre_backward(g):
        gx, gw, gb = nnops.conv1d_backward(frames_T, params.pre_w.value, g, padding=3)
        params.pre_w.grad += gw
        params.pre_b.grad += gb
        return gx

    tape.append(pre_backward)

    if cfg.variant == "v2":
        levels = _pyramid_levels_batch(priors)
        # levels run finest->coarsest; block 0 (coarsest rate) takes the last
        block_levels = [levels[len(params.blocks) - 1 - i].astype(dtype) for i in range(len(params.blocks))]
    else:
        block_levels = [None] * len(params.blocks)

    for i, blk in enumerate(params.blocks):
        if blk.inject_w is not None:
            lvl = block_levels[i][:, None, :]  # (B, 1, L)
            x = x + nnops.conv1d_forward(lvl, blk.inject_w.value)

            def inject_backward(g, blk=blk, lvl=lvl, i=i):
                glvl, gw, _ = nnops.conv1d_backward(lvl, blk.inject_w.value, g)
                blk.inject_w.grad += gw
                inject_grads[i] = glvl[:, 0, :]
                return g

            tape.append(inject_backward)

        rate = cfg.upsample_rates[i]
        ksz = cfg.upsample_kernel_sizes[i]
        pad = (ksz - rate) // 2
        x_in = x
        x = nnops.conv_transpose1d_forward(x_in, blk.up_w.value, blk.up_b.value, stride=rate, padding=pad)

        def up_backward(g, blk=blk, x_in=x_in, rate=rate, pad=pad):
            gx, gw, gb = nnops.conv_transpose1d_backward(x_in, blk.up_w.value, g, stride=rate, padding=pad)
            blk.up_w.grad += gw
            blk.up_b.grad += gb
            return gx

        tape.append(up_backward)

        x, amp_bk = amp_module_forward(x, blk.amp)
        tape.append(amp_bk)

    x, final_bk = _aa_snake(x, params.final_log_alpha, anti_aliased=False)
    tape.append(final_bk)

    x_post_in = x
    x = nnops.conv1d_forward(x_post_in, params.post_w.value, params.post_b.value, padding=3)

    def post_backward(g):
        gx, gw, gb = nnops.conv1d_backward(x_post_in, params.post_w.value, g, padding=3)
        params.post_w.grad += gw
        params.post_b.grad += gb
        return gx

    tape.append(post_backward)

    pre_tanh = x
    bounded = nnops.tanh_forward(pre_tanh)
    tape.append(lambda g: nnops.tanh_backward(pre_tanh, g))

    cache = {"tape": tape, "inject_grads": inject_grads, "T": T, "B": B, "variant": cfg.variant, "dtype": dtype}
    if cfg.variant == "v1":
        summed = bounded[:, 0, :] + priors.astype(dtype)
        out = np.clip(summed, -1.0, 1.0)
        cache["clip_pass"] = np.abs(summed) <= 1.0
    else:
        out = bounded[:, 0, :]
    return out, cache


def generator_backward_batch(cache, params: GeneratorParams, g_out):
    """Adjoint of generator_forward_batch: accumulates parameter gradients and
    returns (grad_mels (B, T, n_mels), grad_priors (B, 256*T))."""
    g = np.asarray(g_out).astype(cache["dtype"])
    g_priors = None
    if cache["variant"] == "v1":
        g = g * cache["clip_pass"]
        g_priors = g.astype(np.float64)
    g = g[:, None, :]
    for bk in reversed(cache["tape"]):
        g = bk(g)
    grad_mels = np.ascontiguousarray(g.transpose(0, 2, 1))
    if cache["variant"] == "v2":
        finest_first = [cache["inject_grads"][len(params.blocks) - 1 - i].astype(np.float64)
                        for i in range(len(params.blocks))]
        g_priors = pyramid_backward(finest_first, source_length=256 * cache["T"])
    return grad_mels, g_priors


def _pyramid_levels_batch(priors):
    """Prior pyramid levels for a (B, N) batch, each level (B, N/factor)."""
    from . import dwt as _dwt

    levels = []
    a = priors
    done = 0
    for h in _dwt._LEVEL_HALVINGS:
        a = _dwt.dwt_multilevel(a, h - done)
        done = h
        levels.append(a)
    return levels


def generator_forward(mel, prior: AudioBuffer, cfg: GeneratorConfig, params: GeneratorParams):
    """Single-item mel -> waveform pass; returns (AudioBuffer, cache).

    ``prior`` must be sample-aligned with the mel frames (length 256*T).
    """
    frames = _mel_array(mel)
    out, cache = generator_forward_batch(frames[None], np.asarray(prior.samples)[None], cfg, params)
    return AudioBuffer(out[0].astype(np.float64), prior.sample_rate), cache


def generator_backward(cache, params: GeneratorParams, g_audio):
    """Adjoint of generator_forward: accumulates parameter gradients and
    returns (grad_mel, grad_prior)."""
    g_mels, g_priors = generator_backward_batch(cache, params, np.asarray(g_audio)[None])
    return g_mels[0], (g_priors[0] if g_priors is not None else None)


# ---------------------------------------------------------------------------
# aliasing measurement (naive vs anti-aliased snake ablation)
# ---------------------------------------------------------------------------

ALIAS_PROBE_RATIO = 0.8  # probe frequency as a fraction of the feature Nyquist


def _alias_energy_db(y, probe_bin, guard=2):
    """Power outside {DC, probe} relative to the probe line, in dB."""
    spec = np.abs(np.fft.rfft(y, axis=-1)) ** 2
    total = spec.sum()
    sig = spec[..., : guard + 1].sum() + spec[..., probe_bin - guard : probe_bin + guard + 1].sum()
    alias = max(total - sig, 1e-300)
    return 10.0 * np.log10(alias / sig)


def amp_alias_ablation(params: GeneratorParams, block_idx, n=5120, trim=60):
    """Drive one block's AMP module with a 0.8*Nyquist tone and compare
    aliasing (non-probe spectral energy) with and without the 2x filtering.

    Returns a dict with naive/filtered alias levels and the improvement, all
    in dB.  The probe period divides the trimmed length exactly, so the probe
    and its fold products land on exact DFT bins.
    """
    cfg = params.config
    c = cfg.channels[block_idx + 1]
    t = np.arange(n)
    x = (0.5 * np.sin(2.0 * np.pi * (ALIAS_PROBE_RATIO / 2.0) * t)).astype(np.float64)
    x = np.tile(x, (c, 1))

    blk = params.blocks[block_idx]
    y_filt, _ = amp_module_forward(x, blk.amp, anti_aliased=True)
    y_naive, _ = amp_module_forward(x, blk.amp, anti_aliased=False)

    sl = slice(trim, n - trim)
    m = n - 2 * trim
    probe_bin = int(round(ALIAS_PROBE_RATIO / 2.0 * m))
    filt_db = _alias_energy_db(y_filt[:, sl], probe_bin)
    naive_db = _alias_energy_db(y_naive[:, sl], probe_bin)
    return {
        "block": block_idx,
        "naive_db": float(naive_db),
        "filtered_db": float(filt_db),
        "improvement_db": float(naive_db - filt_db),
    }
