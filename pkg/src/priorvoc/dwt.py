"""Orthonormal Haar wavelet analysis/synthesis and the cascaded pyramid
that prepares the coarse prior signal for per-block injection.

The pyramid downsamples by cumulative factors [2, 4, 32, 256], matching the
generator's [8, 8, 2, 2] upsampling schedule read in reverse; factors of 8
are realized as three cascaded 2x Haar levels, keeping only the
approximation branch.  All maps are linear, so the adjoint (needed to pass
gradients from the generator back into the prior) is the exact transpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer

_SQRT2 = np.sqrt(2.0)

# halvings after which a level is recorded: rates sr/2, sr/4, sr/32, sr/256
_LEVEL_HALVINGS = (1, 2, 5, 8)
CUMULATIVE_FACTORS = tuple(2**h for h in _LEVEL_HALVINGS)  # (2, 4, 32, 256)


@dataclass
class PriorPyramid:
    """Prior signal at the four generator block-input rates, finest first."""

    levels: list
    source_length: int

    def __post_init__(self):
        if len(self.levels) != len(CUMULATIVE_FACTORS):
            raise ValueError(f"expected {len(CUMULATIVE_FACTORS)} levels, got {len(self.levels)}")


def dwt_analysis(x):
    """Single-level orthonormal Haar split: returns (approx, detail).

    approx[i] = (x[2i] + x[2i+1]) / sqrt(2), detail[i] = (x[2i] - x[2i+1]) / sqrt(2).
    """
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ValueError("dwt_analysis needs an even-length input")
    even = x[..., ::2]
    odd = x[..., 1::2]
    return (even + odd) / _SQRT2, (even - odd) / _SQRT2


def dwt_synthesis(approx, detail):
    """Exact inverse of dwt_analysis."""
    approx = np.asarray(approx)
    detail = np.asarray(detail)
    if approx.shape != detail.shape:
        raise ValueError("approx and detail must have the same shape")
    out = np.empty(approx.shape[:-1] + (2 * approx.shape[-1],), dtype=np.result_type(approx, detail))
    out[..., ::2] = (approx + detail) / _SQRT2
    out[..., 1::2] = (approx - detail) / _SQRT2
    return out


def dwt_multilevel(x, levels):
    """Approximation-keeping cascade; returns the level-``levels`` approx."""
    a = np.asarray(x)
    for _ in range(levels):
        a, _d = dwt_analysis(a)
    return a


def build_prior_pyramid(prior: AudioBuffer) -> PriorPyramid:
    """Cascade the prior down to the four block-input rates.

    The source is zero-padded to a multiple of 256 first, so level i has
    exactly padded_length / cumulative_factor_i samples.
    """
    x = np.asarray(prior.samples)
    n = len(x)
    padded = max(-(-n // 256) * 256, 256)
    if padded != n:
        x = np.pad(x, (0, padded - n))
    levels = []
    a = x
    done = 0
    for h in _LEVEL_HALVINGS:
        a = dwt_multilevel(a, h - done)
        done = h
        levels.append(a)
    return PriorPyramid(levels=levels, source_length=n)


def pyramid_backward(grad_levels, source_length):
    """Adjoint of build_prior_pyramid for a prior of ``source_length`` samples.

    Detail branches carry no gradient (they are dropped in the forward
    pass), so each level's gradient is lifted back with zero detail.
    """
    if len(grad_levels) != len(CUMULATIVE_FACTORS):
        raise ValueError("need one gradient per pyramid level")
    acc = None
    # walk coarsest -> finest, lifting through the shared cascade
    for h_hi, h_lo, g in zip(_LEVEL_HALVINGS[::-1], (*_LEVEL_HALVINGS[-2::-1], 0), reversed(grad_levels)):
        acc = np.asarray(g) if acc is None else acc + np.asarray(g)
        for _ in range(h_hi - h_lo):
            acc = dwt_synthesis(acc, np.zeros_like(acc))
    return acc[..., :source_length]
