"""Mel-to-waveform GAN vocoder with a harmonic-plus-noise signal prior.

Pure numpy/scipy implementation: differentiable layers with hand-derived
adjoints, a DDSP-style prior synthesizer, a Snake-activated anti-aliased
generator with wavelet-pyramid prior injection, the discriminator/loss
stack, and a toy adversarial training loop.
"""

__version__ = "0.1.0"
