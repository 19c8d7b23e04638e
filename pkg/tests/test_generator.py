import numpy as np
import pytest

from priorvoc import generator as G
from priorvoc.dsp import AudioBuffer
from gradcheck import rel_err

RNG = np.random.default_rng(77)


def tiny_config(variant="v2"):
    return G.GeneratorConfig(base_channels=16, n_mels=6, variant=variant)


def make_inputs(T, n_mels=6, seed=0, sr=24000):
    rng = np.random.default_rng(seed)
    mel = rng.normal(size=(T, n_mels))
    prior = AudioBuffer(0.1 * rng.normal(size=256 * T), sr)
    return mel, prior


# ---------------------------------------------------------------------------
# config / shapes
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        G.GeneratorConfig(upsample_rates=(8, 8, 2), upsample_kernel_sizes=(16, 16, 4))
    with pytest.raises(ValueError):
        G.GeneratorConfig(upsample_kernel_sizes=(7, 16, 4, 4))
    with pytest.raises(ValueError):
        G.GeneratorConfig(variant="v3")


def test_channels_halve_per_block():
    assert G.GeneratorConfig().channels == [128, 64, 32, 16, 8]


@pytest.mark.parametrize("T", [1, 7, 94])
@pytest.mark.parametrize("variant", ["v1", "v2"])
def test_output_length_contract(T, variant):
    cfg = tiny_config(variant)
    params = G.init_generator_params(cfg, seed=1, dtype=np.float32)
    mel, prior = make_inputs(T)
    out, _ = G.generator_forward(mel, prior, cfg, params)
    assert len(out.samples) == 256 * T
    assert np.all(np.abs(out.samples) <= 1.0)


def test_prior_length_mismatch():
    cfg = tiny_config()
    params = G.init_generator_params(cfg, seed=1)
    mel, _ = make_inputs(4)
    with pytest.raises(ValueError):
        G.generator_forward(mel, AudioBuffer(np.zeros(100), 24000), cfg, params)


def test_amp_module_shape_preserved():
    cfg = tiny_config()
    params = G.init_generator_params(cfg, seed=3, dtype=np.float64)
    c = cfg.channels[1]
    x = RNG.normal(size=(c, 64))
    y, _ = G.amp_module_forward(x, params.blocks[0].amp)
    assert y.shape == x.shape


def test_amp_module_zero_input_zero_biases():
    cfg = tiny_config()
    params = G.init_generator_params(cfg, seed=3, dtype=np.float64)
    for branch in params.blocks[0].amp:
        for unit in branch:
            unit.b1.value[...] = 0.0
            unit.b2.value[...] = 0.0
    y, _ = G.amp_module_forward(np.zeros((cfg.channels[1], 64)), params.blocks[0].amp)
    assert np.allclose(y, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# prior-injection equivalences
# ---------------------------------------------------------------------------


def test_v2_zero_injection_equals_prior_free():
    cfg = tiny_config("v2")
    params = G.init_generator_params(cfg, seed=5, dtype=np.float32)
    for blk in params.blocks:
        blk.inject_w.value[...] = 0.0
    mel, prior = make_inputs(6, seed=9)
    out_prior, _ = G.generator_forward(mel, prior, cfg, params)
    out_silent, _ = G.generator_forward(mel, AudioBuffer(np.zeros(256 * 6), 24000), cfg, params)
    assert np.array_equal(out_prior.samples, out_silent.samples)


def test_v1_zero_params_outputs_clipped_prior():
    cfg = tiny_config("v1")
    params = G.init_generator_params(cfg, seed=5, dtype=np.float32)
    for name, p in params.named_params():
        if not name.endswith("alpha"):
            p.value[...] = 0.0
    T = 6
    rng = np.random.default_rng(2)
    prior = AudioBuffer(1.4 * np.sin(0.01 * np.arange(256 * T)) + 0.05 * rng.normal(size=256 * T), 24000)
    mel, _ = make_inputs(T)
    out, _ = G.generator_forward(mel, prior, cfg, params)
    expect = np.clip(prior.samples.astype(np.float32), -1.0, 1.0)
    assert np.array_equal(out.samples, expect.astype(np.float64))


def test_v1_zero_prior_equals_prior_free_network():
    cfg1 = tiny_config("v1")
    params = G.init_generator_params(cfg1, seed=8, dtype=np.float32)
    mel, _ = make_inputs(5, seed=4)
    zero_prior = AudioBuffer(np.zeros(256 * 5), 24000)
    out, _ = G.generator_forward(mel, zero_prior, cfg1, params)
    # same weights run under the v2 wiring (no inject convs present) give the
    # prior-free network output; the v1 clip must be a bit-exact no-op here
    out_free, _ = G.generator_forward(mel, zero_prior, tiny_config("v2"), params)
    assert np.array_equal(out.samples, out_free.samples)


def test_determinism():
    cfg = tiny_config("v2")
    params = G.init_generator_params(cfg, seed=11, dtype=np.float32)
    mel, prior = make_inputs(4, seed=1)
    a, _ = G.generator_forward(mel, prior, cfg, params)
    b, _ = G.generator_forward(mel, prior, cfg, params)
    assert np.array_equal(a.samples, b.samples)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _loss_and_grads(cfg, params, mel, prior, g):
    for _, p in params.named_params():
        p.zero_grad()
    out, cache = G.generator_forward(mel, prior, cfg, params)
    loss = float(np.sum(out.samples * g))
    grad_mel, grad_prior = G.generator_backward(cache, params, g)
    return loss, grad_mel, grad_prior


def test_generator_gradcheck_tiny():
    cfg = tiny_config("v2")
    params = G.init_generator_params(cfg, seed=13, dtype=np.float64)
    T = 2
    mel, prior = make_inputs(T, seed=3)
    g = np.random.default_rng(0).normal(size=256 * T)

    _, grad_mel, grad_prior = _loss_and_grads(cfg, params, mel, prior, g)
    grads = {name: p.grad.copy() for name, p in params.named_params()}

    def loss_fn():
        out, _ = G.generator_forward(mel, prior, cfg, params)
        return float(np.sum(out.samples * g))

    eps = 1e-6
    rng = np.random.default_rng(17)
    # (a) a conv weight in block 3, (b) a snake alpha, (c) an injection weight
    targets = ["block2.amp1.d1.w1", "block2.amp0.d0.alpha1", "block1.inject.w", "block3.up.w", "post.w"]
    named = dict(params.named_params())
    for name in targets:
        p = named[name]
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn()
            flat[i] = orig - eps
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = grads[name].reshape(-1)[i]
            assert rel_err(ana, num) < 1e-3, (name, i, ana, num)

    # grad w.r.t. mel input and prior
    mel_flat = mel.reshape(-1)
    for i in rng.choice(mel_flat.size, size=4, replace=False):
        orig = mel_flat[i]
        mel_flat[i] = orig + eps
        fp = loss_fn()
        mel_flat[i] = orig - eps
        fm = loss_fn()
        mel_flat[i] = orig
        num = (fp - fm) / (2 * eps)
        assert rel_err(grad_mel.reshape(-1)[i], num) < 1e-3

    pr = prior.samples
    for i in rng.choice(pr.size, size=4, replace=False):
        orig = pr[i]
        pr[i] = orig + eps
        fp = loss_fn()
        pr[i] = orig - eps
        fm = loss_fn()
        pr[i] = orig
        num = (fp - fm) / (2 * eps)
        assert rel_err(grad_prior[i], num) < 1e-3


def test_gradient_reaches_every_parameter():
    for variant in ("v1", "v2"):
        cfg = tiny_config(variant)
        params = G.init_generator_params(cfg, seed=19, dtype=np.float64)
        mel, prior = make_inputs(3, seed=6)
        g = np.random.default_rng(1).normal(size=256 * 3)
        _loss_and_grads(cfg, params, mel, prior, g)
        for name, p in params.named_params():
            assert not np.all(p.grad == 0.0), f"{variant}:{name} got no gradient"


def test_batch_matches_single():
    cfg = tiny_config("v2")
    params = G.init_generator_params(cfg, seed=23, dtype=np.float64)
    B, T = 3, 4
    rng = np.random.default_rng(2)
    mels = rng.normal(size=(B, T, cfg.n_mels))
    priors = 0.1 * rng.normal(size=(B, 256 * T))
    out, _ = G.generator_forward_batch(mels, priors, cfg, params)
    for i in range(B):
        single, _ = G.generator_forward(mels[i], AudioBuffer(priors[i], 24000), cfg, params)
        assert np.allclose(out[i], single.samples, atol=1e-12)


# ---------------------------------------------------------------------------
# anti-aliasing ablation
# ---------------------------------------------------------------------------


def test_amp_anti_aliasing_beats_naive_snake():
    params = G.init_generator_params(G.GeneratorConfig(variant="v2"), seed=0, dtype=np.float64)
    for b in range(4):
        r = G.amp_alias_ablation(params, b)
        assert r["improvement_db"] >= 10.0
        # regression floor frozen from the first verified run (~80 dB)
        assert r["improvement_db"] >= 70.0
