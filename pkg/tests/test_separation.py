import numpy as np
import pytest

from stemsep import dsp, separation
from stemsep.separation import (
    SeparationError,
    blend,
    ideal_binary_mask,
    multichannel_wiener,
    separate_spectrogram,
    separate_track,
    soft_mask,
)


# ---------------------------------------------------------------------------
# ideal binary mask


def test_ibm_disjoint_supports():
    a = np.zeros((1, 4, 4))
    b = np.zeros((1, 4, 4))
    a[:, :2, :] = 1.0
    b[:, 2:, :] = 1.0
    masks = ideal_binary_mask({"a": a, "b": b})
    np.testing.assert_array_equal(masks["a"], a)
    np.testing.assert_array_equal(masks["b"], b)
    mixture = a + b
    np.testing.assert_array_equal(masks["a"] * mixture, a)


def test_ibm_tie_goes_to_first_source():
    a = np.ones((1, 2, 2))
    b = np.ones((1, 2, 2))
    masks = ideal_binary_mask({"a": a, "b": b})
    np.testing.assert_array_equal(masks["a"], 1.0)
    np.testing.assert_array_equal(masks["b"], 0.0)


def test_ibm_matches_brute_force_argmax():
    rng = np.random.default_rng(0)
    sources = {n: rng.random((2, 4, 4)) for n in ("x", "y", "z")}
    masks = ideal_binary_mask(sources)
    names = list(sources)
    for c in range(2):
        for i in range(4):
            for j in range(4):
                vals = [sources[n][c, i, j] for n in names]
                win = names[int(np.argmax(vals))]
                for n in names:
                    assert masks[n][c, i, j] == (1.0 if n == win else 0.0)
    total = sum(masks.values())
    np.testing.assert_array_equal(total, 1.0)
    for m in masks.values():
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_ibm_rejects_bad_input():
    with pytest.raises(SeparationError):
        ideal_binary_mask({"only": np.ones((1, 2, 2))})
    with pytest.raises(SeparationError):
        ideal_binary_mask({"a": np.ones((1, 2, 2)), "b": np.ones((1, 3, 2))})


# ---------------------------------------------------------------------------
# soft mask


def test_soft_mask_ratios():
    masks = soft_mask({"a": np.full((1, 1, 1), 1.0), "b": np.full((1, 1, 1), 3.0)})
    np.testing.assert_allclose(masks["a"], 0.25, rtol=1e-9)
    np.testing.assert_allclose(masks["b"], 0.75, rtol=1e-9)


def test_soft_mask_single_active_source():
    masks = soft_mask({"a": np.ones((1, 2, 2)), "b": np.zeros((1, 2, 2))})
    np.testing.assert_allclose(masks["a"], 1.0, rtol=1e-9)
    np.testing.assert_allclose(masks["b"], 0.0)


def test_soft_masked_estimates_sum_to_mixture():
    rng = np.random.default_rng(1)
    powers = {n: rng.random((2, 5, 6)) for n in ("a", "b", "c")}
    mixture = rng.standard_normal((2, 5, 6))
    masks = soft_mask(powers)
    recon = sum(masks[n] * mixture for n in powers)
    np.testing.assert_allclose(recon, mixture, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# multichannel Wiener


def random_stft(rng, f=8, t=10):
    return rng.standard_normal((2, f, t)) + 1j * rng.standard_normal((2, f, t))


def test_wiener_single_source_recovers_mixture():
    rng = np.random.default_rng(2)
    x = random_stft(rng)
    est = {"solo": np.abs(x)}
    out = multichannel_wiener(x, est)
    np.testing.assert_allclose(out["solo"], x, rtol=1e-6)


def test_wiener_conservation():
    rng = np.random.default_rng(3)
    x = random_stft(rng, f=16, t=12)
    est = {n: np.abs(random_stft(rng, 16, 12)) for n in ("a", "b", "c")}
    out = multichannel_wiener(x, est)
    total = sum(out.values())
    err = np.abs(total - x).max() / np.abs(x).max()
    assert err < 1e-6


def test_wiener_identity_covariance_reduces_to_soft_mask():
    rng = np.random.default_rng(4)
    x = random_stft(rng)
    est = {n: np.abs(random_stft(rng)) for n in ("a", "b")}
    out = multichannel_wiener(x, est, force_identity_covariance=True)
    powers = {n: (est[n] ** 2).mean(axis=0) for n in est}
    masks = soft_mask(powers)
    for n in est:
        np.testing.assert_allclose(out[n], masks[n][None] * x, rtol=1e-5, atol=1e-8)


def test_wiener_rejects_bad_input():
    rng = np.random.default_rng(5)
    x = random_stft(rng)
    with pytest.raises(SeparationError):
        multichannel_wiener(x[:1], {"a": np.abs(x)})
    with pytest.raises(SeparationError):
        multichannel_wiener(x, {})
    with pytest.raises(SeparationError):
        multichannel_wiener(x, {"a": np.ones((2, 3, 3))})


# ---------------------------------------------------------------------------
# blend


def test_blend_endpoints_and_midpoint():
    rng = np.random.default_rng(6)
    a = {"s": rng.random((2, 3, 3))}
    b = {"s": rng.random((2, 3, 3))}
    np.testing.assert_array_equal(blend(a, b, 1.0)["s"], a["s"])
    np.testing.assert_array_equal(blend(a, b, 0.0)["s"], b["s"])
    np.testing.assert_allclose(blend(a, b, 0.5)["s"], (a["s"] + b["s"]) / 2)
    with pytest.raises(SeparationError):
        blend(a, b, 1.5)
    with pytest.raises(SeparationError):
        blend(a, {"t": b["s"]}, 0.5)


# ---------------------------------------------------------------------------
# pipeline


def synth_two_source_mixture(rng, n=44100):
    t = np.arange(n) / 44100.0
    low = 0.3 * np.sin(2 * np.pi * 220.0 * t)
    high = 0.2 * np.sin(2 * np.pi * 6000.0 * t)
    src_a = np.stack([low, 0.8 * low])
    src_b = np.stack([0.7 * high, high])
    return src_a, src_b


def test_oracle_substitution_recovers_sources():
    rng = np.random.default_rng(7)
    src_a, src_b = synth_two_source_mixture(rng)
    mixture = dsp.AudioClip(src_a + src_b)
    spec = dsp.stft(mixture)
    spec_a = dsp.stft(dsp.AudioClip(src_a))
    spec_b = dsp.stft(dsp.AudioClip(src_b))
    masks = ideal_binary_mask({"a": spec_a.magnitude(), "b": spec_b.magnitude()})
    est = {n: masks[n] * spec.magnitude() for n in masks}
    out_specs = separate_spectrogram(spec, est, wiener=True)
    for name, ref in (("a", src_a), ("b", src_b)):
        rec = dsp.istft(out_specs[name]).samples
        interior = slice(4096, rec.shape[1] - 4096)
        err = np.sqrt(np.mean((rec[:, interior] - ref[:, interior]) ** 2))
        ref_rms = np.sqrt(np.mean(ref[:, interior] ** 2))
        assert err < 0.05 * ref_rms


class ConstantFractionModel:
    """Stand-in for a trained model: returns a fixed fraction of input."""

    def __init__(self, fraction):
        self.fraction = fraction

    def set_training(self, flag):
        pass

    def forward(self, mag):
        from stemsep import autodiff as ad

        return ad.constant(self.fraction * mag)


def test_separate_track_zero_clip_gives_zero_outputs():
    clip = dsp.AudioClip(np.zeros((2, 20000)))
    out = separate_track({"vocals": ConstantFractionModel(0.5)}, clip)
    for est in out.values():
        np.testing.assert_allclose(est.samples, 0.0, atol=1e-12)


def test_accompaniment_is_exact_residual():
    rng = np.random.default_rng(8)
    clip = dsp.AudioClip(0.1 * rng.standard_normal((2, 30000)))
    out = separate_track({"vocals": ConstantFractionModel(0.4)}, clip)
    np.testing.assert_allclose(
        out["vocals"].samples + out["accompaniment"].samples,
        clip.samples,
        atol=1e-12,
    )


def test_separate_track_requires_models():
    with pytest.raises(SeparationError):
        separate_track({}, dsp.AudioClip(np.zeros((2, 1000))))
