"""Oracle masks, multichannel Wiener post-filtering and the separation
pipeline.

The Wiener filter is a single direct pass (no EM): per-source power is
the channel-mean squared magnitude estimate, the spatial covariance per
frequency is the power-weighted average of mixture outer products
(trace-normalized), and the per-bin filters sum to the identity up to a
small regularizer, so the source outputs conserve the mixture.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .dsp import AudioClip, Spectrogram, istft, stft, warn_if_unexpected_rate

SOURCE_NAMES = ("bass", "drums", "other", "vocals")


class SeparationError(ValueError):
    pass


def ideal_binary_mask(source_mags: dict) -> dict:
    """Per-bin winner-take-all masks from the true source magnitudes.

    Ties go to the earliest source in iteration order, so masks always
    partition the TF bins.
    """
    names = list(source_mags)
    if len(names) < 2:
        raise SeparationError("need at least two sources for a binary mask")
    shapes = {np.asarray(source_mags[n]).shape for n in names}
    if len(shapes) != 1:
        raise SeparationError("source magnitude shapes differ: %r" % (shapes,))
    stack = np.stack([np.asarray(source_mags[n]) for n in names])
    winner = np.argmax(stack, axis=0)  # first max wins ties
    return {n: (winner == i).astype(stack.dtype) for i, n in enumerate(names)}


def soft_mask(source_powers: dict, eps=1e-12) -> dict:
    """Power-ratio masks v_j / sum_k v_k; masks sum to one per bin."""
    names = list(source_powers)
    stack = np.stack([np.asarray(source_powers[n]) for n in names])
    if np.any(stack < 0):
        raise SeparationError("source powers must be non-negative")
    denom = stack.sum(axis=0) + eps
    return {n: stack[i] / denom for i, n in enumerate(names)}


def _invert_2x2_hermitian(m):
    """Vectorized inverse of (..., 2, 2) Hermitian matrices."""
    a = m[..., 0, 0]
    b = m[..., 0, 1]
    c = m[..., 1, 0]
    d = m[..., 1, 1]
    det = a * d - b * c
    inv = np.empty_like(m)
    inv[..., 0, 0] = d / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -c / det
    inv[..., 1, 1] = a / det
    return inv


def multichannel_wiener(mixture_stft, estimate_mags: dict, eps_scale=1e-10,
                        force_identity_covariance=False) -> dict:
    """Single-pass multichannel Wiener filter for a stereo mixture.

    mixture_stft: complex (2, f, t); estimate_mags: source -> (2, f, t)
    magnitudes. Returns per-source complex (2, f, t) estimates whose sum
    reproduces the mixture up to the regularizer.
    """
    x = np.asarray(mixture_stft)
    if x.ndim != 3 or x.shape[0] != 2:
        raise SeparationError("expected a stereo (2, f, t) mixture STFT")
    names = list(estimate_mags)
    if not names:
        raise SeparationError("no source estimates given")
    for n in names:
        if np.asarray(estimate_mags[n]).shape != x.shape:
            raise SeparationError("estimate %r shape mismatch" % n)

    _, f, t = x.shape
    if not np.any(x):
        return {n: np.zeros_like(x) for n in names}
    # per-source power: channel mean of squared magnitudes -> (src, f, t)
    v = np.stack([
        (np.asarray(estimate_mags[n]) ** 2).mean(axis=0) for n in names
    ])

    xt = x.transpose(1, 2, 0)  # (f, t, 2)
    outer = xt[..., :, None] * np.conj(xt[..., None, :])  # (f, t, 2, 2)

    eye = np.eye(2, dtype=complex)
    cov = np.empty((len(names), f, 2, 2), dtype=complex)
    if force_identity_covariance:
        cov[:] = eye
    else:
        for j in range(len(names)):
            w = v[j][..., None, None]  # (f, t, 1, 1)
            num = (w * outer).sum(axis=1)  # (f, 2, 2)
            den = v[j].sum(axis=1)[:, None, None]
            r = np.divide(num, den, out=np.tile(eye, (f, 1, 1)).astype(complex),
                          where=den > 0)
            trace = np.real(r[:, 0, 0] + r[:, 1, 1])
            safe = trace > 0
            r[safe] *= (2.0 / trace[safe])[:, None, None]
            r[~safe] = eye
            cov[j] = r

    # per-bin mix model: sum_k v_k R_k + eps I
    mix_cov = np.zeros((f, t, 2, 2), dtype=complex)
    for j in range(len(names)):
        mix_cov += v[j][..., None, None] * cov[j][:, None, :, :]
    eps = eps_scale * max(float((np.abs(x) ** 2).mean()), 1e-300)
    mix_cov += eps * eye
    inv_mix = _invert_2x2_hermitian(mix_cov)

    out = {}
    for j, n in enumerate(names):
        wj = v[j][..., None, None] * (cov[j][:, None, :, :] @ inv_mix)
        yj = (wj @ xt[..., :, None])[..., 0]  # (f, t, 2)
        out[n] = yj.transpose(2, 0, 1)
    return out


def blend(estimates_a: dict, estimates_b: dict, weight) -> dict:
    """Elementwise magnitude blend: w * a + (1 - w) * b."""
    if not 0.0 <= weight <= 1.0:
        raise SeparationError("blend weight must lie in [0, 1]")
    if set(estimates_a) != set(estimates_b):
        raise SeparationError("blend requires matching source sets")
    out = {}
    for n in estimates_a:
        a, b = np.asarray(estimates_a[n]), np.asarray(estimates_b[n])
        if a.shape != b.shape:
            raise SeparationError("blend shape mismatch for %r" % n)
        out[n] = weight * a + (1.0 - weight) * b
    return out


# ---------------------------------------------------------------------------
# end-to-end pipeline


def estimate_magnitudes(models: dict, spec: Spectrogram) -> dict:
    """Run each source model on the (normalized) mixture magnitude."""
    mag = spec.magnitude()
    norm = np.sqrt((mag ** 2).mean())
    norm = norm if norm > 0 else 1.0
    out = {}
    for name, model in models.items():
        model.set_training(False)
        with ad.no_grad():
            est = model.forward(mag / norm).data
        out[name] = est * norm
    return out


def separate_spectrogram(spec: Spectrogram, estimate_mags: dict, wiener=True):
    """Turn magnitude estimates into per-source complex STFTs."""
    x = spec.bins.transpose(0, 2, 1)  # (ch, f, t)
    if wiener and spec.num_channels == 2:
        complex_est = multichannel_wiener(x, estimate_mags)
    else:
        masks = soft_mask({n: m ** 2 for n, m in estimate_mags.items()})
        complex_est = {n: masks[n] * x for n in estimate_mags}
    return {n: spec.with_bins(c.transpose(0, 2, 1)) for n, c in complex_est.items()}


def separate_track(models: dict, clip: AudioClip, wiener=True,
                   fft_size=4096, hop=None) -> dict:
    """Separate a mixture clip into source clips plus the accompaniment
    (the waveform residual of the vocal extraction).
    """
    if not models:
        raise SeparationError("no source models given")
    warn_if_unexpected_rate(clip)
    spec = stft(clip, fft_size=fft_size, hop=hop)
    mags = estimate_magnitudes(models, spec)
    if len(mags) == 1:
        # single-model runs still get a two-source Wiener pass against
        # the spectral residual
        (only_name, only_mag), = mags.items()
        residual = np.maximum(spec.magnitude() - only_mag, 0.0)
        specs = separate_spectrogram(spec, {only_name: only_mag, "_rest": residual},
                                     wiener=wiener)
        specs.pop("_rest")
    else:
        specs = separate_spectrogram(spec, mags, wiener=wiener)
    out = {n: istft(s) for n, s in specs.items()}
    if "vocals" in out:
        residual = clip.samples - out["vocals"].samples
        out["accompaniment"] = AudioClip(residual, clip.sample_rate)
    return out
