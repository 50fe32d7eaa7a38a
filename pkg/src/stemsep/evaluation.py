"""BSSEval-style source separation metrics.

An estimate is decomposed against the true sources by least-squares
projection onto the span of all references delayed by 0..L-1 samples
(distortions by short time-invariant filters are allowed and not
penalized):

    target   = projection onto the true source's delayed span
    interf   = projection onto the span of all references - target
    artifact = estimate - projection onto the span of all references

SDR = 10 log10(|target|^2 / |interf + artifact|^2). Stereo is scored
per channel and the dB values averaged. Aggregation follows the
median-of-per-song-means protocol.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import solve, toeplitz
from scipy.signal import fftconvolve

DEFAULT_FILTER_LEN = 512
DEFAULT_WINDOW_S = 30.0
DEFAULT_HOP_S = 15.0
SDR_CLAMP_DB = 300.0
# error power below this fraction of the target power is float64 solver
# noise, not signal: report the clamp instead of a meaningless huge ratio
NOISE_FLOOR_REL = 1e-24
RIDGE_REL = 1e-10
SILENCE_RMS = 1e-8


class EvalError(ValueError):
    pass


def _correlations(references, estimate, flen):
    """Gram matrix of delayed references and their correlation with the
    estimate, computed via FFT (classic bss_eval structure)."""
    nsrc = references.shape[0]
    nsampl = references.shape[1]
    n_fft = int(2 ** np.ceil(np.log2(nsampl + flen - 1)))
    sf = np.fft.rfft(references, n=n_fft, axis=1)
    sef = np.fft.rfft(estimate, n=n_fft)
    g = np.zeros((nsrc * flen, nsrc * flen))
    for i in range(nsrc):
        for j in range(i, nsrc):
            ssf = np.fft.irfft(sf[i] * np.conj(sf[j]), n=n_fft)
            block = toeplitz(
                np.hstack((ssf[0], ssf[-1:-flen:-1])), ssf[:flen]
            )
            g[i * flen:(i + 1) * flen, j * flen:(j + 1) * flen] = block
            g[j * flen:(j + 1) * flen, i * flen:(i + 1) * flen] = block.T
    d = np.zeros(nsrc * flen)
    for i in range(nsrc):
        ssef = np.fft.irfft(sf[i] * np.conj(sef), n=n_fft)
        d[i * flen:(i + 1) * flen] = np.hstack((ssef[0], ssef[-1:-flen:-1]))
    return g, d


def _project(references, estimate, flen):
    """Least-squares filtered sum of the references closest to the
    estimate. Returns the projected signal."""
    references = np.atleast_2d(references)
    nsrc, nsampl = references.shape
    g, d = _correlations(references, estimate, flen)
    try:
        coef = solve(g, d, assume_a="pos")
    except np.linalg.LinAlgError:
        # dependent or silent references: fall back to a ridge-regularized
        # solve (minimum-norm-ish filtered sum)
        ridge = RIDGE_REL * max(np.trace(g) / g.shape[0], 1e-30)
        coef = solve(g + ridge * np.eye(g.shape[0]), d, assume_a="pos")
    if not np.all(np.isfinite(coef)):
        ridge = RIDGE_REL * max(np.trace(g) / g.shape[0], 1e-30)
        coef = solve(g + ridge * np.eye(g.shape[0]), d, assume_a="pos")
    proj = np.zeros(nsampl)
    for i in range(nsrc):
        h = coef[i * flen:(i + 1) * flen]
        proj += fftconvolve(references[i], h)[:nsampl]
    return proj


def _pad_tail(x, extra):
    return np.concatenate([x, np.zeros(x.shape[:-1] + (extra,))], axis=-1)


def bss_project(estimate, references, true_index, filter_len=DEFAULT_FILTER_LEN):
    """Decompose a mono estimate into (target, e_interf, e_artif).

    The returned components have length n + filter_len - 1 (the filtered
    references overhang the original window).
    """
    references = np.atleast_2d(np.asarray(references, dtype=np.float64))
    estimate = np.asarray(estimate, dtype=np.float64)
    if filter_len < 1:
        raise EvalError("filter length must be >= 1")
    if references.shape[1] != estimate.shape[0]:
        raise EvalError(
            "length mismatch: references %r vs estimate %r"
            % (references.shape, estimate.shape)
        )
    if not 0 <= true_index < references.shape[0]:
        raise EvalError("true_index out of range")
    # trailing zero padding keeps delayed reference copies fully inside the
    # analysis window, so a pure delay is absorbed exactly
    references = _pad_tail(references, filter_len - 1)
    estimate = _pad_tail(estimate, filter_len - 1)
    target = _project(references[true_index:true_index + 1], estimate, filter_len)
    full = _project(references, estimate, filter_len)
    e_interf = full - target
    e_artif = estimate - full
    return target, e_interf, e_artif


def _ratio_db(num_power, den_power):
    if den_power <= num_power * NOISE_FLOOR_REL:
        return SDR_CLAMP_DB
    if num_power == 0.0:
        return -SDR_CLAMP_DB
    return float(min(10.0 * np.log10(num_power / den_power), SDR_CLAMP_DB))


def sdr_from_decomposition(target, e_interf, e_artif):
    """SDR/SIR/SAR (dB) from a bss_project decomposition."""
    pt = float(target @ target)
    err = e_interf + e_artif
    metrics = {
        "sdr": _ratio_db(pt, float(err @ err)),
        "sir": _ratio_db(pt, float(e_interf @ e_interf)),
    }
    ta = target + e_interf
    metrics["sar"] = _ratio_db(float(ta @ ta), float(e_artif @ e_artif))
    return metrics


def evaluate_estimate(estimate, references, true_index, filter_len=DEFAULT_FILTER_LEN):
    """Metrics for one stereo (or mono) estimate: channels scored
    independently, dB values averaged."""
    estimate = np.atleast_2d(np.asarray(estimate))
    refs = np.asarray(references)
    if refs.ndim == 2:
        refs = refs[:, None, :]
    vals = []
    for ch in range(estimate.shape[0]):
        t, ei, ea = bss_project(estimate[ch], refs[:, min(ch, refs.shape[1] - 1), :],
                                true_index, filter_len)
        vals.append(sdr_from_decomposition(t, ei, ea))
    return {k: float(np.mean([v[k] for v in vals])) for k in vals[0]}


# ---------------------------------------------------------------------------
# windowed track evaluation and aggregation


def evaluate_track(reference_clips: dict, estimate_clips: dict,
                   filter_len=DEFAULT_FILTER_LEN,
                   window_s=DEFAULT_WINDOW_S, hop_s=DEFAULT_HOP_S,
                   sample_rate=44100):
    """Windowed metrics for one song.

    reference_clips/estimate_clips map source name -> (ch, t) arrays.
    Sources whose reference window is silent are excluded from that
    window (and counted). A track shorter than the window is scored as
    one whole-track window.
    """
    names = [n for n in estimate_clips if n in reference_clips]
    if not names:
        raise EvalError("no overlapping source names between estimates and references")
    length = min(
        min(np.atleast_2d(reference_clips[n]).shape[1] for n in names),
        min(np.atleast_2d(estimate_clips[n]).shape[1] for n in names),
    )
    win = int(round(window_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if length <= win:
        starts = [0]
        win = length
    else:
        starts = list(range(0, length - win + 1, hop))

    # projection subspace: all independent references (accompaniment is a
    # sum of other stems, so it only serves as its own target span)
    span_names = [n for n in reference_clips if n != "accompaniment"]
    results = {n: {"windows": [], "excluded_windows": 0} for n in names}
    for start in starts:
        sl = slice(start, start + win)
        span_refs = np.stack(
            [np.atleast_2d(reference_clips[n])[:, sl] for n in span_names]
        )  # (src, ch, t)
        for name in names:
            ref = np.atleast_2d(reference_clips[name])[:, sl]
            if np.sqrt(np.mean(ref ** 2)) < SILENCE_RMS:
                results[name]["excluded_windows"] += 1
                continue
            if name in span_names:
                refs = span_refs
                idx = span_names.index(name)
            else:
                refs = np.concatenate([ref[None], span_refs], axis=0)
                idx = 0
            est = np.atleast_2d(estimate_clips[name])[:, sl]
            metrics = evaluate_estimate(est, refs, idx, filter_len)
            results[name]["windows"].append(metrics)
    for name in names:
        wins = results[name]["windows"]
        results[name]["mean"] = (
            {k: float(np.mean([w[k] for w in wins])) for k in wins[0]} if wins else None
        )
    return results


def aggregate(per_song: dict) -> dict:
    """Median across songs of the per-song mean SDR, per source."""
    report = {"songs": per_song, "medians": {}}
    sources = sorted({s for song in per_song.values() for s in song})
    for src in sources:
        means = [
            song[src]["mean"]["sdr"]
            for song in per_song.values()
            if src in song and song[src]["mean"] is not None
        ]
        report["medians"][src] = float(np.median(means)) if means else None
    return report


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def read_report(path):
    with open(path) as fh:
        return json.load(fh)


def format_report(report) -> str:
    lines = ["%-16s %10s" % ("source", "median SDR")]
    for src, med in sorted(report["medians"].items()):
        lines.append("%-16s %10s" % (src, "n/a" if med is None else "%.2f dB" % med))
    lines.append("")
    for song, sources in sorted(report["songs"].items()):
        for src, res in sorted(sources.items()):
            mean = res.get("mean")
            lines.append(
                "%s / %-14s windows=%d excluded=%d mean SDR=%s"
                % (
                    song,
                    src,
                    len(res["windows"]),
                    res["excluded_windows"],
                    "n/a" if mean is None else "%.2f dB" % mean["sdr"],
                )
            )
    return "\n".join(lines)
