import numpy as np
import pytest
from conftest import direct_dft, tone
from hypothesis import given, settings
from hypothesis import strategies as st

from lowres_rppg.errors import ConfigurationError, ContractViolation
from lowres_rppg.signal import (RppgSignal, SpectralEstimate, bandpass, detrend, estimate_hr,
                                green_baseline, power_spectrum, read_signal_csv, segment_length,
                                spatial_mean_rgb, trace_hr, write_signal_csv, write_spectrum_csv)
from lowres_rppg.synth import SynthConfig, generate_pulse_clip
from lowres_rppg.video import VideoClip


def sig(x, fs=30.0):
    return RppgSignal(x, fs)


# -- spatial means ------------------------------------------------------------

def test_constant_colour_clip():
    frames = np.broadcast_to(np.array([0.2, 0.5, 0.7]), (6, 3, 4, 3))
    r, g, b = spatial_mean_rgb(VideoClip(frames, 30.0))
    assert np.allclose(r.samples, 0.2, atol=1e-15) and np.allclose(g.samples, 0.5, atol=1e-15)
    assert np.allclose(b.samples, 0.7, atol=1e-15)


def test_uniform_green_sinusoid():
    t = np.arange(40)
    wave = 0.5 + 0.1 * np.sin(2 * np.pi * 1.2 * t / 30.0)
    frames = np.zeros((40, 3, 3, 3))
    frames[..., 1] = wave[:, None, None]
    _, g, _ = spatial_mean_rgb(VideoClip(frames, 30.0))
    assert np.allclose(g.samples, wave, rtol=0, atol=1e-15)
    assert g.fs == 30.0


def test_spatial_mean_matches_loops():
    frames = np.random.default_rng(0).uniform(0, 1, (5, 3, 4, 3))
    traces = spatial_mean_rgb(VideoClip(frames, 24.0))
    for c in range(3):
        for t in range(5):
            acc = 0.0
            for i in range(3):
                for j in range(4):
                    acc += frames[t, i, j, c]
            assert abs(traces[c].samples[t] - acc / 12) < 1e-12


def test_signal_invariants():
    with pytest.raises(ContractViolation):
        RppgSignal([1.0], 30.0)
    with pytest.raises(ContractViolation):
        RppgSignal([1.0, 2.0], -1.0)


# -- detrend ------------------------------------------------------------------

def dense_detrend(x, lam):
    n = x.size
    d2 = np.zeros((n - 2, n))
    for i in range(n - 2):
        d2[i, i:i + 3] = (1, -2, 1)
    return x - np.linalg.solve(np.eye(n) + lam ** 2 * d2.T @ d2, x)


def test_detrend_constant():
    assert np.max(np.abs(detrend(sig(np.full(100, 3.7))).samples)) < 1e-9


def test_detrend_ramp():
    ramp = np.linspace(0, 5.0, 200)
    out = detrend(sig(ramp), 300.0).samples
    assert np.max(np.abs(out[5:-5])) < 1e-6 * 5.0
    assert np.max(np.abs(out - dense_detrend(ramp, 300.0))) < 1e-9


def test_detrend_keeps_in_band_tone():
    x = tone(1.5, seconds=20)
    out = detrend(sig(x), 300.0).samples
    ref = dense_detrend(x, 300.0)
    assert np.max(np.abs(out - ref)) < 1e-9
    amp = np.abs(direct_dft(out)[30]) * 2 / x.size
    assert abs(amp - 1.0) < 0.05


def test_detrend_matches_dense_on_random_signal():
    x = np.random.default_rng(1).normal(size=150).cumsum()
    assert np.max(np.abs(detrend(sig(x), 50.0).samples - dense_detrend(x, 50.0))) < 1e-8


def test_detrend_lambda_scales_with_fs():
    x = np.random.default_rng(2).normal(size=120)
    assert np.array_equal(detrend(sig(x, 60.0)).samples, detrend(sig(x, 60.0), 600.0).samples)


def test_detrend_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        detrend(sig(np.ones(10)), 0.0)
    with pytest.raises(ContractViolation):
        detrend(sig(np.ones(2)))


# -- bandpass -----------------------------------------------------------------

def dft_bandpass(x, fs, lo, hi):
    n = x.size
    X = direct_dft(x)
    f = np.abs(np.fft.fftfreq(n, 1 / fs))
    X[(f < lo) | (f > hi)] = 0
    k = np.arange(n)
    return np.real(np.exp(2j * np.pi * np.outer(k, k) / n) @ X) / n


def test_bandpass_dc_removed():
    assert np.max(np.abs(bandpass(sig(np.full(90, 2.0))).samples)) < 1e-9


def test_bandpass_passes_on_bin_tone():
    x = tone(1.2, seconds=10)
    out = bandpass(sig(x)).samples
    assert np.max(np.abs(out - x)) < 1e-6
    assert np.max(np.abs(out - dft_bandpass(x, 30.0, 0.7, 4.0))) < 1e-9


def test_bandpass_rejects_out_of_band_tone():
    x = tone(6.0, seconds=10)
    out = bandpass(sig(x)).samples
    assert np.sum(out ** 2) < 1e-10 * np.sum(x ** 2)


def test_bandpass_matches_direct_dft_on_noise():
    x = np.random.default_rng(3).normal(size=151)
    assert np.max(np.abs(bandpass(sig(x)).samples - dft_bandpass(x, 30.0, 0.7, 4.0))) < 1e-9


def test_bandpass_idempotent():
    x = np.random.default_rng(4).normal(size=300)
    once = bandpass(sig(x))
    assert np.max(np.abs(bandpass(once).samples - once.samples)) < 1e-9


@pytest.mark.parametrize("band", [(0.0, 4.0), (2.0, 1.0), (0.7, 15.0)])
def test_bandpass_bad_band(band):
    with pytest.raises(ConfigurationError):
        bandpass(sig(np.zeros(60)), *band)


# -- power spectrum -----------------------------------------------------------

def welch_oracle(x, fs, seg):
    """Welch from first principles: Hann segments, direct DFT, one-sided density."""
    x = x - x.mean()
    n = np.arange(seg)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / seg)  # periodic Hann
    step = seg // 2
    starts = range(0, x.size - seg + 1, step)
    acc = np.zeros(seg // 2 + 1)
    count = 0
    for s in starts:
        X = direct_dft(x[s:s + seg] * win)[:seg // 2 + 1]
        p = np.abs(X) ** 2 / (fs * np.sum(win ** 2))
        p[1:] *= 2
        if seg % 2 == 0:
            p[-1] /= 2
        acc += p
        count += 1
    return np.arange(seg // 2 + 1) * fs / seg, acc / count


@pytest.mark.parametrize("n,fs", [(600, 30.0), (2500, 30.0), (700, 60.0)])
def test_power_spectrum_matches_welch_oracle(n, fs):
    x = np.random.default_rng(n).normal(size=n)
    spec = power_spectrum(sig(x, fs))
    freqs, power = welch_oracle(x, fs, segment_length(n, fs))
    assert np.allclose(spec.freqs, freqs, rtol=0, atol=1e-12)
    assert np.max(np.abs(spec.power - power)) < 1e-10 * power.max()


def test_twenty_second_record_has_005hz_bins():
    spec = power_spectrum(sig(tone(1.2)))
    assert abs(spec.resolution - 0.05) < 1e-12


def test_on_bin_tone_dominates_outside_main_lobe():
    spec = power_spectrum(sig(tone(1.5)))
    k = int(np.argmax(spec.power))
    assert abs(spec.freqs[k] - 1.5) < 1e-12
    # the Hann main lobe spans the peak bin and one neighbour on each side
    far = np.delete(spec.power, [k - 1, k, k + 1])
    assert spec.power[k] >= 100 * far.max()


def test_zero_signal_zero_power():
    assert not power_spectrum(sig(np.zeros(64))).power.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(64, 3000))
def test_parseval_windowed_identity(seed, n):
    # Exact form: the area under a Welch density equals the mean over segments
    # of the window-weighted segment energy.
    x = np.random.default_rng(seed).normal(size=n)
    spec = power_spectrum(sig(x))
    seg = segment_length(n, 30.0)
    xc = x - x.mean()
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(seg) / seg)
    energies = [np.sum((xc[s:s + seg] * win) ** 2) / np.sum(win ** 2)
                for s in range(0, n - seg + 1, seg // 2)]
    area = spec.power.sum() * spec.resolution
    assert abs(area - np.mean(energies)) < 1e-10 * np.mean(energies)


@pytest.mark.parametrize("seed", range(5))
def test_parseval_long_records(seed):
    x = np.random.default_rng(seed).normal(size=30_000)
    spec = power_spectrum(sig(x))
    area = spec.power.sum() * spec.resolution
    assert abs(area - np.var(x)) / np.var(x) < 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.01, 100.0))
def test_power_scales_quadratically(seed, c):
    x = np.random.default_rng(seed).normal(size=300)
    a, b = power_spectrum(sig(x)), power_spectrum(sig(c * x))
    assert np.allclose(b.power, c * c * a.power, rtol=1e-9, atol=0)
    assert estimate_hr(a).bpm == estimate_hr(b).bpm


def test_power_spectrum_needs_eight_samples():
    with pytest.raises(ContractViolation):
        power_spectrum(sig(np.ones(7)))


# -- HR -----------------------------------------------------------------------

def test_one_hz_is_sixty_bpm():
    hr = estimate_hr(power_spectrum(sig(tone(1.0))))
    assert hr.bpm == 60.0 and hr.peak_freq == 1.0
    assert 0 < hr.confidence <= 1


def test_1p2_hz_is_72_bpm():
    assert abs(estimate_hr(power_spectrum(sig(tone(1.2)))).bpm - 72) <= 1.5


@pytest.mark.parametrize("f", [0.8, 1.0, 1.5, 2.5, 3.5])
def test_tone_sweep_within_one_bin(f):
    spec = power_spectrum(sig(tone(f)))
    assert abs(estimate_hr(spec).bpm - 60 * f) <= 60 * spec.resolution


def test_noisy_tone_matches_zero_padded_dft_oracle():
    rng = np.random.default_rng(0)
    clean = tone(1.5, seconds=30)
    x = clean + rng.normal(scale=np.sqrt(np.mean(clean ** 2)), size=clean.size)  # SNR 0 dB
    spec = power_spectrum(sig(x))
    hr = estimate_hr(spec)
    padded = np.concatenate([x - x.mean(), np.zeros(3 * x.size)])
    mag = np.abs(direct_dft(padded)[:padded.size // 2])
    f = np.arange(mag.size) * 30.0 / padded.size
    band = (f >= 0.7) & (f <= 4.0)
    oracle = 60 * f[band][np.argmax(mag[band])]
    bin_bpm = 60 * spec.resolution
    assert abs(hr.bpm - 90) <= bin_bpm
    assert abs(hr.bpm - oracle) <= bin_bpm


def test_tie_break_lowest_frequency():
    spec = SpectralEstimate(np.array([0.5, 1.0, 1.5, 2.0]), np.array([9.0, 1.0, 3.0, 3.0]))
    hr = estimate_hr(spec, (0.7, 4.0))
    assert hr.peak_freq == 1.5 and hr.bpm == 90.0
    assert hr.confidence == pytest.approx(3.0 / 7.0)


def test_empty_band():
    spec = SpectralEstimate(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ConfigurationError):
        estimate_hr(spec, (0.2, 0.8))


def test_green_channel_dominates_on_synthetic_clip():
    clip, _, hr = generate_pulse_clip(SynthConfig(hr_bpm=84, seed=3))
    peaks = []
    for trace in spatial_mean_rgb(clip):
        spec = power_spectrum(bandpass(detrend(trace)))
        sel = (spec.freqs >= 0.7) & (spec.freqs <= 4.0)
        peaks.append(spec.power[sel].max())
    assert peaks[1] > peaks[0] and peaks[1] > peaks[2]
    assert abs(green_baseline(clip).bpm - hr) <= 3.0


def test_trace_hr_on_drifting_tone():
    t = np.arange(600) / 30.0
    x = np.sin(2 * np.pi * 2.0 * t) + 0.5 * t
    hr, spec = trace_hr(sig(x))
    assert abs(hr.bpm - 120) <= 60 * spec.resolution


# -- CSV ----------------------------------------------------------------------

def test_signal_csv_round_trip(tmp_path):
    s = sig(np.random.default_rng(5).normal(size=20), 25.0)
    p = write_signal_csv(s, tmp_path / "s.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "t_s,value" and len(lines) == 21
    back = read_signal_csv(p)
    assert np.allclose(back.samples, s.samples, rtol=1e-8, atol=0)
    assert back.fs == pytest.approx(25.0)


def test_spectrum_csv(tmp_path):
    p = write_spectrum_csv(power_spectrum(sig(tone(1.0))), tmp_path / "p.csv")
    rows = p.read_text().splitlines()
    assert rows[0] == "freq_hz,power"
    assert len(rows) == 302
