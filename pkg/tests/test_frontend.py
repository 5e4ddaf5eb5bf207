import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperspotter import frontend as fe
from hyperspotter.frontend import AudioClip


def _write_raw(path, samples_i16, channels=1, rate=16000, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples_i16).astype(f"<i{width}").tobytes())


def _slaney_mel(f):
    # independent restatement: linear below 1 kHz (200/3 Hz per mel), log above
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3)
    log = 15.0 + np.log(np.maximum(f, 1e-9) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f < 1000.0, lin, log)


def test_load_silence(tmp_path):
    _write_raw(tmp_path / "s.wav", np.zeros(16000))
    clip = fe.load_wav(tmp_path / "s.wav")
    assert clip.samples.shape == (16000,) and not clip.samples.any()
    assert clip.sample_rate == 16000 and clip.duration == 1.0


def test_load_rejects_stereo(tmp_path):
    _write_raw(tmp_path / "st.wav", np.zeros(200), channels=2)
    with pytest.raises(fe.AudioFormatError, match="expected mono"):
        fe.load_wav(tmp_path / "st.wav")


def test_load_rejects_rate_and_width(tmp_path):
    _write_raw(tmp_path / "r.wav", np.zeros(100), rate=8000)
    with pytest.raises(fe.AudioFormatError, match="sample_rate"):
        fe.load_wav(tmp_path / "r.wav")
    _write_raw(tmp_path / "w.wav", np.zeros(100), width=4)
    with pytest.raises(fe.AudioFormatError, match="PCM16"):
        fe.load_wav(tmp_path / "w.wav")


def test_full_scale_square_wave(tmp_path):
    sq = np.where(np.arange(800) % 40 < 20, 32767, -32768)
    _write_raw(tmp_path / "sq.wav", sq)
    vals = set(np.unique(fe.load_wav(tmp_path / "sq.wav").samples))
    assert vals == {-1.0, 32767 / 32768}


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(0).uniform(-1, 1, 999) * 32768) / 32768
    x = np.clip(x, -1, 32767 / 32768)
    fe.write_wav(tmp_path / "x.wav", AudioClip(x))
    assert np.array_equal(fe.load_wav(tmp_path / "x.wav").samples, x)


def test_one_second_frame_count():
    assert fe.log_mel(AudioClip(np.zeros(16000))).n_frames == 98


@given(st.integers(400, 20000))
@settings(max_examples=40, deadline=None)
def test_frame_count_formula(n):
    mel = fe.log_mel(AudioClip(np.zeros(n)))
    assert mel.frames.shape == (1 + (n - 400) // 160, 80)


def test_too_short_clip():
    with pytest.raises(ValueError, match="too short"):
        fe.log_mel(AudioClip(np.zeros(399)))


def test_silence_is_log_floor():
    mel = fe.log_mel(AudioClip(np.zeros(4000)))
    assert np.all(mel.frames == np.log(1e-10))


def test_tone_peaks_at_nearest_band():
    t = np.arange(16000) / 16000
    mel = fe.log_mel(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t)))
    peaks = mel.frames.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    top = _slaney_mel(8000.0)
    centers_mel = np.linspace(0, top, 82)[1:-1]
    centers_hz = np.where(centers_mel < 15, centers_mel * 200 / 3,
                          1000 * np.exp((centers_mel - 15) * np.log(6.4) / 27))
    assert peaks[0] == int(np.argmin(np.abs(centers_hz - 1000.0)))


def test_filterbank_area_normalised():
    fb = fe.mel_filterbank()
    edges = fe.mel_band_edges()
    assert fb.shape == (80, 257) and np.all(fb >= 0)
    # continuous triangles of height 2/width have unit area in Hz; sampling on the
    # 31.25 Hz FFT grid can only undershoot the apex, and barely so for wide bands
    width = edges[2:] - edges[:-2]
    height = 2.0 / width
    assert np.all(fb.max(axis=1) <= height * (1 + 1e-9))
    wide = width > 16 * 16000 / 512
    np.testing.assert_allclose(fb.max(axis=1)[wide], height[wide], rtol=0.07)


def test_hop_shift_equivariance():
    x = np.random.default_rng(1).standard_normal(6000) * 0.1
    a = fe.log_mel(AudioClip(x)).frames
    b = fe.log_mel(AudioClip(np.concatenate([np.zeros(160), x]))).frames
    np.testing.assert_allclose(b[1:], a[:b.shape[0] - 1], atol=1e-9)


def test_export_mel_csv(tmp_path):
    mel = fe.log_mel(AudioClip(np.random.default_rng(0).standard_normal(2000) * 0.1))
    fe.export_mel_csv(mel, tmp_path / "m.csv")
    back = np.loadtxt(tmp_path / "m.csv", delimiter=",")
    assert back.shape == (mel.n_frames, 80)
    np.testing.assert_allclose(back, mel.frames, rtol=1e-5)


# -- noise ----------------------------------------------------------------------------------------

def test_mix_inf_snr_returns_clean():
    clean = AudioClip(np.linspace(-0.5, 0.5, 1000))
    out = fe.mix_noise(clean, fe.gen_noise("white", 0.1), float("inf"))
    assert np.array_equal(out.samples, clean.samples)


def test_equal_power_zero_db_scale_is_one():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= np.sqrt(np.mean(c ** 2) / np.mean(n ** 2))
    assert fe.noise_scale(c, n, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_zero_power_rejected():
    with pytest.raises(ValueError, match="clean"):
        fe.mix_noise(AudioClip(np.zeros(100)), AudioClip(np.ones(100)), 5.0)
    with pytest.raises(ValueError, match="noise"):
        fe.mix_noise(AudioClip(np.ones(100) * 0.1), AudioClip(np.zeros(100)), 5.0)


@pytest.mark.parametrize("snr", [0.0, 5.0, 10.0, 15.0])
@pytest.mark.parametrize("kind", ["white", "pub"])
def test_mix_hits_requested_snr(snr, kind):
    t = np.arange(16000) / 16000
    clean = AudioClip(0.2 * np.sin(2 * np.pi * 440 * t))
    noise = fe.gen_noise(kind, 0.7, seed=3)  # shorter than clean: tiled
    noisy = fe.mix_noise(clean, noise, snr, np.random.default_rng(0))
    assert abs(fe.measure_snr(clean.samples, noisy.samples) - snr) <= 0.1


def test_mix_peak_normalises():
    clean = AudioClip(np.full(1000, 0.9))
    out = fe.mix_noise(clean, fe.gen_noise("white", 0.1, seed=1), -10.0, np.random.default_rng(0))
    assert np.max(np.abs(out.samples)) == pytest.approx(1.0)


def test_white_noise_statistics_and_determinism():
    a = fe.gen_noise("white", 2.0, seed=5)
    b = fe.gen_noise("white", 2.0, seed=5)
    assert np.array_equal(a.samples, b.samples)
    n = len(a.samples)
    assert abs(a.samples.mean()) <= 3 * a.samples.std() / np.sqrt(n)


def test_pub_noise_from_given_speech_is_deterministic():
    src = [AudioClip(np.sin(np.arange(3000) * f)) for f in (0.05, 0.11, 0.23)]
    a = fe.gen_noise("pub", 0.5, seed=2, speech=src)
    b = fe.gen_noise("pub", 0.5, seed=2, speech=src)
    assert np.array_equal(a.samples, b.samples) and len(a.samples) == 8000
    assert np.max(np.abs(a.samples)) == pytest.approx(0.5)


def test_gen_noise_validation():
    with pytest.raises(ValueError):
        fe.gen_noise("white", 0.0)
    with pytest.raises(ValueError):
        fe.gen_noise("pink", 1.0)


def test_train_snr_range():
    rng = np.random.default_rng(0)
    draws = [fe.sample_train_snr(rng) for _ in range(2000)]
    assert 5.0 <= min(draws) and max(draws) <= 15.0
    assert abs(np.mean(draws) - 10.0) < 0.3
