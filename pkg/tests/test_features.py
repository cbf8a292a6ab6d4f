import wave

import numpy as np
import pytest
import scipy.fft
from scipy import integrate

from crossmodal import features as F
from crossmodal.errors import FormatError, InputError

SR = F.SAMPLE_RATE


def tone(freq, seconds=1.0, sr=SR, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return F.AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def dominant_hz(samples, sr):
    spec = np.abs(np.fft.rfft(samples * np.hanning(samples.size)))
    return np.argmax(spec) * sr / samples.size, sr / samples.size


def test_thirty_second_clip_shapes():
    clip = F.AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 30 * SR), SR)
    m = F.mfcc(clip)
    assert m.values.shape == (20, 646)
    assert m.kind == "mfcc"
    mel = F.mel_spectrogram(clip)
    assert mel.values.shape == (96, 646)
    assert np.all(np.isfinite(mel.values))


def test_silence():
    clip = F.AudioClip(np.zeros(3 * SR), SR)
    m = F.mfcc(clip).values
    np.testing.assert_allclose(m[0], np.sqrt(96) * np.log(F.LOG_FLOOR), atol=1e-9)
    np.testing.assert_allclose(m[1:], 0.0, atol=1e-9)
    mel = F.mel_spectrogram(clip).values
    np.testing.assert_array_equal(mel, np.log(F.LOG_FLOOR))


def test_doubling_amplitude_adds_log_four():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.2, 0.2, 2 * SR)
    a = F.mel_spectrogram(F.AudioClip(x, SR)).values
    b = F.mel_spectrogram(F.AudioClip(2 * x, SR)).values
    np.testing.assert_allclose(b - a, np.log(4.0), atol=1e-9)


def test_tone_at_filter_centre_peaks_in_that_band():
    _, edges = F.mel_filterbank()
    for band in (10, 40, 70):
        spec = F.mel_spectrogram(tone(edges[band + 1], 2.0)).values
        assert np.argmax(spec[:, spec.shape[1] // 2]) == band


def test_filterbank_unit_area():
    weights, edges = F.mel_filterbank()
    df = SR / F.FRAME_LENGTH
    # bins are too coarse for the narrowest filters; the wide ones are compared
    wide = (edges[2:] - edges[:-2]) > 8 * df
    np.testing.assert_allclose(weights[wide].sum(axis=1) * df, 1.0, rtol=0.02)
    # exact continuous triangle integrates to 1
    lo, c, hi = edges[50:53]
    height = 2.0 / (hi - lo)
    area, _ = integrate.quad(lambda f: height * max(0.0, min((f - lo) / (c - lo), (hi - f) / (hi - c))), lo, hi,
                             points=[c])
    assert area == pytest.approx(1.0, abs=1e-9)


def test_mel_scale_round_trip_and_anchor():
    f = np.array([0.0, 200.0, 1000.0, 5000.0, 11025.0])
    np.testing.assert_allclose(F.mel_to_hz(F.hz_to_mel(f)), f, atol=1e-9)
    assert F.hz_to_mel(1000.0) == pytest.approx(15.0)


def test_dct_matrix():
    d = F.dct_matrix(96, 96)
    np.testing.assert_allclose(d @ d.T, np.eye(96), atol=1e-12)
    x = np.random.default_rng(2).standard_normal((96, 5))
    np.testing.assert_allclose(F.dct_matrix(20, 96) @ x, scipy.fft.dct(x, type=2, norm="ortho", axis=0)[:20],
                               atol=1e-12)


def test_frame_count():
    assert F.n_frames(30 * SR) == 646
    assert F.n_frames(1024) == 1
    assert F.n_frames(1025) == 2


def test_too_short_and_wrong_rate():
    with pytest.raises(InputError):
        F.mfcc(F.AudioClip(np.zeros(100), SR))
    with pytest.raises(InputError):
        F.mfcc(F.AudioClip(np.zeros(50_000), 44_100))


def test_resample_same_rate_is_identity():
    clip = F.AudioClip(np.random.default_rng(3).standard_normal(1000), SR)
    np.testing.assert_array_equal(F.resample(clip, SR).samples, clip.samples)


@pytest.mark.parametrize("src", [44_100, 16_000, 48_000])
def test_resample_preserves_constant(src):
    out = F.resample(F.AudioClip(np.full(src, 0.25), src), SR)
    assert out.sample_rate == SR
    assert len(out.samples) == SR
    np.testing.assert_allclose(out.samples, 0.25, atol=1e-3)


def test_resample_keeps_tone_frequency():
    out = F.resample(tone(440.0, 1.0, 44_100), SR)
    peak, bin_width = dominant_hz(out.samples, SR)
    assert abs(peak - 440.0) <= bin_width


def test_resample_errors():
    with pytest.raises(InputError):
        F.resample(F.AudioClip(np.zeros(0), SR), 16_000)
    with pytest.raises(InputError):
        F.resample(F.AudioClip(np.zeros(10), SR), 0)


def test_decimate_partition():
    values = np.arange(646, dtype=float)[None, :].repeat(20, axis=0)
    parts = F.decimate4(F.Spectrogram(values, "mfcc"))
    assert len(parts) == 4
    assert all(p.values.shape == (20, 161) for p in parts)
    used = np.sort(np.concatenate([p.values[0] for p in parts]))
    np.testing.assert_array_equal(used, np.arange(644))
    np.testing.assert_array_equal(parts[1].values[0, :3], [1, 5, 9])
    const = F.decimate4(F.Spectrogram(np.ones((20, 646)), "mfcc"))
    for p in const[1:]:
        np.testing.assert_array_equal(p.values, const[0].values)
    with pytest.raises(InputError):
        F.decimate4(F.Spectrogram(np.ones((20, 600)), "mfcc"))


def test_extraction_is_deterministic():
    clip = tone(1234.0, 1.5)
    np.testing.assert_array_equal(F.mfcc(clip).values, F.mfcc(clip).values)


def test_wav_round_trip_and_stereo(tmp_path):
    rng = np.random.default_rng(4)
    x = np.round(rng.uniform(-0.5, 0.5, 500) * 32768) / 32768
    path = tmp_path / "a.wav"
    F.write_wav(path, F.AudioClip(x, 16_000))
    back = F.read_wav(path)
    assert back.sample_rate == 16_000
    np.testing.assert_array_equal(back.samples, x)

    left = np.array([1000, -2000, 300], dtype="<i2")
    right = np.array([3000, 0, -300], dtype="<i2")
    stereo = tmp_path / "s.wav"
    with wave.open(str(stereo), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(np.stack([left, right], axis=1).tobytes())
    np.testing.assert_allclose(F.read_wav(stereo).samples, (left + right.astype(float)) / 2 / 32768)


def test_wav_unsupported_formats(tmp_path):
    eight = tmp_path / "8bit.wav"
    with wave.open(str(eight), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(1)
        wf.setframerate(8000)
        wf.writeframes(bytes(100))
    with pytest.raises(FormatError, match="16-bit"):
        F.read_wav(eight)
    quad = tmp_path / "quad.wav"
    with wave.open(str(quad), "wb") as wf:
        wf.setnchannels(4)
        wf.setsampwidth(2)
        wf.setframerate(8000)
        wf.writeframes(bytes(80))
    with pytest.raises(FormatError, match="channels"):
        F.read_wav(quad)
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"not a wav at all")
    with pytest.raises(FormatError):
        F.read_wav(junk)


def write_lines(path, rows):
    path.write_text("".join(r + "\n" for r in rows), encoding="utf-8")


def test_text_features_well_formed(tmp_path):
    rng = np.random.default_rng(5)
    records = [(f"s{i}", rng.standard_normal(300)) for i in range(3)]
    path = tmp_path / "t.tsv"
    F.write_vectors(path, records)
    feats = F.load_text_features(path)
    assert [f.id for f in feats] == ["s0", "s1", "s2"]
    for f, (_, v) in zip(feats, records):
        np.testing.assert_array_equal(f.vector, v)


def test_text_features_bad_width_names_row(tmp_path):
    path = tmp_path / "t.tsv"
    write_lines(path, ["# header", "good\t" + ",".join(["0.5"] * 300), "short\t" + ",".join(["1"] * 299)])
    with pytest.raises(FormatError, match=r"t\.tsv:3: row 'short' has width 299"):
        F.load_text_features(path)


def test_text_features_duplicates_and_junk(tmp_path):
    path = tmp_path / "d.tsv"
    write_lines(path, ["a\t1,2", "a\t3,4"])
    with pytest.raises(FormatError, match="duplicate"):
        F.load_vectors(path)
    write_lines(path, ["a\t1,nan"])
    with pytest.raises(FormatError, match="non-finite"):
        F.load_vectors(path)
    write_lines(path, ["a\t1,x"])
    with pytest.raises(FormatError, match="non-numeric"):
        F.load_vectors(path)
    write_lines(path, ["no tab here"])
    with pytest.raises(FormatError):
        F.load_vectors(path)


def test_format_vectors_bit_exact():
    v = np.array([0.1, 1 / 3, -1e-300, 123456789.123])
    text = F.format_vectors([("x", v)])
    back = np.array([float(s) for s in text.strip().split("\t")[1].split(",")])
    assert back.tobytes() == v.tobytes()
    with pytest.raises(FormatError):
        F.format_vectors([("a\tb", v)])
