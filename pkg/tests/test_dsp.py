import io
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secost import dsp


def pcm16_bytes(samples, rate=16000, channels=1):
    out = io.BytesIO()
    with wave.open(out, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())
    return out.getvalue()


def float32_wav(samples, rate=16000, channels=1):
    payload = np.asarray(samples, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, channels, rate, rate * 4 * channels, 4 * channels, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


# -- decode_wav ---------------------------------------------------------------------

def test_decode_silence():
    buf = dsp.decode_wav(pcm16_bytes(np.zeros(16000)))
    assert buf.sample_rate == 16000
    assert buf.samples.shape == (16000,)
    assert not buf.samples.any()


def test_decode_stereo_antiphase_averages_to_zero():
    frames = np.tile([16384, -16384], 1000)
    buf = dsp.decode_wav(pcm16_bytes(frames, channels=2))
    assert buf.samples.shape == (1000,)
    assert np.all(buf.samples == 0)


def test_decode_pcm16_scaling():
    buf = dsp.decode_wav(pcm16_bytes([16384, -32768, 0]))
    np.testing.assert_array_equal(buf.samples, [0.5, -1.0, 0.0])


def test_decode_float32():
    x = np.array([0.25, -0.75, 0.1], dtype=np.float32)
    np.testing.assert_array_equal(dsp.decode_wav(float32_wav(x, 8000)).samples, x)


def test_decode_rejects_garbage():
    with pytest.raises(dsp.MalformedHeader):
        dsp.decode_wav(b"not a wav file at all")
    with pytest.raises(dsp.MalformedHeader):
        dsp.decode_wav(pcm16_bytes([1, 2, 3])[:20])


def test_decode_rejects_compressed():
    data = bytearray(pcm16_bytes([1, 2, 3]))
    data[20:22] = struct.pack("<H", 2)    # ADPCM format tag
    with pytest.raises(dsp.UnsupportedEncoding):
        dsp.decode_wav(bytes(data))


def test_wav_roundtrip(tmp_path):
    x = np.array([0.0, 0.5, -0.5, 0.25], dtype=np.float32)
    dsp.write_wav(tmp_path / "a.wav", dsp.SampleBuffer(x, 16000))
    np.testing.assert_array_equal(dsp.read_wav(tmp_path / "a.wav").samples, x)


def test_sample_buffer_invariants():
    with pytest.raises(ValueError):
        dsp.SampleBuffer(np.zeros(4), 0)
    with pytest.raises(ValueError):
        dsp.SampleBuffer(np.array([0.0, np.nan]), 16000)


# -- resample --------------------------------------------------------------------------

def test_resample_identity_is_bit_exact():
    x = np.random.default_rng(0).uniform(-1, 1, 500).astype(np.float32)
    out = dsp.resample(dsp.SampleBuffer(x, 16000), 16000)
    assert out.samples.tobytes() == x.tobytes()


def test_resample_constant():
    out = dsp.resample(dsp.SampleBuffer(np.full(3200, 0.7, np.float32), 32000), 16000)
    assert len(out.samples) == 1600
    np.testing.assert_allclose(out.samples, 0.7, rtol=0, atol=1e-7)


def test_resample_ramp_edge_clamp():
    out = dsp.resample(dsp.SampleBuffer(np.array([0, 1, 2, 3], np.float32), 8000), 16000)
    np.testing.assert_array_equal(out.samples, [0, 0.5, 1, 1.5, 2, 2.5, 3, 3])


def test_resample_rejects_bad_rate():
    with pytest.raises(ValueError):
        dsp.resample(dsp.SampleBuffer(np.zeros(4), 16000), 0)


# -- log-mel ------------------------------------------------------------------------------

def test_ten_seconds_gives_999_frames():
    spec = dsp.logmel(dsp.SampleBuffer(np.zeros(160000, np.float32), 16000))
    assert spec.values.shape == (999, 64)
    assert spec.frame_rate == 100
    assert np.all(spec.values == np.float32(np.log(1e-10)))


def test_sine_peaks_in_nearest_filter():
    t = np.arange(16000) / 16000
    spec = dsp.logmel(dsp.SampleBuffer(0.5 * np.sin(2 * np.pi * 1000 * t), 16000))
    peaks = spec.values.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    assert peaks[0] == np.argmin(np.abs(dsp.mel_centers() - 1000))


def test_filterbank_shape_and_triangles():
    fb = dsp.mel_filterbank()
    assert fb.shape == (64, 129)
    assert (fb >= 0).all()
    assert not fb.flags.writeable
    # The lowest triangle (0-55 Hz) lies strictly between DFT bins 0 and 1 (62.5 Hz).
    assert not fb[0].any()
    for row in fb[1:]:
        nz = np.flatnonzero(row)
        assert len(nz) > 0
        assert np.all(np.diff(nz) == 1)          # zero outside one contiguous support
        peak = row.argmax()
        assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
        assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)
    # Adjacent triangles overlap by construction; on the 62.5 Hz bin grid the overlap
    # is visible for every pair above ~900 Hz, where filters span several bins.
    overlaps = [(fb[i] * fb[i + 1]).sum() > 0 for i in range(63)]
    assert all(overlaps[14:])


def test_filter_edges_span_zero_to_nyquist():
    edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000), 66))
    assert edges[0] == 0
    assert edges[-1] == pytest.approx(8000)
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel([0, 440, 1000, 8000])), [0, 440, 1000, 8000])


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=256, max_value=4000))
def test_frame_count_matches_naive_slicing(n):
    x = np.random.default_rng(n).uniform(-1, 1, n).astype(np.float32)
    naive = [x[i:i + 256] for i in range(0, n - 256 + 1, 160)]
    assert dsp.logmel(dsp.SampleBuffer(x, 16000)).frames == len(naive) == (n - 256) // 160 + 1


def test_shift_covariance():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 8000).astype(np.float32)
    a = dsp.logmel(dsp.SampleBuffer(x, 16000)).values
    b = dsp.logmel(dsp.SampleBuffer(np.concatenate([np.zeros(160, np.float32), x]), 16000)).values
    assert b.shape[0] == a.shape[0] + 1
    np.testing.assert_allclose(b[1:], a, atol=1e-5, rtol=0)


def test_white_noise_energy_grows_linearly():
    rng = np.random.default_rng(2)

    def energy(seconds):
        x = rng.uniform(-0.5, 0.5, int(16000 * seconds)).astype(np.float32)
        return np.exp(dsp.logmel(dsp.SampleBuffer(x, 16000)).values.astype(np.float64)).sum()

    assert energy(4) / energy(2) == pytest.approx(2, rel=0.1)


def test_logmel_errors():
    with pytest.raises(dsp.WrongSampleRate):
        dsp.logmel(dsp.SampleBuffer(np.zeros(1000), 8000))
    with pytest.raises(dsp.TooShort):
        dsp.logmel(dsp.SampleBuffer(np.zeros(255), 16000))


def test_logmel_deterministic_and_finite():
    x = np.random.default_rng(3).uniform(-1, 1, 4000).astype(np.float32)
    a = dsp.logmel(dsp.SampleBuffer(x, 16000)).values
    b = dsp.logmel(dsp.SampleBuffer(x, 16000)).values
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all()


# -- LMEL files ------------------------------------------------------------------------------

def test_lmel_roundtrip(tmp_path):
    spec = dsp.LogMelSpec(np.random.default_rng(4).standard_normal((7, 64)).astype(np.float32))
    dsp.write_lmel(tmp_path / "x.lmel", spec)
    raw = (tmp_path / "x.lmel").read_bytes()
    assert raw[:4] == b"LMEL"
    assert struct.unpack_from("<III", raw, 4) == (1, 7, 64)
    assert len(raw) == 16 + 7 * 64 * 4
    np.testing.assert_array_equal(dsp.read_lmel(tmp_path / "x.lmel").values, spec.values)


def test_lmel_rejects_bad_files():
    good = dsp.encode_lmel(dsp.LogMelSpec(np.zeros((2, 64), np.float32)))
    with pytest.raises(dsp.MalformedHeader):
        dsp.decode_lmel(good[:-4])
    with pytest.raises(dsp.MalformedHeader):
        dsp.decode_lmel(b"XXXX" + good[4:])
    with pytest.raises(dsp.MalformedHeader):
        dsp.decode_lmel(good[:4] + struct.pack("<I", 9) + good[8:])
