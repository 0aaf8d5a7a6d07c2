"""WAV decoding, resampling and log-mel features.

Defaults: 16 kHz audio, 256-sample (16 ms) Hann window, 160-sample (10 ms)
hop, 256-point DFT, 64 HTK-mel triangles from 0 Hz to Nyquist, natural log
with a 1e-10 floor.
"""

from __future__ import annotations

import io
import os
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_MELS = 64
WIN_MS = 16.0
HOP_MS = 10.0
LOG_FLOOR = 1e-10

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class MalformedHeader(ValueError):
    pass


class UnsupportedEncoding(ValueError):
    pass


class TooShort(ValueError):
    pass


class WrongSampleRate(ValueError):
    pass


@dataclass
class SampleBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelSpec:
    values: np.ndarray      # (frames, n_mels)
    frame_rate: float = 100.0

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    @property
    def frames(self) -> int:
        return self.values.shape[0]


# -- WAV ------------------------------------------------------------------------

def decode_wav(data: bytes) -> SampleBuffer:
    """Decode PCM16 or float32 RIFF/WAVE bytes, averaging channels to mono."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader("missing RIFF/WAVE signature")
    fmt = None
    payload = None
    off = 12
    while off + 8 <= len(data):
        cid = data[off:off + 4]
        (size,) = struct.unpack_from("<I", data, off + 4)
        body = data[off + 8:off + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeader("fmt chunk too short")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                (tag,) = struct.unpack_from("<H", body, 24)
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            payload = body
        off += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise MalformedHeader("missing fmt or data chunk")
    tag, channels, rate, bits = fmt
    if channels < 1 or rate < 1:
        raise MalformedHeader(f"bad channel count {channels} or rate {rate}")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2").astype(np.float32) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedEncoding(f"format tag {tag} with {bits} bits per sample")
    x = x[:len(x) // channels * channels].reshape(-1, channels)
    mono = x[:, 0] if channels == 1 else x.mean(axis=1, dtype=np.float64).astype(np.float32)
    return SampleBuffer(mono, rate)


def read_wav(path) -> SampleBuffer:
    return decode_wav(Path(path).read_bytes())


def encode_wav_pcm16(buf: SampleBuffer) -> bytes:
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    out = io.BytesIO()
    with wave.open(out, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(pcm.tobytes())
    return out.getvalue()


def write_wav(path, buf: SampleBuffer):
    Path(path).write_bytes(encode_wav_pcm16(buf))


# -- resampling -------------------------------------------------------------------

def resample(buf: SampleBuffer, target_rate: int) -> SampleBuffer:
    """Linear-interpolation resample; positions past the last sample clamp to it."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == buf.sample_rate:
        return SampleBuffer(buf.samples.copy(), buf.sample_rate)
    n_out = int(round(len(buf.samples) * target_rate / buf.sample_rate))
    pos = np.arange(n_out, dtype=np.float64) * (buf.sample_rate / target_rate)
    src = np.arange(len(buf.samples), dtype=np.float64)
    out = np.interp(pos, src, buf.samples.astype(np.float64))
    return SampleBuffer(out.astype(np.float32), target_rate)


# -- log-mel ----------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = 256, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular HTK-mel filters spanning 0 Hz..Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = (len(x) - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]


def logmel(buf: SampleBuffer, n_mels: int = N_MELS, win_ms: float = WIN_MS,
           hop_ms: float = HOP_MS) -> LogMelSpec:
    if buf.sample_rate != SAMPLE_RATE:
        raise WrongSampleRate(f"expected {SAMPLE_RATE} Hz audio, got {buf.sample_rate}")
    win = int(round(buf.sample_rate * win_ms / 1000))
    hop = int(round(buf.sample_rate * hop_ms / 1000))
    if len(buf.samples) < win:
        raise TooShort(f"{len(buf.samples)} samples < window of {win}")
    frames = frame_signal(buf.samples.astype(np.float64), win, hop)
    window = np.hanning(win + 1)[:-1]   # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=win, axis=1)) ** 2
    energy = power @ mel_filterbank(n_mels, win, buf.sample_rate).T
    values = np.log(energy + LOG_FLOOR).astype(np.float32)
    return LogMelSpec(values=values, frame_rate=buf.sample_rate / hop)


# -- LMEL feature files -------------------------------------------------------------

def encode_lmel(spec: LogMelSpec) -> bytes:
    v = np.ascontiguousarray(spec.values, dtype="<f4")
    return LMEL_MAGIC + struct.pack("<III", LMEL_VERSION, v.shape[0], v.shape[1]) + v.tobytes()


def decode_lmel(data: bytes) -> LogMelSpec:
    if len(data) < 16 or data[:4] != LMEL_MAGIC:
        raise MalformedHeader("not an LMEL feature file")
    version, frames, n_mels = struct.unpack_from("<III", data, 4)
    if version != LMEL_VERSION:
        raise MalformedHeader(f"LMEL version {version} unsupported")
    if len(data) != 16 + 4 * frames * n_mels:
        raise MalformedHeader("LMEL payload length does not match header")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(frames, n_mels).astype(np.float32)
    return LogMelSpec(values=values)


def write_lmel(path, spec: LogMelSpec):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_lmel(spec))
    os.replace(tmp, path)


def read_lmel(path) -> LogMelSpec:
    return decode_lmel(Path(path).read_bytes())
