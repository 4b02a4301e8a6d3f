"""WAV decoding, normalization, resampling, and sub-clip slicing.

Clips hold mono float64 samples in [-1, 1]. Stereo inputs are mixed down by
per-sample channel average; integer PCM is scaled by 1/2^(bits-1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Union

import numpy as np


class WavError(ValueError):
    """Base class for WAV ingestion failures."""


class MalformedWavError(WavError):
    """Container or header structure is not valid RIFF/WAVE."""


class UnsupportedWavError(WavError):
    """Valid container but a codec, bit depth, or channel count outside scope."""


class EmptyWavDataError(WavError):
    """Valid container whose data chunk holds zero samples."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    label: Optional[str] = None
    source_id: str = ""
    offset_s: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be 1-d, got shape %r" % (self.samples.shape,))
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive, got %r" % (self.sample_rate_hz,))
        if self.offset_s < 0:
            raise ValueError("offset must be non-negative, got %r" % (self.offset_s,))
        if self.samples.size and float(np.abs(self.samples).max()) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if body_start + size > len(data):
            raise MalformedWavError("chunk %r overruns file" % (cid,))
        yield cid, data[body_start : body_start + size]
        pos = body_start + size + (size & 1)


def decode_wav(data: bytes, source_id: str = "", label: Optional[str] = None) -> AudioClip:
    """Decode RIFF/WAVE bytes: PCM 16/24/32-bit integer or 32-bit float, mono/stereo."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE container")

    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and payload is None:
            payload = body
    if fmt is None:
        raise MalformedWavError("missing fmt chunk")
    if payload is None:
        raise MalformedWavError("missing data chunk")

    audio_format, channels, rate, _byte_rate, block_align, bits = fmt
    if audio_format not in (1, 3):
        raise UnsupportedWavError("unsupported audio format tag %d" % audio_format)
    if channels not in (1, 2):
        raise UnsupportedWavError("unsupported channel count %d" % channels)
    if rate <= 0:
        raise MalformedWavError("non-positive sample rate %d" % rate)
    if audio_format == 1 and bits not in (16, 24, 32):
        raise UnsupportedWavError("unsupported PCM bit depth %d" % bits)
    if audio_format == 3 and bits != 32:
        raise UnsupportedWavError("unsupported float bit depth %d" % bits)

    frame_size = channels * (bits // 8)
    if block_align not in (0, frame_size):
        raise MalformedWavError("block alignment %d does not match %d" % (block_align, frame_size))
    if len(payload) == 0:
        raise EmptyWavDataError("data chunk holds zero samples")
    if len(payload) % frame_size != 0:
        raise MalformedWavError("data chunk length %d is not a whole number of frames" % len(payload))

    if audio_format == 3:
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    elif bits == 16:
        values = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 32:
        values = np.frombuffer(payload, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints -= (ints >= 1 << 23) * (1 << 24)
        values = ints.astype(np.float64) / float(1 << 23)

    if channels == 2:
        values = values.reshape(-1, 2).mean(axis=1)
    values = np.clip(values, -1.0, 1.0)
    return AudioClip(samples=values, sample_rate_hz=rate, label=label, source_id=source_id)


def read_wav(path, label: Optional[str] = None, source_id: Optional[str] = None) -> AudioClip:
    p = Path(path)
    return decode_wav(p.read_bytes(), source_id=source_id if source_id is not None else p.stem, label=label)


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Linear-interpolation resampling; output length = round(N * target/source)."""
    if target_rate_hz <= 0:
        raise ValueError("target rate must be positive, got %r" % (target_rate_hz,))
    if target_rate_hz == clip.sample_rate_hz:
        return clip
    n = clip.samples.size
    out_len = int(round(n * target_rate_hz / clip.sample_rate_hz))
    positions = np.arange(out_len) * (clip.sample_rate_hz / target_rate_hz)
    resampled = np.interp(positions, np.arange(n), clip.samples)
    # Output positions can land up to one input step past the last sample;
    # continue the final slope there instead of holding the edge value.
    tail = positions > n - 1
    if tail.any() and n >= 2:
        slope = clip.samples[-1] - clip.samples[-2]
        resampled[tail] = clip.samples[-1] + (positions[tail] - (n - 1)) * slope
    return replace(clip, samples=np.clip(resampled, -1.0, 1.0), sample_rate_hz=target_rate_hz)


def slice_clip(clip: AudioClip, sub_len_s: float = 5.0, count: int = 5) -> List[AudioClip]:
    """First `count` contiguous non-overlapping sub-clips of sub_len_s seconds."""
    if sub_len_s <= 0 or count < 1:
        raise ValueError("sub_len_s and count must be positive")
    per = int(round(sub_len_s * clip.sample_rate_hz))
    if clip.samples.size < per * count:
        raise ValueError(
            "clip too short: %d samples, need %d for %d sub-clips of %gs"
            % (clip.samples.size, per * count, count, sub_len_s)
        )
    return [
        replace(
            clip,
            samples=clip.samples[k * per : (k + 1) * per].copy(),
            offset_s=clip.offset_s + k * sub_len_s,
        )
        for k in range(count)
    ]


def write_wav(clip: AudioClip, bit_depth: Union[int, str] = 16) -> bytes:
    """Encode a mono clip as RIFF/WAVE: 16-bit PCM or 32-bit float ("32f")."""
    if bit_depth in (16, "16", "pcm16"):
        scaled = np.round(clip.samples * 32768.0)
        payload = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif bit_depth in ("32f", "float32"):
        payload = clip.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError("bit_depth must be 16 or '32f', got %r" % (bit_depth,))

    frame_size = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        clip.sample_rate_hz,
        clip.sample_rate_hz * frame_size,
        frame_size,
        bits,
        b"data",
        len(payload),
    )
    return header + payload


def write_wav_file(clip: AudioClip, path, bit_depth: Union[int, str] = 16) -> None:
    Path(path).write_bytes(write_wav(clip, bit_depth))
