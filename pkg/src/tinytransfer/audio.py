"""WAV decoding and the log-mel patch front-end for the audio backbone.

Pipeline: decode -> mono -> resample to 16 kHz -> drop quiet 25 ms frames ->
|STFT| (400-sample periodic Hann, hop 160, FFT 512) -> 64 HTK mel bands over
125-7500 Hz -> ln(x + 0.001) -> 96-frame patches with a 48-frame hop.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import DecodeError, EmptyAfterTrim, TooShort, UnsupportedEncoding

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
N_FFT = 512
N_MELS = 64
FMIN = 125.0
FMAX = 7500.0
LOG_OFFSET = 0.001
PATCH_FRAMES = 96
PATCH_HOP = 48
TRIM_FRAME_S = 0.025
DEFAULT_SILENCE_RMS = 0.01

PREPROCESSING_ID = "audio/v1:16k-mono/stft400-160-512-hann/mel64-125-7500-htk/ln+0.001/patch96-48"

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DecodeError("audio contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


# -- WAV ----------------------------------------------------------------------


def decode_wav(data: bytes) -> AudioClip:
    """Decode RIFF/WAVE holding PCM16 or float32, mono or stereo."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise DecodeError(f"truncated data chunk: {len(body)} of {size} bytes")
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise DecodeError("missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels (1 or 2 supported)")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncoding(f"format tag {tag} with {bits} bits (PCM16 or float32 only)")
    frames = raw[: len(raw) // channels * channels].reshape(-1, channels)
    return AudioClip(frames.mean(axis=1), rate)


def encode_wav(clip: AudioClip, encoding: str = "pcm16", channels: int = 1) -> bytes:
    """Write a clip as WAV; stereo output duplicates the mono signal."""
    x = np.repeat(clip.samples[:, None], channels, axis=1)
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _WAVE_FORMAT_FLOAT, 32
    else:
        raise ValueError(encoding)
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, clip.sample_rate, clip.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


# -- resampling ---------------------------------------------------------------


@lru_cache(maxsize=16)
def _lowpass(up: int, down: int, src_rate: int, dst_rate: int):
    """Kaiser-windowed sinc for the polyphase resampler, designed at rate ``src_rate * up``."""
    nyq = min(src_rate, dst_rate) / 2.0
    passband = min(0.9375 * nyq, FMAX) if dst_rate == SAMPLE_RATE else 0.9 * nyq
    transition = nyq - passband
    fs = src_rate * up
    numtaps, beta = signal.kaiserord(80.0, transition / (fs / 2.0))
    numtaps |= 1
    return signal.firwin(numtaps, passband + transition / 2.0, window=("kaiser", beta), fs=fs)


def resample(clip: AudioClip, target: int = SAMPLE_RATE) -> AudioClip:
    """Band-limited rational resampling; output length is round(n * target / rate)."""
    if clip.sample_rate == target:
        return AudioClip(clip.samples.copy(), target)
    g = math.gcd(int(clip.sample_rate), int(target))
    up, down = target // g, int(clip.sample_rate) // g
    h = _lowpass(up, down, int(clip.sample_rate), int(target))
    y = signal.resample_poly(clip.samples.astype(np.float64), up, down, window=h)
    n_out = int(round(len(clip.samples) * target / clip.sample_rate))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return AudioClip(y[:n_out], target)


def to_mono_16k(clip: AudioClip) -> AudioClip:
    return resample(clip, SAMPLE_RATE)


# -- framing / spectra --------------------------------------------------------


def trim_silence(clip: AudioClip, threshold_rms: float = DEFAULT_SILENCE_RMS, frame_s: float = TRIM_FRAME_S) -> AudioClip:
    """Keep only frames whose RMS reaches ``threshold_rms``; the last frame may be short."""
    if threshold_rms < 0:
        raise ValueError("threshold_rms must be >= 0")
    n = max(1, int(round(frame_s * clip.sample_rate)))
    x = clip.samples.astype(np.float64)
    kept = []
    for start in range(0, len(x), n):
        frame = x[start : start + n]
        if math.sqrt(np.mean(frame * frame)) >= threshold_rms:
            kept.append(clip.samples[start : start + n])
    if not kept:
        raise EmptyAfterTrim(f"no {frame_s * 1000:g} ms frame reaches RMS {threshold_rms}")
    return AudioClip(np.concatenate(kept), clip.sample_rate)


def periodic_hann(n: int = WINDOW) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int) -> int:
    return 1 + (n_samples - WINDOW) // HOP


def stft_magnitude(clip: AudioClip) -> np.ndarray:
    """(frames, 257) STFT magnitudes, no centre padding."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"stft_magnitude expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples.astype(np.float64)
    if len(x) < WINDOW:
        raise TooShort(f"need at least {WINDOW} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP][: frame_count(len(x))]
    spec = np.fft.rfft(frames * periodic_hann(), n=N_FFT, axis=1)
    return np.abs(spec).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=1)
def mel_matrix() -> np.ndarray:
    """(257, 64) unnormalised triangular filters, peak 1 at each band centre."""
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    bins = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None] - lower) / (centre - lower)
    falling = (upper - bins[None]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    m = weights.T
    m.setflags(write=False)
    return m


def mel_filterbank(mag) -> np.ndarray:
    mag = np.asarray(mag)
    if mag.ndim != 2 or mag.shape[1] != N_FFT // 2 + 1:
        raise ValueError(f"expected (frames, {N_FFT // 2 + 1}) magnitudes, got {mag.shape}")
    return (mag.astype(np.float64) @ mel_matrix()).astype(np.float32)


def log_mel(mel) -> np.ndarray:
    return np.log(np.asarray(mel, dtype=np.float64) + LOG_OFFSET).astype(np.float32)


def patch_count(frames: int) -> int:
    return 1 + max(frames - PATCH_FRAMES, 0) // PATCH_HOP


def frame_patches(logmel) -> np.ndarray:
    """(P, 96, 64, 1) patches; short inputs are padded with ln(0.001)."""
    logmel = np.asarray(logmel, dtype=np.float32)
    frames = logmel.shape[0]
    if frames < 1:
        raise TooShort("no frames to patch")
    if frames < PATCH_FRAMES:
        pad = np.full((PATCH_FRAMES - frames, logmel.shape[1]), np.log(LOG_OFFSET), dtype=np.float32)
        logmel = np.concatenate([logmel, pad])
    starts = [i * PATCH_HOP for i in range(patch_count(frames))]
    return np.stack([logmel[s : s + PATCH_FRAMES] for s in starts])[..., None]


def clip_to_patches(clip: AudioClip, silence_threshold: float | None = DEFAULT_SILENCE_RMS) -> np.ndarray:
    """Full front-end; ``silence_threshold=None`` skips trimming."""
    clip = to_mono_16k(clip)
    if silence_threshold is not None:
        clip = trim_silence(clip, silence_threshold)
    if len(clip.samples) < WINDOW:
        clip = AudioClip(np.pad(clip.samples, (0, WINDOW - len(clip.samples))), clip.sample_rate)
    return frame_patches(log_mel(mel_filterbank(stft_magnitude(clip))))


def wav_to_patches(data: bytes, silence_threshold: float | None = DEFAULT_SILENCE_RMS) -> np.ndarray:
    return clip_to_patches(decode_wav(data), silence_threshold)
