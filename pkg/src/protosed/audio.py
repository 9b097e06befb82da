"""Audio ingestion and PCEN-mel feature extraction.

Recordings are mixed to mono, linearly resampled to 22.05 kHz and scaled so
that digital full scale spans the int32 range. Features are Slaney mel power
spectrograms passed through per-channel energy normalisation (PCEN), cut into
fixed 17-frame patches for the embedding models.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import AudioFormatError, DataError, IngestionError

TARGET_SR = 22050
INT32_FULL_SCALE = 2.0**31
PATCH_FRAMES = 17
N_MELS = 128

# Frames per STFT chunk; bounds peak memory on long recordings.
_STFT_CHUNK = 2048


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = TARGET_SR
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = N_MELS
    pcen_gain: float = 0.98
    pcen_bias: float = 2.0
    pcen_power: float = 0.5
    pcen_time_constant: float = 0.4
    pcen_eps: float = 1e-6

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop_length <= 0 or self.n_mels <= 0:
            raise ValueError("n_fft, hop_length and n_mels must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0 < self.pcen_gain <= 1:
            raise ValueError(f"pcen_gain must lie in (0, 1], got {self.pcen_gain}")
        if self.pcen_eps <= 0 or self.pcen_power <= 0:
            raise ValueError("pcen_eps and pcen_power must be positive")
        if self.pcen_time_constant <= 0 or self.pcen_bias < 0:
            raise ValueError("pcen_time_constant must be positive, pcen_bias >= 0")


@dataclass
class MelPcenGram:
    """PCEN mel frames of one recording, shape ``(n_frames, n_mels)``."""

    frames: np.ndarray
    hop_length: int = 256
    sample_rate: int = TARGET_SR
    source_path: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    def frame_to_time(self, frame):
        return frame * self.hop_length / self.sample_rate


@dataclass
class Patch:
    values: np.ndarray
    start_frame: int

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)


def unflatten(vector: np.ndarray, n_mels: int = N_MELS) -> np.ndarray:
    return np.asarray(vector).reshape(-1, n_mels)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _to_int32_scale(data: np.ndarray, path) -> np.ndarray:
    kind = data.dtype
    if kind == np.int16:
        return data.astype(np.float64) * 2.0**16
    if kind == np.int32:
        # scipy left-justifies 24-bit PCM into int32, so full scale is already 2**31
        return data.astype(np.float64)
    if kind == np.uint8:
        return (data.astype(np.float64) - 128.0) * 2.0**24
    if kind in (np.float32, np.float64):
        scaled = data.astype(np.float64) * INT32_FULL_SCALE
        return np.clip(scaled, -INT32_FULL_SCALE, INT32_FULL_SCALE - 1)
    raise AudioFormatError(path, f"unsupported sample type {kind}")


def resample_linear(samples: np.ndarray, orig_sr: int, target_sr: int) -> np.ndarray:
    if orig_sr == target_sr or len(samples) == 0:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * target_sr / orig_sr))
    positions = np.arange(n_out) * (orig_sr / target_sr)
    return np.interp(positions, np.arange(len(samples)), samples)


def load_audio(path, target_sr: int = TARGET_SR) -> AudioClip:
    """Read a PCM WAV file as a mono, int32-scaled clip at ``target_sr``."""
    path = os.fspath(path)
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise IngestionError(path, "file not found") from None
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise AudioFormatError(path, msg) from None
        raise IngestionError(path, msg) from None
    except (OSError, EOFError) as exc:
        raise IngestionError(path, str(exc)) from None

    samples = _to_int32_scale(data, path)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = resample_linear(samples, sr, target_sr)
    samples = np.clip(samples, -INT32_FULL_SCALE, INT32_FULL_SCALE - 1)
    return AudioClip(samples, target_sr, path)


# ---------------------------------------------------------------------------
# Spectrogram
# ---------------------------------------------------------------------------


def hz_to_mel(freqs):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freqs = np.asanyarray(freqs, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mels = freqs / f_sp
    log_region = freqs >= min_log_hz
    mels = np.where(
        log_region,
        min_log_mel + np.log(np.maximum(freqs, min_log_hz) / min_log_hz) / logstep,
        mels,
    )
    return mels


def mel_to_hz(mels):
    mels = np.asanyarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    freqs = f_sp * mels
    return np.where(
        mels >= min_log_mel,
        min_log_hz * np.exp(logstep * (mels - min_log_mel)),
        freqs,
    )


def mel_band_edges(sample_rate: int, n_mels: int, fmin: float = 0.0, fmax=None):
    """The ``n_mels + 2`` edge frequencies; entry ``i + 1`` is band ``i``'s centre."""
    if fmax is None:
        fmax = sample_rate / 2.0
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Slaney-normalised triangular filters, shape ``(n_mels, 1 + n_fft // 2)``."""
    fft_freqs = np.linspace(0, sample_rate / 2.0, 1 + n_fft // 2)
    edges = mel_band_edges(sample_rate, n_mels)
    widths = np.diff(edges)
    ramps = np.subtract.outer(edges, fft_freqs)

    weights = np.zeros((n_mels, len(fft_freqs)))
    for i in range(n_mels):
        lower = -ramps[i] / widths[i]
        upper = ramps[i + 2] / widths[i + 1]
        weights[i] = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2 : n_mels + 2] - edges[:n_mels]))[:, np.newaxis]
    return weights


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for spectral analysis)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples: int, hop_length: int) -> int:
    return 1 + n_samples // hop_length


def mel_spectrogram(clip: AudioClip, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Mel power spectrogram, shape ``(n_frames, n_mels)``.

    Frames are centred: the signal is reflect-padded by ``n_fft // 2`` on both
    sides, so ``n_frames == 1 + len(samples) // hop_length`` for even ``n_fft``.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot compute a spectrogram of an empty clip")
    pad = config.n_fft // 2
    padded = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.n_fft)[:: config.hop_length]

    window = hann_window(config.n_fft)
    fbank = mel_filterbank(clip.sample_rate, config.n_fft, config.n_mels)
    out = np.empty((frames.shape[0], config.n_mels))
    for lo in range(0, frames.shape[0], _STFT_CHUNK):
        chunk = frames[lo : lo + _STFT_CHUNK] * window
        spec = np.fft.rfft(chunk, axis=1)
        power = spec.real**2 + spec.imag**2
        out[lo : lo + _STFT_CHUNK] = power @ fbank.T
    return out


def pcen_smoothing_coef(config: SpectrogramConfig) -> float:
    t_frames = config.pcen_time_constant * config.sample_rate / config.hop_length
    return (np.sqrt(1 + 4 * t_frames**2) - 1) / (2 * t_frames**2)


def pcen(mel: np.ndarray, config: SpectrogramConfig = SpectrogramConfig(), source_path: str = "") -> MelPcenGram:
    """Per-channel energy normalisation of a mel power spectrogram.

    Each band is smoothed by a first-order IIR filter ``M[t] = (1-s) M[t-1] +
    s E[t]`` seeded with the first frame, then
    ``(E / (eps + M)**gain + bias)**power - bias**power``.
    """
    E = np.asarray(mel, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError(f"expected a (frames, bands) matrix, got shape {E.shape}")
    if np.any(E < 0):
        raise ValueError("PCEN input must be nonnegative")
    if E.shape[0] == 0:
        return MelPcenGram(E.copy(), config.hop_length, config.sample_rate, source_path)

    s = pcen_smoothing_coef(config)
    # zi chosen so the filter state already equals E[0] before the first frame
    zi = (1 - s) * E[0][np.newaxis, :]
    M, _ = signal.lfilter([s], [1, s - 1], E, axis=0, zi=zi)

    return MelPcenGram(pcen_compress(E, M, config), config.hop_length, config.sample_rate, source_path)


def pcen_compress(E, M, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Adaptive gain plus root compression, given energies and their smoothed version."""
    gain = np.asarray(E, dtype=np.float64) / (config.pcen_eps + M) ** config.pcen_gain
    bias = config.pcen_bias
    out = (gain + bias) ** config.pcen_power - bias**config.pcen_power
    return np.maximum(out, 0.0)


def extract_features(path, config: SpectrogramConfig = SpectrogramConfig()) -> MelPcenGram:
    clip = load_audio(path, config.sample_rate)
    return pcen(mel_spectrogram(clip, config), config, source_path=os.fspath(path))


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


def patch_starts(n_frames: int, patch_len: int = PATCH_FRAMES, patch_hop: int = 8) -> np.ndarray:
    if patch_len < 1 or patch_hop < 1:
        raise ValueError("patch_len and patch_hop must be >= 1")
    if n_frames < patch_len:
        return np.zeros(1, dtype=np.int64)
    return np.arange(0, n_frames - patch_len + 1, patch_hop, dtype=np.int64)


def patch_matrix(gram: MelPcenGram, starts, patch_len: int = PATCH_FRAMES) -> np.ndarray:
    """Flattened patches at arbitrary start frames, shape ``(len(starts), patch_len * n_mels)``.

    Frames outside ``[0, n_frames)`` read as zeros, so starts may be negative
    or run past the end.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        return np.zeros((0, patch_len * gram.n_mels))
    lo = int(min(0, starts.min()))
    hi = int(max(gram.n_frames, starts.max() + patch_len))
    padded = np.zeros((hi - lo, gram.n_mels), dtype=gram.frames.dtype)
    padded[-lo : -lo + gram.n_frames] = gram.frames
    idx = (starts - lo)[:, np.newaxis] + np.arange(patch_len)
    return padded[idx].reshape(len(starts), -1)


def make_patches(gram: MelPcenGram, patch_len: int = PATCH_FRAMES, patch_hop: int = 8) -> list[Patch]:
    starts = patch_starts(gram.n_frames, patch_len, patch_hop)
    flat = patch_matrix(gram, starts, patch_len)
    return [
        Patch(row.reshape(patch_len, gram.n_mels), int(s)) for s, row in zip(starts, flat)
    ]


# ---------------------------------------------------------------------------
# Feature files: one JSON header line, then little-endian float32 frames
# ---------------------------------------------------------------------------


def write_envelope(path, header: dict, *payloads: bytes) -> None:
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(b"\n")
        for p in payloads:
            fh.write(p)


def read_envelope(path) -> tuple[dict, bytes]:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IngestionError(path, str(exc)) from None
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise IngestionError(path, "missing header terminator")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(path, f"malformed header: {exc}") from None
    return header, payload


def write_features(gram: MelPcenGram, path) -> None:
    header = {
        "n_frames": gram.n_frames,
        "n_mels": gram.n_mels,
        "hop_length": gram.hop_length,
        "sample_rate": gram.sample_rate,
        "source_path": gram.source_path,
    }
    write_envelope(path, header, gram.frames.astype("<f4").tobytes())


def read_features(path) -> MelPcenGram:
    header, payload = read_envelope(path)
    try:
        n_frames, n_mels = int(header["n_frames"]), int(header["n_mels"])
        hop, sr = int(header["hop_length"]), int(header["sample_rate"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(os.fspath(path), f"bad feature header: {exc}") from None
    if len(payload) != n_frames * n_mels * 4:
        raise IngestionError(
            os.fspath(path),
            f"payload is {len(payload)} bytes, expected {n_frames * n_mels * 4}",
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_mels).astype(np.float64)
    return MelPcenGram(frames, hop, sr, header.get("source_path", ""))
