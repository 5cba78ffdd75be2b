"""Acoustic front end: 8 kHz PCM -> log-mel frames -> spliced/subsampled input.

Every DSP constant the transform depends on is pinned in one place
(:data:`LOGMEL`) so an independent oracle can mirror the computation
bit-for-bit. The pipeline is 23 log-mel bands at a 10 ms shift, then
concatenation of the [-7, +7] neighbor frames and subsampling by 10, giving
345-dimensional vectors every 100 ms.
"""

from __future__ import annotations

import wave as wave_io
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "LOGMEL",
    "SPLICE",
    "Waveform",
    "FeatureSequence",
    "compute_logmel",
    "splice_and_subsample",
    "read_wav",
    "write_wav",
    "mel_filterbank",
]

SAMPLE_RATE = 8000

# Log-mel constants table. The window is a symmetric Hann; mel points use
# the 2595 * log10(1 + f/700) scale between 0 Hz and Nyquist; triangular
# weights are evaluated at rFFT bin-center frequencies without area
# normalization; the floor is added to band energies before the log.
LOGMEL = MappingProxyType(
    dict(
        sample_rate=SAMPLE_RATE,
        frame_length=200,  # 25 ms
        frame_shift=80,  # 10 ms
        fft_size=256,
        window="hann-symmetric",
        num_bands=23,
        fmin_hz=0.0,
        fmax_hz=4000.0,
        log_floor=1e-10,
    )
)

# Splicing constants: [-7, +7] context, keep every 10th frame anchored at 0,
# repeat edge frames at the boundaries.
SPLICE = MappingProxyType(dict(context=7, subsample=10))


@dataclass
class Waveform:
    """Mono PCM audio at the fixed 8 kHz rate, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise InvalidInputError(
                f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        if self.samples.size == 0:
            raise InvalidInputError("waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    """Frame-synchronous feature matrix (T x D) with its frame shift."""

    frames: np.ndarray
    frame_shift_s: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InvalidInputError("frames must be a T x D matrix")
        if self.frame_shift_s <= 0:
            raise InvalidInputError("frame_shift_s must be > 0")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def mel_filterbank(
    num_bands: int = LOGMEL["num_bands"],
    fft_size: int = LOGMEL["fft_size"],
    sample_rate: int = LOGMEL["sample_rate"],
    fmin_hz: float = LOGMEL["fmin_hz"],
    fmax_hz: float = LOGMEL["fmax_hz"],
) -> np.ndarray:
    """Triangular mel filter weights, shape (num_bands, fft_size // 2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_points = np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), num_bands + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    weights = np.zeros((num_bands, bin_freqs.size))
    for m in range(num_bands):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return weights


def mel_band_edges_hz(num_bands: int = LOGMEL["num_bands"]) -> np.ndarray:
    """(num_bands, 2) array of each triangle's [low, high] support in Hz."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    pts = inv(
        np.linspace(mel(LOGMEL["fmin_hz"]), mel(LOGMEL["fmax_hz"]), num_bands + 2)
    )
    return np.stack([pts[:-2], pts[2:]], axis=1)


def compute_logmel(wave: Waveform) -> FeatureSequence:
    """23-band log-mel features, 25 ms window, 10 ms shift. Deterministic.

    Raises:
        InvalidInputError: wrong sample rate or audio shorter than one window.
    """
    n_len = LOGMEL["frame_length"]
    n_shift = LOGMEL["frame_shift"]
    samples = wave.samples
    if samples.size < n_len:
        raise InvalidInputError(
            f"need at least {n_len} samples (25 ms), got {samples.size}"
        )
    num_frames = (samples.size - n_len) // n_shift + 1
    idx = np.arange(n_len)[None, :] + n_shift * np.arange(num_frames)[:, None]
    windowed = samples[idx] * np.hanning(n_len)[None, :]
    spectrum = np.fft.rfft(windowed, n=LOGMEL["fft_size"], axis=1)
    power = np.abs(spectrum) ** 2
    mel_energy = power @ mel_filterbank().T
    frames = np.log(mel_energy + LOGMEL["log_floor"])
    return FeatureSequence(frames=frames, frame_shift_s=n_shift / wave.sample_rate)


def splice_and_subsample(feats: FeatureSequence) -> FeatureSequence:
    """Concatenate [-7, +7] neighbor frames, keep every 10th frame.

    Output rows sit at input indices 0, 10, 20, ... (ceil(T/10) of them);
    edge frames are repeated where the context window leaves the sequence.
    Output dimension is 15 * 23 = 345 at a 100 ms shift.
    """
    if feats.dim != LOGMEL["num_bands"]:
        raise InvalidInputError(
            f"expected {LOGMEL['num_bands']}-dim log-mel input, got {feats.dim}"
        )
    if abs(feats.frame_shift_s - 0.010) > 1e-12:
        raise InvalidInputError(
            f"expected 10 ms frame shift, got {feats.frame_shift_s}"
        )
    total = feats.num_frames
    if total < 1:
        raise InvalidInputError("need at least one input frame")
    context = SPLICE["context"]
    factor = SPLICE["subsample"]
    anchors = np.arange(0, total, factor)
    offsets = np.arange(-context, context + 1)
    gather = np.clip(anchors[:, None] + offsets[None, :], 0, total - 1)
    spliced = feats.frames[gather].reshape(anchors.size, -1)
    return FeatureSequence(frames=spliced, frame_shift_s=feats.frame_shift_s * factor)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM 8 kHz WAV file; reject anything else."""
    try:
        with wave_io.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise InvalidInputError(f"compressed WAV not supported: {path}")
            if fh.getsampwidth() != 2:
                raise InvalidInputError(
                    f"expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit: {path}"
                )
            if fh.getnchannels() != 1:
                raise InvalidInputError(
                    f"expected mono audio, got {fh.getnchannels()} channels: {path}"
                )
            if fh.getframerate() != SAMPLE_RATE:
                raise InvalidInputError(
                    f"expected {SAMPLE_RATE} Hz, got {fh.getframerate()} Hz: {path}"
                )
            raw = fh.readframes(fh.getnframes())
    except wave_io.Error as exc:
        raise InvalidInputError(f"not a readable WAV file: {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples=samples)


def write_wav(path, wave: Waveform) -> None:
    """Write 16-bit PCM mono; amplitudes are clipped to [-1, 1] first."""
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave_io.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(pcm.tobytes())
