"""Audio buffers, WAV I/O, SNR-controlled noise mixing and STFT features."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"audio must be mono, got shape {s.shape}")
        if s.size < 1:
            raise ValueError("audio buffer is empty")
        if not np.all(np.isfinite(s)):
            raise ValueError("audio buffer contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class SpectrogramConfig:
    window_len: int = 320
    hop_len: int = 160
    window_shape: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.window_len:
            raise ValueError(
                f"need 0 < hop_len <= window_len, got hop={self.hop_len} window={self.window_len}"
            )
        if self.window_shape not in _WINDOWS:
            raise ValueError(f"unknown window {self.window_shape!r}; choose from {sorted(_WINDOWS)}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop_len + 1


@dataclass(frozen=True)
class MixRecipe:
    noise_label: str
    snr_db: float
    noise_offset: int
    gain: float

    def to_row(self, utterance_id: str) -> list:
        return [utterance_id, self.noise_label, repr(float(self.snr_db)), self.noise_offset, repr(float(self.gain))]


RECIPE_HEADER = ["utterance_id", "noise_label", "snr_db", "offset", "gain"]


_WINDOWS = ("hamming", "hann", "rectangular")


def window(cfg: SpectrogramConfig) -> np.ndarray:
    # periodic (fftbins=True) form, the usual STFT analysis window
    name = "boxcar" if cfg.window_shape == "rectangular" else cfg.window_shape
    return get_window(name, cfg.window_len, fftbins=True).astype(np.float64)


# --------------------------------------------------------------------------- powers / SNR

def rms_power(buf: AudioBuffer | np.ndarray) -> float:
    """Mean squared amplitude."""
    s = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot take the power of an empty buffer")
    return float(np.mean(s * s))


def mixing_gain(clean_power: float, noise_power: float, snr_db: float) -> float:
    """Noise scale factor that puts the mix at ``snr_db``."""
    if clean_power <= 0:
        raise ValueError(f"clean power must be positive (silent input?), got {clean_power}")
    if noise_power <= 0:
        raise ValueError(f"noise power must be positive (silent input?), got {noise_power}")
    return float(np.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def measured_snr(clean: AudioBuffer | np.ndarray, noise_component: AudioBuffer | np.ndarray) -> float:
    c = clean.samples if isinstance(clean, AudioBuffer) else np.asarray(clean, dtype=np.float64)
    n = noise_component.samples if isinstance(noise_component, AudioBuffer) else np.asarray(
        noise_component, dtype=np.float64)
    if c.shape != n.shape:
        raise ValueError(f"length mismatch: clean {c.shape} vs noise {n.shape}")
    p_noise = rms_power(n)
    if p_noise == 0:
        raise ValueError("noise component is silent; SNR is infinite")
    p_clean = rms_power(c)
    if p_clean == 0:
        raise ValueError("clean signal is silent; SNR is -inf")
    return float(10.0 * np.log10(p_clean / p_noise))


def noise_segment(noise: np.ndarray, length: int, offset: int) -> np.ndarray:
    """``length`` samples of ``noise`` starting at ``offset``, wrapping circularly."""
    idx = (offset + np.arange(length)) % noise.size
    return noise[idx]


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float, rng_seed=None,
               noise_label: str = "") -> tuple[AudioBuffer, MixRecipe]:
    """Add a random section of ``noise`` to ``clean`` at exactly ``snr_db``.

    The gain is computed from the power of the selected section, so the
    per-utterance SNR is exact. ``rng_seed`` may be an int, a SeedSequence or a
    ``numpy.random.Generator``. Output is not clipped.
    """
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: clean {clean.sample_rate_hz} Hz vs noise {noise.sample_rate_hz} Hz")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = len(clean)
    if len(noise) >= n:
        offset = int(rng.integers(0, len(noise) - n + 1))
    else:
        offset = int(rng.integers(0, len(noise)))
    seg = noise_segment(noise.samples, n, offset)
    gain = mixing_gain(rms_power(clean), rms_power(seg), snr_db)
    mixed = clean.samples + gain * seg
    return AudioBuffer(mixed, clean.sample_rate_hz), MixRecipe(noise_label, float(snr_db), offset, gain)


def apply_recipe(clean: AudioBuffer, noise: AudioBuffer, recipe: MixRecipe) -> AudioBuffer:
    seg = noise_segment(noise.samples, len(clean), recipe.noise_offset)
    return AudioBuffer(clean.samples + recipe.gain * seg, clean.sample_rate_hz)


def write_recipes(rows: list[tuple[str, MixRecipe]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECIPE_HEADER)
        for utt_id, r in rows:
            w.writerow(r.to_row(utt_id))


def read_recipes(path) -> list[tuple[str, MixRecipe]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RECIPE_HEADER:
            raise ValueError(f"{path}: bad recipe header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            out.append((row[0], MixRecipe(row[1], float(row[2]), int(row[3]), float(row[4]))))
        return out


# --------------------------------------------------------------------------- features

def stft_magnitude(buf: AudioBuffer, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Magnitude spectrogram, shape (n_bins, n_frames); frames are not padded."""
    s = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    if s.size < cfg.window_len:
        raise ValueError(f"buffer of {s.size} samples is shorter than one window ({cfg.window_len})")
    frames = np.lib.stride_tricks.sliding_window_view(s, cfg.window_len)[::cfg.hop_len]
    spec = np.fft.rfft(frames * window(cfg), axis=1)
    return np.abs(spec).T


def log_compress(mag: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """``log(1 + mag/floor)``: non-negative, and sensitive to low-level noise."""
    return np.log1p(mag / floor)


def normalize_features(f: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over all cells of one utterance."""
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty feature matrix")
    centered = f - f.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(f)
    return centered / std


def features(buf: AudioBuffer, cfg: SpectrogramConfig = SpectrogramConfig(),
             floor: float = 1e-3) -> np.ndarray:
    """The model's input: normalized log-compressed STFT magnitude."""
    return normalize_features(log_compress(stft_magnitude(buf, cfg), floor))


# --------------------------------------------------------------------------- WAV

def read_wav(path) -> AudioBuffer:
    """Read a mono WAV (16-bit PCM or 32-bit float) into [-1, 1] floats."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, int(rate))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, buf: AudioBuffer, float32: bool = False) -> None:
    """Write 16-bit PCM (default) or float-32 WAV. PCM output is clipped to range."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = buf.samples.astype(np.float32) if float32 else to_pcm16(buf.samples)
    # via a buffer so the file only appears once fully written
    bio = io.BytesIO()
    wavfile.write(bio, buf.sample_rate_hz, data)
    path.write_bytes(bio.getvalue())
