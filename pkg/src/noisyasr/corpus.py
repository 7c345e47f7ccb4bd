"""Manifests, noise-set partitioning, the noisy test grid and a synthetic tone corpus."""
from __future__ import annotations

import csv
import enum
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer, MixRecipe, mix_at_snr, read_wav, write_recipes, write_wav


class NoiseLabel(str, enum.Enum):
    BABBLE = "Babble"
    AIRPORT_STATION = "AirportStation"
    CAR = "Car"
    METRO = "Metro"
    CAFE = "Cafe"
    TRAFFIC = "Traffic"
    AC_VACUUM = "AcVacuum"
    CLEAN = "Clean"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def parse(cls, s: str) -> "NoiseLabel":
        try:
            return cls(s)
        except ValueError:
            raise ValueError(f"unknown noise label {s!r}; valid: {[l.value for l in cls]}") from None


ALL_LABELS = tuple(NoiseLabel)
NOISE_TYPES = tuple(l for l in NoiseLabel if l is not NoiseLabel.CLEAN)
_LABEL_INDEX = {l: i for i, l in enumerate(ALL_LABELS)}

MANIFEST_HEADER = ["utterance_id", "audio_path", "transcript", "noise_label", "snr_db"]
NOISE_LIST_HEADER = ["noise_id", "audio_path", "noise_label", "split"]


def entry_seed(master_seed: int, entry_id: str) -> np.random.SeedSequence:
    """Per-entry seed derived from (master seed, entry id); independent of processing order."""
    return np.random.SeedSequence([int(master_seed), zlib.crc32(entry_id.encode())])


# --------------------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    transcript: str
    noise_label: NoiseLabel | None = None
    snr_db: float | None = None

    def __post_init__(self):
        lab = self.noise_label
        if isinstance(lab, str) and not isinstance(lab, NoiseLabel):
            object.__setattr__(self, "noise_label", NoiseLabel.parse(lab))
            lab = self.noise_label
        noisy = lab is not None and lab is not NoiseLabel.CLEAN
        if noisy and self.snr_db is None:
            raise ValueError(f"{self.utterance_id}: noisy entry needs an snr_db")
        if not noisy and self.snr_db is not None:
            raise ValueError(f"{self.utterance_id}: clean entry must not carry an snr_db")

    @property
    def is_clean(self) -> bool:
        return self.noise_label is None or self.noise_label is NoiseLabel.CLEAN


def _fmt_snr(x):
    return "" if x is None else repr(float(x))


def save_manifest(entries: Sequence[ManifestEntry], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.utterance_id, e.audio_path, e.transcript,
                        "" if e.noise_label is None else e.noise_label.value, _fmt_snr(e.snr_db)])


def load_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            uid, apath, text, label, snr = row
            try:
                out.append(ManifestEntry(uid, apath, text,
                                         NoiseLabel.parse(label) if label else None,
                                         float(snr) if snr else None))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return out


def resolve(path: str, base) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


def load_audio(entry: ManifestEntry, base) -> AudioBuffer:
    return read_wav(resolve(entry.audio_path, base))


# --------------------------------------------------------------------------- noise sets

@dataclass(frozen=True)
class NoiseFile:
    noise_id: str
    label: NoiseLabel
    audio: AudioBuffer
    audio_path: str = ""


def partition_noise_set(files: dict, train_count: int = 10, test_count: int = 8,
                        seed: int = 0) -> tuple[dict, dict]:
    """Split each noise type's files into disjoint train/test lists (seeded shuffle)."""
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for label in sorted(files, key=lambda l: NoiseLabel(l).index):
        items = list(files[label])
        if len(items) < train_count + test_count:
            raise ValueError(
                f"noise type {NoiseLabel(label).value}: {len(items)} files, need {train_count + test_count}")
        perm = rng.permutation(len(items))
        train[label] = [items[i] for i in perm[:train_count]]
        test[label] = [items[i] for i in perm[train_count:train_count + test_count]]
    return train, test


def save_noise_list(train: dict, test: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NOISE_LIST_HEADER)
        for split, sets in (("train", train), ("test", test)):
            for label in sorted(sets, key=lambda l: l.index):
                for nf in sets[label]:
                    w.writerow([nf.noise_id, nf.audio_path, label.value, split])


def load_noise_list(path, split: str) -> dict[NoiseLabel, list[NoiseFile]]:
    base = Path(path).parent
    out: dict[NoiseLabel, list[NoiseFile]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != NOISE_LIST_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(NOISE_LIST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            nid, apath, label, sp = row
            if sp != split:
                continue
            try:
                lab = NoiseLabel.parse(label)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if lab is NoiseLabel.CLEAN:
                raise ValueError(f"{path}:{lineno}: Clean is not a noise source")
            out.setdefault(lab, []).append(NoiseFile(nid, lab, read_wav(resolve(apath, base)), apath))
    return out


# --------------------------------------------------------------------------- noisy test grid

def build_noisy_test_set(clean_utts: Sequence[tuple[ManifestEntry, AudioBuffer]],
                         test_noise: dict, snr_list: Sequence[float] = (0, 5, 10, 15, 20),
                         seed: int = 0, out_dir=None, threads: int = 1
                         ) -> tuple[list[ManifestEntry], list[tuple[str, MixRecipe]]]:
    """One mixed entry per (utterance x noise type x SNR).

    For each entry a test noise file of that type and an offset within it are
    drawn from a seed derived from the entry id. When ``out_dir`` is given the
    mixes are written as float-32 WAVs (no clipping) under ``out_dir/wav`` with
    ``manifest.csv`` and ``recipes.csv`` next to them.
    """
    if len(snr_list) == 0:
        raise ValueError("snr_list is empty")
    labels = sorted(test_noise, key=lambda l: NoiseLabel(l).index)
    jobs = [(e, a, NoiseLabel(lab), float(snr))
            for e, a in clean_utts for lab in labels for snr in snr_list]

    def run(job):
        entry, audio, lab, snr = job
        uid = f"{entry.utterance_id}__{lab.value}__{snr:g}"
        rng = np.random.default_rng(entry_seed(seed, uid))
        files = test_noise[lab]
        nf = files[int(rng.integers(len(files)))]
        try:
            mixed, recipe = mix_at_snr(audio, nf.audio, snr, rng, noise_label=lab.value)
        except ValueError as exc:
            raise ValueError(f"{uid}: {exc}") from exc
        apath = f"wav/{uid}.wav"
        if out_dir is not None:
            write_wav(Path(out_dir) / apath, mixed, float32=True)
        return (ManifestEntry(uid, apath, entry.transcript, lab, snr),
                (uid, MixRecipe(f"{lab.value}:{nf.noise_id}", snr, recipe.noise_offset, recipe.gain)))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    entries = [r[0] for r in results]
    recipes = [r[1] for r in results]
    if out_dir is not None:
        save_manifest(entries, Path(out_dir) / "manifest.csv")
        write_recipes(recipes, Path(out_dir) / "recipes.csv")
    return entries, recipes


# --------------------------------------------------------------------------- synthetic speech

@dataclass(frozen=True)
class SynthSpec:
    """Tone "speech": each symbol is a sinusoid; words are separated by silence."""

    vocab: tuple[str, ...] = ("a", "b", "c", "d", "e")
    freqs_hz: tuple[float, ...] = (440.0, 660.0, 880.0, 1320.0, 1760.0)
    symbol_ms: float = 100.0
    gap_ms: float = 50.0
    words: tuple[int, int] = (3, 5)
    word_len: tuple[int, int] = (1, 1)
    amplitude: float = 0.5
    fade_ms: float = 5.0
    sample_rate_hz: int = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if len(self.vocab) != len(self.freqs_hz):
            raise ValueError("vocab and freqs_hz differ in length")
        if len(set(self.freqs_hz)) != len(self.freqs_hz):
            raise ValueError("symbol frequencies must be distinct")
        if max(self.freqs_hz) >= self.sample_rate_hz / 2:
            raise ValueError("symbol frequency at or above Nyquist")
        if " " in self.vocab:
            raise ValueError("space is the word separator, not a symbol")

    @property
    def symbol_samples(self) -> int:
        return int(round(self.symbol_ms * self.sample_rate_hz / 1000))

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap_ms * self.sample_rate_hz / 1000))

    def model_vocab(self) -> tuple[str, ...]:
        """CTC output symbols: blank, space, then the tone symbols."""
        return ("_", " ") + tuple(self.vocab)


def render(transcript: str, spec: SynthSpec, phase_rng=None) -> AudioBuffer:
    """Audio for a transcript of space-separated words over ``spec.vocab``."""
    n = spec.symbol_samples
    t = np.arange(n) / spec.sample_rate_hz
    nf = min(int(round(spec.fade_ms * spec.sample_rate_hz / 1000)), n // 2)
    env = np.ones(n)
    if nf:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        env[:nf], env[n - nf:] = ramp, ramp[::-1]
    freq = dict(zip(spec.vocab, spec.freqs_hz))
    parts = []
    for wi, word in enumerate(transcript.split(" ")):
        if wi:
            parts.append(np.zeros(spec.gap_samples))
        for ch in word:
            if ch not in freq:
                raise ValueError(f"symbol {ch!r} not in synthetic vocab")
            phase = 0.0 if phase_rng is None else phase_rng.uniform(0, 2 * np.pi)
            parts.append(spec.amplitude * env * np.sin(2 * np.pi * freq[ch] * t + phase))
    return AudioBuffer(np.concatenate(parts), spec.sample_rate_hz)


def synth_corpus(spec: SynthSpec, n_utts: int, prefix: str = "utt", out_dir=None
                 ) -> list[tuple[ManifestEntry, AudioBuffer]]:
    """Random transcripts rendered as tones; deterministic under ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(n_utts):
        n_words = int(rng.integers(spec.words[0], spec.words[1] + 1))
        words = ["".join(rng.choice(spec.vocab, size=int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))))
                 for _ in range(n_words)]
        text = " ".join(words)
        audio = render(text, spec, rng)
        uid = f"{prefix}{i:05d}"
        entry = ManifestEntry(uid, f"wav/{uid}.wav", text)
        if out_dir is not None:
            write_wav(Path(out_dir) / entry.audio_path, audio)
        out.append((entry, audio))
    if out_dir is not None:
        save_manifest([e for e, _ in out], Path(out_dir) / "manifest.csv")
    return out


def peak_transcribe(audio: AudioBuffer, spec: SynthSpec) -> str:
    """Reference decoder for noise-free synthetic audio.

    Splits on silent gaps, cuts words into symbol-length chunks and names each
    chunk by the nearest symbol frequency to its DFT peak.
    """
    s = audio.samples
    n = spec.symbol_samples
    silent = np.abs(s) < 1e-9
    words, i = [], 0
    while i < s.size:
        if silent[i]:
            i += 1
            continue
        j = i
        # a word is a run of tone chunks; chunks are whole symbol lengths
        while j < s.size and not np.all(silent[j:j + min(spec.gap_samples, s.size - j)]):
            j += n
        j = min(j, s.size)
        chars = []
        for k in range(i, j, n):
            chunk = s[k:k + n]
            mag = np.abs(np.fft.rfft(chunk))
            f_peak = np.argmax(mag) * spec.sample_rate_hz / chunk.size
            chars.append(spec.vocab[int(np.argmin(np.abs(np.array(spec.freqs_hz) - f_peak)))])
        words.append("".join(chars))
        i = j
    return " ".join(words)


# --------------------------------------------------------------------------- synthetic noise

def _pink(rng, n):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    f[0] = f[1]
    return np.fft.irfft(spec / np.sqrt(f), n)


def _band(rng, n, lo, hi, sr, order=4):
    sos = signal.butter(order, [lo, hi], btype="band", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _lowpass(x, hz, sr, order=4):
    return signal.sosfilt(signal.butter(order, hz, btype="low", fs=sr, output="sos"), x)


def _syllables(rng, n, sr, n_talkers, lo=250.0, hi=2500.0):
    """Overlapping talkers: gliding tones gated at a syllable rate."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    for _ in range(n_talkers):
        f0 = rng.uniform(lo, hi)
        glide = f0 * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 6.3)))
        phase = 2 * np.pi * np.cumsum(glide) / sr
        gate = (np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 6.3)) > rng.uniform(-0.3, 0.3))
        gate = _lowpass(gate.astype(float), 30.0, sr, order=2)
        out += gate * (np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase))
    return out


def _events(rng, n, sr, rate_hz, make):
    out = np.zeros(n)
    k = max(1, int(rng.poisson(rate_hz * n / sr)))
    for _ in range(k):
        ev = make()
        start = int(rng.integers(0, max(1, n - ev.size)))
        seg = ev[:n - start]
        out[start:start + seg.size] += seg
    return out


def synth_noise(label: NoiseLabel, duration_s: float, rng, sr: int = SAMPLE_RATE) -> AudioBuffer:
    """A colored-noise / modulation recipe per noise type, randomized per file."""
    label = NoiseLabel(label)
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    if label is NoiseLabel.BABBLE:
        x = _syllables(rng, n, sr, int(rng.integers(5, 9))) + 0.1 * _pink(rng, n)
    elif label is NoiseLabel.AIRPORT_STATION:
        def chime():
            m = int(0.6 * sr)
            tt = np.arange(m) / sr
            f = rng.choice([523.0, 659.0, 784.0])
            return 3.0 * np.exp(-3 * tt) * np.sin(2 * np.pi * f * tt)
        x = _pink(rng, n) + 0.5 * _syllables(rng, n, sr, 2, 150, 900) + _events(rng, n, sr, 0.5, chime)
    elif label is NoiseLabel.CAR:
        x = _lowpass(rng.standard_normal(n), rng.uniform(120, 250), sr)
        x *= 1 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t)
    elif label is NoiseLabel.METRO:
        def clack():
            m = int(0.05 * sr)
            return 6.0 * np.exp(-np.arange(m) / (0.008 * sr)) * rng.standard_normal(m)
        squeal = 0.3 * np.sin(2 * np.pi * rng.uniform(2500, 3500) * t) * (np.sin(2 * np.pi * 0.3 * t) > 0.5)
        x = _band(rng, n, 80, 900, sr) + _events(rng, n, sr, 2.0, clack) + squeal
    elif label is NoiseLabel.CAFE:
        def clink():
            m = int(0.12 * sr)
            tt = np.arange(m) / sr
            return 4.0 * np.exp(-40 * tt) * np.sin(2 * np.pi * rng.uniform(3000, 6000) * tt)
        x = 0.6 * _syllables(rng, n, sr, int(rng.integers(8, 14)), 200, 1800) + _events(rng, n, sr, 3.0, clink)
        x += 0.2 * _pink(rng, n)
    elif label is NoiseLabel.TRAFFIC:
        swell = 0.3 + np.abs(np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 6.3)))
        x = swell * _lowpass(rng.standard_normal(n), rng.uniform(400, 800), sr)

        def horn():
            m = int(0.4 * sr)
            tt = np.arange(m) / sr
            f = rng.uniform(350, 450)
            return 0.8 * sum(np.sin(2 * np.pi * k * f * tt) / k for k in (1, 2, 3))
        x += _events(rng, n, sr, 0.3, horn)
    elif label is NoiseLabel.AC_VACUUM:
        f0 = rng.uniform(100, 140)
        hum = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 6.3)) / k for k in range(1, 6))
        hiss = signal.sosfilt(signal.butter(2, 2000, btype="high", fs=sr, output="sos"), rng.standard_normal(n))
        x = 0.5 * hum + hiss
    else:
        raise ValueError("Clean is not a noise source")
    x = x - x.mean()
    x = 0.3 * x / np.sqrt(np.mean(x * x))
    return AudioBuffer(x, sr)


def synth_noise_set(n_per_type: int = 18, duration_s: float = 3.0, seed: int = 0,
                    out_dir=None) -> dict[NoiseLabel, list[NoiseFile]]:
    out = {}
    for label in NOISE_TYPES:
        files = []
        for i in range(n_per_type):
            nid = f"{label.value}_{i:02d}"
            audio = synth_noise(label, duration_s, np.random.default_rng(entry_seed(seed, nid)))
            apath = f"wav/{nid}.wav"
            if out_dir is not None:
                write_wav(Path(out_dir) / apath, audio, float32=True)
            files.append(NoiseFile(nid, label, audio, apath))
        out[label] = files
    return out
