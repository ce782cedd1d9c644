"""Deterministic signal backbone: waveform I/O, framing, STFT/ISTFT, mixture
synthesis, segmentation and feature normalization.

All functions here are pure given their inputs and explicit seeds; none keeps
mutable state, so concurrent use across utterances is safe.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import InvalidInput, NumericalError

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_FRAME_LEN = 256  # 32 ms at 8 kHz
DEFAULT_HOP = 128        # 16 ms at 8 kHz

SOURCE_KINDS = ("harmonic_voice", "modulated_noise", "chirp")


@dataclass
class Waveform:
    """A mono sample sequence with its rate and a provenance label.

    Labels follow the convention "mixture", "source-<s>" or "estimate-<s>"
    with 1-based source indices.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    label: str = "mixture"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    def energy(self) -> float:
        return float(np.sum(self.samples ** 2))

    def relabeled(self, label: str) -> "Waveform":
        return Waveform(self.samples, self.sample_rate, label)


def source_label(s: int) -> str:
    return f"source-{s}"


def estimate_label(s: int) -> str:
    return f"estimate-{s}"


@dataclass
class ComplexSpectrogram:
    """Half-spectrum STFT frames plus the framing parameters that produced them.

    values has shape [T, F] with F = frame_len // 2 + 1 (Hermitian-redundant
    bins dropped).
    """

    values: np.ndarray
    frame_len: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP
    window: np.ndarray = field(default=None, repr=False)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.window is None:
            self.window = hamming_window(self.frame_len)
        if self.values.ndim != 2 or self.values.shape[1] != self.frame_len // 2 + 1:
            raise InvalidInput(
                f"expected [T, {self.frame_len // 2 + 1}] values, got {self.values.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def with_values(self, values: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(values, self.frame_len, self.hop, self.window, self.sample_rate)


def hamming_window(frame_len: int) -> np.ndarray:
    # Periodic variant: w[n] + w[n + frame_len/2] is exactly constant, which
    # keeps the overlap-add denominator flat away from the edges.
    n = np.arange(frame_len)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / frame_len)


def stft(w: Waveform, frame_len: int = DEFAULT_FRAME_LEN, hop: int = DEFAULT_HOP) -> ComplexSpectrogram:
    """Hamming-windowed STFT; frames = floor((len - frame_len)/hop) + 1, no padding."""
    x = w.samples
    if len(x) < frame_len:
        raise InvalidInput(f"waveform of {len(x)} samples is shorter than one {frame_len}-sample frame")
    window = hamming_window(frame_len)
    num_frames = (len(x) - frame_len) // hop + 1
    starts = np.arange(num_frames) * hop
    frames = np.stack([x[s:s + frame_len] for s in starts]) * window
    values = np.fft.rfft(frames, axis=1)
    return ComplexSpectrogram(values, frame_len, hop, window, w.sample_rate)


def istft(spec: ComplexSpectrogram, label: str = "mixture") -> Waveform:
    """Overlap-add synthesis with window-square normalization.

    Output length is (T - 1) * hop + frame_len. Raises NumericalError if the
    normalization denominator vanishes anywhere (cannot happen with the
    Hamming window, which is bounded away from zero).
    """
    window = spec.window
    frame_len, hop = spec.frame_len, spec.hop
    frames = np.fft.irfft(spec.values, n=frame_len, axis=1)
    out_len = (spec.num_frames - 1) * hop + frame_len
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    wsq = window ** 2
    for t in range(spec.num_frames):
        s = t * hop
        out[s:s + frame_len] += frames[t] * window
        norm[s:s + frame_len] += wsq
    if np.min(norm) < 1e-12:
        raise NumericalError("overlap-add normalization denominator vanished")
    return Waveform(out / norm, spec.sample_rate, label)


def masked_reconstruct(
    mix_spec: ComplexSpectrogram,
    mask: np.ndarray,
    length: int | None = None,
    label: str = "estimate-1",
) -> Waveform:
    """Masked mixture magnitude with the mixture phase retained, back to time domain."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != mix_spec.values.shape:
        raise InvalidInput(f"mask shape {mask.shape} does not match spectrogram {mix_spec.values.shape}")
    values = mask * mix_spec.magnitude() * np.exp(1j * mix_spec.phase())
    wav = istft(mix_spec.with_values(values), label=label)
    if length is not None:
        wav = Waveform(fit_length(wav.samples, length), wav.sample_rate, label)
    return wav


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    """Trim or zero-pad a 1-D array to an exact sample count."""
    if len(x) >= length:
        return x[:length]
    return np.concatenate([x, np.zeros(length - len(x))])


@dataclass
class MixSpec:
    """How to assemble a mixture: source count, SNR range, seed, duration."""

    source_count: int = 2
    snr_range_db: tuple = (-5.0, 5.0)
    seed: int = 0
    duration: float = 4.0

    def __post_init__(self):
        if self.source_count < 2:
            raise InvalidInput(f"need at least two sources, got {self.source_count}")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise InvalidInput(f"bad SNR range {self.snr_range_db}")

    def draw_snrs(self, rng: np.random.Generator | None = None) -> list:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        lo, hi = self.snr_range_db
        return [float(rng.uniform(lo, hi)) for _ in range(self.source_count - 1)]


def mix_sources(sources, spec: MixSpec, snr_db=None):
    """Scale sources to drawn (or given) SNRs against the first source and sum.

    The first source is the reference. Each other source s is scaled so that
    10*log10(P_ref / P_s) equals its SNR. If the mixture peak exceeds 1, the
    mixture and every scaled source are divided by the same peak so mask
    ratios are preserved. Returns (mixture, scaled_sources).
    """
    if len(sources) != spec.source_count:
        raise InvalidInput(f"expected {spec.source_count} sources, got {len(sources)}")
    rates = {s.sample_rate for s in sources}
    if len(rates) != 1:
        raise InvalidInput(f"sample rates differ: {sorted(rates)}")
    n = min(len(s) for s in sources)
    clipped = [s.samples[:n] for s in sources]
    powers = [float(np.sum(c ** 2)) for c in clipped]
    if any(p < 1e-12 for p in powers):
        raise InvalidInput("a source has (near) zero energy")

    if snr_db is None:
        snr_db = spec.draw_snrs()
    snr_db = list(np.atleast_1d(np.asarray(snr_db, dtype=np.float64)))
    if len(snr_db) != spec.source_count - 1:
        raise InvalidInput(f"need {spec.source_count - 1} SNR values, got {len(snr_db)}")

    scaled = [clipped[0]]
    for j, snr in enumerate(snr_db, start=1):
        gain = np.sqrt(powers[0] / (powers[j] * 10.0 ** (snr / 10.0)))
        scaled.append(clipped[j] * gain)
    mixture = np.sum(scaled, axis=0)
    peak = np.max(np.abs(mixture))
    if peak > 1.0:
        mixture = mixture / peak
        scaled = [s / peak for s in scaled]
    rate = sources[0].sample_rate
    out_sources = [Waveform(s, rate, source_label(i + 1)) for i, s in enumerate(scaled)]
    return Waveform(mixture, rate, "mixture"), out_sources


def synth_toy_source(
    kind: str,
    duration: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Deterministic synthetic source stand-ins: harmonic voice, modulated noise, chirp.

    Peak amplitude is normalized to 0.9; all randomness comes from numpy's
    default_rng(seed) so identical arguments give bit-identical arrays.
    """
    if duration <= 0:
        raise InvalidInput(f"duration must be positive, got {duration}")
    if kind not in SOURCE_KINDS:
        raise InvalidInput(f"unknown source kind {kind!r}; choose from {SOURCE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    if kind == "harmonic_voice":
        f0 = rng.uniform(80.0, 300.0)
        vib_rate = rng.uniform(4.0, 7.0)
        vib_depth = rng.uniform(0.01, 0.04)
        inst_f = f0 * (1.0 + vib_depth * np.sin(2.0 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
        phase = 2.0 * np.pi * np.cumsum(inst_f) / sample_rate
        rolloff = rng.uniform(0.6, 1.4)
        x = np.zeros(n)
        for k in range(1, 9):
            if k * f0 * 1.1 >= sample_rate / 2:
                break
            amp = rng.uniform(0.5, 1.0) / k ** rolloff
            x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        # syllable-like amplitude envelope, kept above 0.25 so the source never goes silent
        syl_rate = rng.uniform(1.5, 4.0)
        env = 0.25 + 0.75 * 0.5 * (1.0 + np.sin(2.0 * np.pi * syl_rate * t + rng.uniform(0, 2 * np.pi)))
        x *= env
    elif kind == "modulated_noise":
        low = rng.uniform(700.0, 1400.0)
        high = rng.uniform(2200.0, 3600.0)
        b, a = sps.butter(4, [low, high], btype="bandpass", fs=sample_rate)
        x = sps.lfilter(b, a, rng.standard_normal(n))
        mod_rate = rng.uniform(2.0, 6.0)
        env = 0.3 + 0.7 * 0.5 * (1.0 + np.sin(2.0 * np.pi * mod_rate * t + rng.uniform(0, 2 * np.pi)))
        x *= env
    else:  # chirp
        f_lo = rng.uniform(100.0, 300.0)
        f_hi = rng.uniform(2500.0, 3500.0)
        x = sps.chirp(t, f0=f_lo, f1=f_hi, t1=duration, method="linear", phi=rng.uniform(0, 360))
        x *= 0.4 + 0.6 * np.linspace(1.0, 0.6, n)

    x = 0.9 * x / np.max(np.abs(x))
    return Waveform(x, sample_rate, source_label(1))


@dataclass
class Segment:
    """One fixed-length training slice; pad_samples > 0 marks a zero-padded tail."""

    waveform: Waveform
    pad_samples: int = 0

    @property
    def padded(self) -> bool:
        return self.pad_samples > 0

    @property
    def valid_samples(self) -> int:
        return len(self.waveform) - self.pad_samples


def segment_waveform(w: Waveform, seg_seconds: float = 4.0) -> list:
    """Split into non-overlapping fixed-length segments; zero-pad the remainder."""
    seg_len = int(round(seg_seconds * w.sample_rate))
    segments = []
    pos = 0
    n = len(w)
    while pos < n:
        chunk = w.samples[pos:pos + seg_len]
        pad = seg_len - len(chunk)
        if pad:
            chunk = np.concatenate([chunk, np.zeros(pad)])
        segments.append(Segment(Waveform(chunk, w.sample_rate, w.label), pad))
        pos += seg_len
    return segments


@dataclass
class FeatureStats:
    """Per-frequency mean and standard deviation of training magnitudes."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)

    @classmethod
    def fit(cls, magnitudes) -> "FeatureStats":
        """Accumulate per-bin statistics over an iterable of [T, F] magnitude arrays."""
        count = 0
        total = None
        total_sq = None
        for mag in magnitudes:
            mag = np.asarray(mag, dtype=np.float64)
            if total is None:
                total = np.zeros(mag.shape[1])
                total_sq = np.zeros(mag.shape[1])
            total += mag.sum(axis=0)
            total_sq += (mag ** 2).sum(axis=0)
            count += mag.shape[0]
        if count == 0:
            raise InvalidInput("cannot fit feature statistics on an empty set")
        mean = total / count
        var = np.maximum(total_sq / count - mean ** 2, 0.0)
        std = np.maximum(np.sqrt(var), 1e-8)
        return cls(mean, std)


def normalize_magnitude(mag: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """Per-frequency z-score with the fitted statistics."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape[1] != stats.mean.shape[0]:
        raise InvalidInput(f"{mag.shape[1]} bins but stats carry {stats.mean.shape[0]}")
    return (mag - stats.mean) / stats.std


def read_wav(path) -> Waveform:
    """Read mono 16-bit PCM; samples scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise InvalidInput(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise InvalidInput(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write mono 16-bit PCM little-endian; values clipped to [-1, 1]."""
    ints = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(ints.tobytes())
