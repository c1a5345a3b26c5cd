"""Audio front-end: WAV I/O, resampling, silence trimming, log-mel extraction.

Frame-count convention (used everywhere in the package): the waveform is
reflect-padded by ``(fft_size - hop_size) // 2`` samples on both sides and
the STFT is taken without further centering, so a clip of ``n`` samples
yields ``T = n // hop_size`` frames. Frame ``k`` is centred on sample
``k * hop_size + hop_size / 2``, which makes hop-aligned slices of the
waveform line up exactly with row-slices of the mel matrix.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from scipy import signal
from scipy.io import wavfile


class AudioFormatError(ValueError):
    pass


class SilentAudioError(ValueError):
    pass


class AudioLengthError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"waveform must be mono, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelConfig:
    """STFT / mel filterbank settings.

    Defaults are the paper-scale values (FFT 2048, window 2048, hop 1024,
    80 mels at 22.05 kHz). Filters are Slaney-style triangles spanning
    0 Hz to Nyquist with area normalisation; the STFT uses a periodic Hann
    window. Magnitudes are clamped at ``log_floor`` before the natural log.
    """

    fft_size: int = 2048
    window_size: int = 2048
    hop_size: int = 1024
    n_mels: int = 80
    sample_rate: int = 22050
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.window_size > self.fft_size:
            raise ValueError("window_size must be <= fft_size")
        if self.hop_size > self.window_size:
            raise ValueError("hop_size must be <= window_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if (self.fft_size - self.hop_size) % 2:
            raise ValueError("fft_size - hop_size must be even for symmetric padding")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def pad(self) -> int:
        return (self.fft_size - self.hop_size) // 2

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# Mel filterbank (Slaney scale)

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    mel = f / _F_SP
    log_region = f >= _MIN_LOG_HZ
    return np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(f, 1e-10) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * _F_SP
    log_region = m >= _MIN_LOG_MEL
    return np.where(log_region, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), f)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 band edges in Hz; filter i peaks at edge i + 1."""
    lo, hi = hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2)
    return mel_to_hz(np.linspace(lo, hi, cfg.n_mels + 2))


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, fft_size // 2 + 1) Slaney-normalised triangular filters."""
    edges = mel_band_edges(cfg)
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.fft_size // 2 + 1)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


class MelExtractor(torch.nn.Module):
    """Differentiable log-mel front-end shared by data prep and training losses."""

    def __init__(self, cfg: MelConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("basis", torch.from_numpy(mel_filterbank(cfg)).float(), persistent=False)
        self.register_buffer("window", torch.hann_window(cfg.window_size), persistent=False)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        """y: (B, N) -> (B, n_mels, N // hop)."""
        cfg = self.cfg
        if y.shape[-1] < cfg.window_size:
            raise AudioLengthError(f"need at least {cfg.window_size} samples, got {y.shape[-1]}")
        y = torch.nn.functional.pad(y.unsqueeze(1), (cfg.pad, cfg.pad), mode="reflect").squeeze(1)
        spec = torch.stft(
            y,
            cfg.fft_size,
            hop_length=cfg.hop_size,
            win_length=cfg.window_size,
            window=self.window.to(y.dtype),
            center=False,
            return_complex=True,
        )
        mag = torch.sqrt(spec.real.pow(2) + spec.imag.pow(2) + 1e-9)
        mel = torch.matmul(self.basis.to(y.dtype), mag)
        return torch.log(torch.clamp(mel, min=cfg.log_floor))


_EXTRACTORS: dict[tuple, MelExtractor] = {}


def _extractor(cfg: MelConfig) -> MelExtractor:
    key = tuple(asdict(cfg).values())
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = MelExtractor(cfg)
    return _EXTRACTORS[key]


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != config {cfg.sample_rate}")
    if len(w) < cfg.window_size:
        raise AudioLengthError(f"need at least {cfg.window_size} samples, got {len(w)}")
    with torch.no_grad():
        mel = _extractor(cfg)(torch.from_numpy(w.samples)[None])[0]
    return MelSpectrogram(mel.T.contiguous().numpy(), cfg)


# ---------------------------------------------------------------------------
# I/O


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return samples
    ratio = Fraction(target_rate, orig_rate)
    out = signal.resample_poly(samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return out.astype(np.float32)


def load_waveform(path, target_rate: int = 22050) -> Waveform:
    """Read a PCM WAV file as a mono float waveform at ``target_rate``.

    Integer PCM is scaled to [-1, 1); float files are only rescaled when
    their peak exceeds 1. Channels are averaged.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float32)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise AudioFormatError(f"{path}: non-finite samples")
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if peak > 1.0:
        x = x / peak
    x = resample(x, rate, target_rate)
    np.clip(x, -1.0, 1.0, out=x)
    return Waveform(x, target_rate)


def save_wav(path, w: Waveform) -> None:
    """16-bit PCM output."""
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


# ---------------------------------------------------------------------------
# Trimming and segmenting


def trim_silence(w: Waveform, threshold_db: float = -40.0, window_ms: float = 20.0) -> Waveform:
    """Drop leading/trailing windows whose RMS is below ``threshold_db`` re. peak."""
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    x = w.samples
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    if peak == 0.0:
        raise SilentAudioError("waveform is entirely silent")
    win = max(1, int(round(w.sample_rate * window_ms / 1000.0)))
    n_win = -(-len(x) // win)
    padded = np.zeros(n_win * win, dtype=np.float64)
    padded[: len(x)] = x
    rms = np.sqrt(np.mean(padded.reshape(n_win, win) ** 2, axis=1))
    with np.errstate(divide="ignore"):
        level = 20.0 * np.log10(rms / peak)
    loud = np.flatnonzero(level >= threshold_db)
    if len(loud) == 0:
        raise SilentAudioError("no window above threshold")
    start = loud[0] * win
    stop = min(len(x), (loud[-1] + 1) * win)
    return Waveform(x[start:stop].copy(), w.sample_rate)


def random_frame_offset(n_frames: int, segment_frames: int, rng: np.random.Generator) -> int:
    if n_frames < segment_frames:
        raise AudioLengthError(f"clip has {n_frames} frames, segment needs {segment_frames}")
    return int(rng.integers(0, n_frames - segment_frames + 1))


def sample_segment(
    w: Waveform, segment_samples: int, rng: np.random.Generator, cfg: MelConfig | None = None
) -> tuple[Waveform, MelSpectrogram]:
    """Hop-aligned random window plus the matching rows of the whole-clip mel."""
    cfg = cfg or MelConfig(sample_rate=w.sample_rate)
    if segment_samples % cfg.hop_size:
        raise ValueError("segment_samples must be a multiple of hop_size")
    if len(w) < segment_samples:
        raise AudioLengthError(f"waveform has {len(w)} samples, segment needs {segment_samples}")
    mel = mel_spectrogram(w, cfg)
    seg_frames = segment_samples // cfg.hop_size
    start = random_frame_offset(mel.n_frames, seg_frames, rng)
    offset = start * cfg.hop_size
    seg = Waveform(w.samples[offset : offset + segment_samples].copy(), w.sample_rate)
    return seg, MelSpectrogram(mel.frames[start : start + seg_frames].copy(), cfg)
