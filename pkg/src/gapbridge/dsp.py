"""Signal processing primitives: STFT/iSTFT, mel spectrograms, SNR mixing,
resampling, SI-SDR and WAV I/O.

The STFT is implemented once on torch tensors so the extractor can backprop
through it; the :class:`Waveform`-level functions wrap it in float64.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal as sps
from scipy.io import wavfile

from .errors import DegenerateInputError, InvalidInputError

SI_SDR_CAP_DB = 60.0
MEL_BINS = 64
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class StftConfig:
    """Hann-window STFT parameters in milliseconds; sample counts depend on the rate."""

    window_ms: float = 32.0
    hop_ms: float = 16.0

    def __post_init__(self):
        if not (0 < self.hop_ms <= self.window_ms):
            raise InvalidInputError(
                f"need 0 < hop_ms <= window_ms, got hop={self.hop_ms}, window={self.window_ms}"
            )

    def win_length(self, sample_rate: int) -> int:
        return int(round(self.window_ms / 1000.0 * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return max(1, int(round(self.hop_ms / 1000.0 * sample_rate)))

    def fft_size(self, sample_rate: int) -> int:
        return 1 << (self.win_length(sample_rate) - 1).bit_length()

    def n_freqs(self, sample_rate: int) -> int:
        return self.fft_size(sample_rate) // 2 + 1

    def n_frames(self, length: int, sample_rate: int) -> int:
        return 1 + math.ceil(length / self.hop_length(sample_rate))


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # [freq, frames], complex
    config: StftConfig
    sample_rate: int
    source_length: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


@dataclass(frozen=True)
class MelSpectrogram:
    """Mel band power (non-negative) on the STFT frame grid."""

    power: np.ndarray  # [mel_bins, frames]
    config: StftConfig = field(default_factory=StftConfig)
    floor: float = LOG_FLOOR

    @property
    def mel_bins(self) -> int:
        return self.power.shape[0]

    @property
    def n_frames(self) -> int:
        return self.power.shape[1]

    def log(self) -> np.ndarray:
        return np.log10(np.maximum(self.power, self.floor))


# ---------------------------------------------------------------------------
# tensor-level STFT shared with the extractor
# ---------------------------------------------------------------------------


def hann_window(win_length: int, dtype=torch.float64) -> torch.Tensor:
    return torch.hann_window(win_length, periodic=True, dtype=dtype)


def stft_tensor(x: torch.Tensor, win: int, hop: int, n_fft: int) -> torch.Tensor:
    """STFT over the last axis of ``x`` -> complex tensor [..., freq, frames].

    The signal is padded by ``win // 2`` zeros in front (frame centres on
    sample 0) and zero-padded at the end to complete the final frame.
    """
    length = x.shape[-1]
    pad = win // 2
    n_frames = 1 + math.ceil(length / hop)
    total = (n_frames - 1) * hop + win
    xp = F.pad(x, (pad, total - pad - length))
    frames = xp.unfold(-1, win, hop) * hann_window(win, x.dtype)
    spec = torch.fft.rfft(frames, n=n_fft, dim=-1)
    return spec.transpose(-1, -2)


def istft_tensor(spec: torch.Tensor, win: int, hop: int, n_fft: int, length: int) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft_tensor`."""
    n_frames = spec.shape[-1]
    if length > n_frames * hop + win:
        raise InvalidInputError(
            f"length {length} exceeds frames*hop + window = {n_frames * hop + win}"
        )
    frames = torch.fft.irfft(spec.transpose(-1, -2), n=n_fft, dim=-1)[..., :win]
    window = hann_window(win, frames.dtype)
    frames = frames * window
    lead = frames.shape[:-2]
    total = (n_frames - 1) * hop + win
    flat = frames.reshape(-1, n_frames, win).transpose(1, 2)
    y = F.fold(flat, output_size=(1, total), kernel_size=(1, win), stride=(1, hop))
    y = y.reshape(*lead, total)
    env = F.fold(
        (window**2).reshape(1, win, 1).expand(1, win, n_frames),
        output_size=(1, total),
        kernel_size=(1, win),
        stride=(1, hop),
    ).reshape(total)
    env = torch.where(env > 1e-10, env, torch.ones_like(env))
    y = y / env
    pad = win // 2
    y = y[..., pad : pad + length]
    if y.shape[-1] < length:
        y = F.pad(y, (0, length - y.shape[-1]))
    return y


# ---------------------------------------------------------------------------
# waveform-level operations
# ---------------------------------------------------------------------------


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    if len(w) == 0:
        raise InvalidInputError("cannot take the STFT of an empty waveform")
    sr = w.sample_rate
    bins = stft_tensor(
        torch.from_numpy(w.samples), cfg.win_length(sr), cfg.hop_length(sr), cfg.fft_size(sr)
    )
    return ComplexSpectrogram(bins.numpy(), cfg, sr, len(w))


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None, length: int | None = None) -> Waveform:
    cfg = cfg or spec.config
    sr = spec.sample_rate
    length = spec.source_length if length is None else length
    y = istft_tensor(
        torch.from_numpy(np.asarray(spec.bins, dtype=np.complex128)),
        cfg.win_length(sr),
        cfg.hop_length(sr),
        cfg.fft_size(sr),
        length,
    )
    return Waveform(y.numpy(), sr)


def _hz_to_mel(f):
    # slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = math.log(6.4) / 27.0
    lin = f / f_sp
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, lin)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@functools.lru_cache(maxsize=16)
def _mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int, oversample: int) -> np.ndarray:
    n_freqs = n_fft // 2 + 1
    if mel_bins < 1 or mel_bins > n_freqs:
        raise InvalidInputError(f"mel_bins must be in [1, {n_freqs}], got {mel_bins}")
    nyquist = sample_rate / 2.0
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(nyquist), mel_bins + 2))
    bin_hz = nyquist / (n_freqs - 1)
    fine = np.linspace(0.0, nyquist, (n_freqs - 1) * oversample + 1)
    # hat kernel of each FFT bin evaluated on the fine grid
    pos = fine / bin_hz
    hats = np.maximum(0.0, 1.0 - np.abs(pos[None, :] - np.arange(n_freqs)[:, None]))
    fb = np.empty((mel_bins, n_freqs))
    for m in range(mel_bins):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        tri = np.maximum(0.0, np.minimum((fine - lo) / (c - lo), (hi - fine) / (hi - c)))
        tri *= 2.0 / (hi - lo)
        fb[m] = np.trapezoid(tri[None, :] * hats, fine, axis=1)
    fb /= fb.sum(axis=1, keepdims=True)
    fb.setflags(write=False)
    return fb


def mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int = MEL_BINS, oversample: int = 64) -> np.ndarray:
    """Area-normalised triangular filterbank, shape [mel_bins, n_fft//2 + 1].

    Each triangle is integrated against the linear-interpolation kernel of
    every FFT bin, so narrow low-frequency bands never come out empty. Rows
    are normalised to unit sum.
    """
    return _mel_filterbank(int(sample_rate), int(n_fft), int(mel_bins), int(oversample))


def mel_spectrogram(w: Waveform, mel_bins: int = MEL_BINS, cfg: StftConfig = StftConfig()) -> MelSpectrogram:
    sr = w.sample_rate
    fb = mel_filterbank(sr, cfg.fft_size(sr), mel_bins)
    power = stft(w, cfg).magnitude ** 2
    return MelSpectrogram(fb @ power, cfg)


def mix_at_snr(target: Waveform, noise: Waveform, snr_db: float) -> tuple[Waveform, Waveform]:
    """Scale ``noise`` so that target/noise energy ratio equals ``snr_db``."""
    if target.sample_rate != noise.sample_rate:
        raise InvalidInputError(
            f"sample rates differ: {target.sample_rate} vs {noise.sample_rate}"
        )
    if len(target) != len(noise):
        raise InvalidInputError(f"lengths differ: {len(target)} vs {len(noise)}")
    e_t, e_n = target.energy(), noise.energy()
    if e_t <= 0.0 or e_n <= 0.0:
        raise DegenerateInputError("mix_at_snr needs nonzero target and noise energy")
    gain = math.sqrt(e_t / (e_n * 10.0 ** (snr_db / 10.0)))
    scaled = noise.samples * gain
    return Waveform(target.samples + scaled, target.sample_rate), Waveform(scaled, target.sample_rate)


def si_sdr(estimate, reference, cap: float = SI_SDR_CAP_DB) -> float:
    """Scale-invariant SDR in dB, clipped to ``[-cap, cap]``.

    Accepts :class:`Waveform` or plain arrays.
    """
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateInputError("SI-SDR reference has zero energy")
    if not np.any(est):
        return -cap
    beta = float(np.dot(est, ref)) / ref_energy
    target = beta * ref
    err = target - est
    num = float(np.dot(target, target))
    den = float(np.dot(err, err))
    if den == 0.0:
        return cap
    if num == 0.0:
        return -cap
    return float(np.clip(10.0 * math.log10(num / den), -cap, cap))


def si_sdr_torch(estimate: torch.Tensor, reference: torch.Tensor, cap: float = SI_SDR_CAP_DB) -> torch.Tensor:
    """Batched differentiable SI-SDR over the last axis."""
    tiny = torch.finfo(estimate.dtype).tiny
    ref_energy = (reference * reference).sum(-1, keepdim=True)
    beta = (estimate * reference).sum(-1, keepdim=True) / ref_energy.clamp_min(tiny)
    target = beta * reference
    err = target - estimate
    num = (target * target).sum(-1).clamp_min(tiny)
    den = (err * err).sum(-1).clamp_min(tiny)
    return (10.0 * (torch.log10(num) - torch.log10(den))).clamp(-cap, cap)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling; length = round(L * target / source)."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(target_rate, w.sample_rate)
    y = sps.resample_poly(w.samples, ratio.numerator, ratio.denominator, padtype="line")
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.shape[0]), mode="edge")
    return Waveform(y, target_rate)


def pad_or_crop(w: Waveform, length: int) -> Waveform:
    if len(w) == length:
        return w
    if len(w) > length:
        return Waveform(w.samples[:length], w.sample_rate)
    return Waveform(np.pad(w.samples, (0, length - len(w))), w.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform, subtype: str = "float32") -> None:
    if subtype == "float32":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        raise InvalidInputError(f"unsupported WAV subtype {subtype!r}")
    wavfile.write(str(path), w.sample_rate, data)
