"""Query manipulations that blur the text/audio modality gap during training.

Signal-side methods (mixup, specaugment) act before the encoder; embedding-side
methods (pca, pca_inv, gaussian_noise, dropout) act on its output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .datagen import MixtureSample
from .dsp import MelSpectrogram, Waveform, mix_at_snr, pad_or_crop
from .embeddings import AUDIO, TEXT, QueryEmbedding
from .errors import ConfigError, InvalidInputError, RankDeficiencyError

METHODS = ("none", "mixup", "specaugment", "pca", "pca_inv", "gaussian_noise", "dropout")
SIGNAL_METHODS = ("mixup", "specaugment")


@dataclass
class ManipulationConfig:
    method: str = "none"
    dropout_range_audio: tuple[float, float] = (0.75, 0.95)
    dropout_range_text: tuple[float, float] = (0.25, 0.75)
    noise_range_audio: tuple[float, float] = (1.5, 3.5)
    noise_range_text: tuple[float, float] = (1.0, 2.0)
    pca_dim: int = 16
    pca_fit_size: int = 1000
    mixup_snr_range: tuple[float, float] = (-5.0, 5.0)
    num_time_masks: int = 2
    num_freq_masks: int = 2
    max_time_width: int = 64
    max_freq_width: int = 2
    dropout_rescale: bool = True
    renormalize: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def validate(self) -> list[str]:
        problems = []
        if self.method not in METHODS:
            problems.append(f"unknown manipulation method {self.method!r}; choose from {METHODS}")
        for name in ("dropout_range_audio", "dropout_range_text"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                problems.append(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        for name in ("noise_range_audio", "noise_range_text"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi):
                problems.append(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        lo, hi = self.mixup_snr_range
        if lo > hi:
            problems.append(f"mixup_snr_range is empty: {(lo, hi)}")
        if self.pca_dim < 1:
            problems.append(f"pca_dim must be >= 1, got {self.pca_dim}")
        if min(self.num_time_masks, self.num_freq_masks, self.max_time_width, self.max_freq_width) < 0:
            problems.append("SpecAugment mask counts and widths must be non-negative")
        return problems

    def check_mode(self, mode: str) -> None:
        if mode == TEXT and self.method in SIGNAL_METHODS:
            raise ConfigError(f"{self.method} manipulates audio and is undefined for text queries")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ManipulationConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# embedding-side methods
# ---------------------------------------------------------------------------


def _finish(q: QueryEmbedding, v: np.ndarray, renormalize: bool) -> QueryEmbedding:
    if renormalize:
        n = np.linalg.norm(v)
        if n > 0:
            return q.replace(v / n, normalized=True)
    return q.replace(v, normalized=False)


def dropout_embed(q: QueryEmbedding, p: float, rng: np.random.Generator, rescale: bool = False, renormalize: bool = False) -> QueryEmbedding:
    """Zero each dimension independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"dropout probability must be in [0, 1], got {p}")
    keep = rng.random(q.dim) >= p
    v = q.vector * keep
    if rescale and p < 1.0:
        v = v / (1.0 - p)
    return _finish(q, v, renormalize)


def gaussian_noise_embed(q: QueryEmbedding, alpha: float, rng: np.random.Generator, renormalize: bool = False) -> QueryEmbedding:
    """Add a random direction of length exactly ``alpha``."""
    if alpha < 0:
        raise InvalidInputError(f"alpha must be non-negative, got {alpha}")
    u = rng.standard_normal(q.dim)
    while not np.any(u):
        u = rng.standard_normal(q.dim)
    return _finish(q, q.vector + alpha * (u / np.linalg.norm(u)), renormalize)


@dataclass(frozen=True)
class PcaProjector:
    mean: np.ndarray
    components: np.ndarray  # [d, D], orthonormal rows
    explained_variance: np.ndarray
    fitted_on: int

    @property
    def dim_in(self) -> int:
        return self.components.shape[1]

    @property
    def dim_out(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaProjector":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["components"], dtype=np.float64),
            np.asarray(d["explained_variance"], dtype=np.float64),
            int(d["fitted_on"]),
        )


def fit_pca(embeddings, d: int) -> PcaProjector:
    """Top-``d`` principal axes of the centred embeddings.

    Each component is sign-fixed so that its largest-magnitude entry is
    positive.
    """
    x = np.asarray([e.vector if isinstance(e, QueryEmbedding) else e for e in embeddings], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("fit_pca needs a 2-D stack of at least two embeddings")
    if d < 1 or d > x.shape[1]:
        raise InvalidInputError(f"d must be in [1, {x.shape[1]}], got {d}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = s.max(initial=0.0) * max(x.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    if rank < d:
        raise RankDeficiencyError(f"centred embeddings have rank {rank} < d = {d}", rank)
    comps = vt[:d].copy()
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(d), idx])
    comps *= signs[:, None]
    var = s[:d] ** 2 / (x.shape[0] - 1)
    return PcaProjector(mean, comps, var, x.shape[0])


def pca_project(q: QueryEmbedding, proj: PcaProjector) -> QueryEmbedding:
    if q.dim != proj.dim_in:
        raise InvalidInputError(f"query dim {q.dim} does not match projector input dim {proj.dim_in}")
    return q.replace(proj.components @ (q.vector - proj.mean), normalized=False)


def pca_inverse(v, proj: PcaProjector, modality: str = AUDIO) -> QueryEmbedding:
    if isinstance(v, QueryEmbedding):
        modality, v = v.modality, v.vector
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (proj.dim_out,):
        raise InvalidInputError(f"vector shape {v.shape} does not match projector output dim {proj.dim_out}")
    return QueryEmbedding(proj.mean + proj.components.T @ v, modality, False)


# ---------------------------------------------------------------------------
# signal-side methods
# ---------------------------------------------------------------------------


def mixup_query_audio(s: Waveform, s_prime: Waveform, snr_db: float) -> Waveform:
    """Query audio made from ``s`` mixed with ``s_prime`` at ``snr_db``."""
    mixture, _ = mix_at_snr(s, pad_or_crop(s_prime, len(s)), snr_db)
    return mixture


def _mask_stripes(extent: int, count: int, max_width: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    stripes = []
    for _ in range(count):
        width = min(int(rng.integers(0, max_width + 1)), extent)
        start = int(rng.integers(0, extent - width + 1))
        stripes.append((start, width))
    return stripes


def spec_augment(mel: MelSpectrogram, cfg: ManipulationConfig, rng: np.random.Generator) -> MelSpectrogram:
    """Zero (in the power domain) time and frequency stripes of ``mel``."""
    if mel.n_frames < 1:
        raise InvalidInputError("SpecAugment needs at least one frame")
    power = mel.power.copy()
    for start, width in _mask_stripes(mel.n_frames, cfg.num_time_masks, cfg.max_time_width, rng):
        power[:, start : start + width] = 0.0
    for start, width in _mask_stripes(mel.mel_bins, cfg.num_freq_masks, cfg.max_freq_width, rng):
        power[start : start + width, :] = 0.0
    return MelSpectrogram(power, mel.config, mel.floor)


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def query_transform(q: QueryEmbedding, method: str, proj: PcaProjector | None) -> QueryEmbedding:
    """Deterministic map into the extractor's query space (used at train and test time)."""
    if method not in ("pca", "pca_inv"):
        return q
    if proj is None:
        raise ConfigError(f"method {method!r} requires a fitted PcaProjector")
    v = pca_project(q, proj)
    return v if method == "pca" else pca_inverse(v, proj)


def apply_manipulation(
    sample: MixtureSample,
    mode: str,
    cfg: ManipulationConfig,
    enc,
    rng: np.random.Generator,
    projector: PcaProjector | None = None,
    mixup_source: Waveform | None = None,
    clean_query: QueryEmbedding | None = None,
) -> QueryEmbedding:
    """Training-time query for ``sample``: encode, then manipulate per ``cfg``.

    ``clean_query`` lets callers pass a cached encoding of the unmodified
    target (text or audio per ``mode``).
    """
    cfg.check_mode(mode)
    method = cfg.method
    if mode not in (TEXT, AUDIO):
        raise ConfigError(f"query mode must be 'text' or 'audio', got {mode!r}")

    if method == "mixup":
        if mixup_source is None:
            raise ConfigError("mixup needs a second audio clip")
        q = enc.encode_audio(mixup_query_audio(sample.target, mixup_source, _uniform(rng, cfg.mixup_snr_range)))
    elif method == "specaugment":
        if not hasattr(enc, "encode_mel"):
            raise ConfigError("specaugment needs an encoder that accepts mel spectrograms")
        q = enc.encode_mel(spec_augment(enc.mel(sample.target), cfg, rng))
    elif clean_query is not None:
        q = clean_query
    else:
        q = enc.encode_text(sample.caption) if mode == TEXT else enc.encode_audio(sample.target)

    if method == "dropout":
        p = _uniform(rng, cfg.dropout_range_text if mode == TEXT else cfg.dropout_range_audio)
        q = dropout_embed(q, p, rng, cfg.dropout_rescale, cfg.renormalize)
    elif method == "gaussian_noise":
        alpha = _uniform(rng, cfg.noise_range_text if mode == TEXT else cfg.noise_range_audio)
        q = gaussian_noise_embed(q, alpha, rng, cfg.renormalize)
    elif method in ("pca", "pca_inv"):
        q = query_transform(q, method, projector)
    return q


def query_dim(cfg: ManipulationConfig, encoder_dim: int) -> int:
    return cfg.pca_dim if cfg.method == "pca" else encoder_dim
