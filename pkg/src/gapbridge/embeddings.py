"""Query encoders: the joint text/audio encoder contract, a toy encoder with a
tunable modality gap, and gap diagnostics.

Toy encoder geometry (all in R^D):

* one orthonormal prototype per class, plus a unit ``offset`` direction
  orthogonal to every prototype;
* text:  normalize(p_k + text_noise * words(caption) [+ text_noise * eps(seed)])
  where ``words`` sums hashed vectors of the non-class words, so every
  templated caption shares one style direction;
* both noise terms are projected off ``offset``, so the paired cosine is
  monotone in ``gap``;
* audio: normalize(sum_k a_k p_k + gap * offset + audio_noise * n), with
  ``a`` a temperature softmax over logits of a linear read-out of mean
  log-mel features, and ``n`` a unit "acoustic detail" vector: the same
  whitened features pushed through a fixed Gaussian map and projected off
  the prototypes and the offset. ``n`` is what a real audio tower carries
  beyond the caption (timbre, pitch, loudness contour); it is informative
  about the clip, yet absent from every text embedding.
"""
from __future__ import annotations

import hashlib
import json
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .datagen import CLASS_BANK, SynthClassSpec, synth_clip
from .dsp import MEL_BINS, MelSpectrogram, StftConfig, Waveform, mel_spectrogram
from .errors import CalibrationError, DegenerateInputError, InvalidInputError, UnknownClassError

TEXT = "text"
AUDIO = "audio"


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    modality: str
    normalized: bool = True

    def __post_init__(self):
        if self.modality not in (TEXT, AUDIO):
            raise InvalidInputError(f"modality must be 'text' or 'audio', got {self.modality!r}")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def replace(self, vector: np.ndarray, normalized: bool = False) -> "QueryEmbedding":
        return QueryEmbedding(vector, self.modality, normalized)


@runtime_checkable
class JointEncoder(Protocol):
    dim: int

    def encode_text(self, caption: str, seed: int | None = None) -> QueryEmbedding: ...

    def encode_audio(self, w: Waveform, seed: int | None = None) -> QueryEmbedding: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateInputError("cannot normalise a zero vector")
    return v / n


def cosine(a, b) -> float:
    a = a.vector if isinstance(a, QueryEmbedding) else np.asarray(a, dtype=np.float64)
    b = b.vector if isinstance(b, QueryEmbedding) else np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _digest(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass
class ToyJointEncoderConfig:
    class_names: tuple[str, ...] = tuple(name for name, _, _ in CLASS_BANK)
    dim: int = 512
    gap: float = 0.0
    text_noise: float = 1.0
    audio_noise: float = 1.0
    temperature: float = 0.1
    seed: int = 0
    sample_rate: int = 8000
    reference_clips: int = 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyJointEncoderConfig":
        d = dict(d)
        d["class_names"] = tuple(d["class_names"])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ToyJointEncoderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


_LOGIT_SCALE = 2.0
_WORD = re.compile(r"[a-z0-9']+")


class ToyJointEncoder:
    """Deterministic stand-in for a contrastive text/audio encoder."""

    def __init__(self, cfg: ToyJointEncoderConfig):
        k = len(cfg.class_names)
        if cfg.dim < k + 1:
            raise InvalidInputError(f"dim {cfg.dim} too small for {k} prototypes plus an offset")
        if cfg.gap < 0:
            raise InvalidInputError(f"gap must be non-negative, got {cfg.gap}")
        self.cfg = cfg
        self.dim = cfg.dim
        self.class_names = tuple(cfg.class_names)
        self._class_index = {name: i for i, name in enumerate(self.class_names)}
        rng = np.random.default_rng([cfg.seed, 1])
        q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, k + 1)))
        self.prototypes = q[:, :k].T.copy()
        self.offset = q[:, k].copy()
        self._shared = q.T.copy()  # [k + 1, D]
        self._detail_map = np.random.default_rng([cfg.seed, 3]).standard_normal((cfg.dim, MEL_BINS))
        self.stft = StftConfig()
        self._fit_readout()

    # -- audio read-out ----------------------------------------------------

    def _mel_features(self, mel: MelSpectrogram) -> np.ndarray:
        return (10.0 * mel.log()).mean(axis=1)

    def _fit_readout(self) -> None:
        bank = {name: (kind, params) for name, kind, params in CLASS_BANK}
        feats, targets = [], []
        for ci, name in enumerate(self.class_names):
            if name not in bank:
                raise UnknownClassError(f"toy encoder has no generator for class {name!r}")
            kind, params = bank[name]
            spec = SynthClassSpec(ci, name, kind, dict(params))
            for j in range(self.cfg.reference_clips):
                seed = _digest("toy-reference", self.cfg.seed, name, j) % (2**31)
                w = synth_clip(spec, seed, 1.0, self.cfg.sample_rate)
                feats.append(self._mel_features(mel_spectrogram(w, MEL_BINS, self.stft)))
                targets.append(np.eye(len(self.class_names))[ci])
        x = np.asarray(feats)
        self._feat_mean = x.mean(axis=0)
        self._feat_std = x.std(axis=0) + 1e-6
        z = (x - self._feat_mean) / self._feat_std
        z1 = np.hstack([z, np.ones((z.shape[0], 1))])
        lam = 1.0
        reg = lam * np.eye(z1.shape[1])
        reg[-1, -1] = 0.0
        # targets are logits: 2 for the true class, 0 elsewhere, so at T = 0.1
        # a clean clip gets a posterior within ~1e-8 of one-hot
        y = _LOGIT_SCALE * np.asarray(targets)
        self._readout = np.linalg.solve(z1.T @ z1 + reg, z1.T @ y)

    def _whitened(self, mel: MelSpectrogram) -> np.ndarray:
        return (self._mel_features(mel) - self._feat_mean) / self._feat_std

    def class_posterior(self, mel: MelSpectrogram) -> np.ndarray:
        return self._posterior(self._whitened(mel))

    def _posterior(self, z: np.ndarray) -> np.ndarray:
        logits = np.append(z, 1.0) @ self._readout
        a = logits / self.cfg.temperature
        a = np.exp(a - a.max())
        return a / a.sum()

    # -- text ----------------------------------------------------------------

    def caption_class(self, caption: str) -> int:
        words = _WORD.findall(caption.lower())
        found = {self._class_index[w] for w in words if w in self._class_index}
        if len(found) != 1:
            raise UnknownClassError(
                f"caption {caption!r} must name exactly one known class, found {len(found)}"
            )
        return found.pop()

    def _word_vector(self, word: str) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 2, zlib.crc32(word.encode())])
        return rng.standard_normal(self.dim)

    def _style_vector(self, caption: str) -> np.ndarray:
        words = [w for w in _WORD.findall(caption.lower()) if w not in self._class_index]
        if not words:
            return np.zeros(self.dim)
        v = np.sum([self._word_vector(w) for w in words], axis=0)
        return v / np.linalg.norm(v)

    def encode_text(self, caption: str, seed: int | None = None) -> QueryEmbedding:
        if not caption or not caption.strip():
            raise InvalidInputError("caption must be non-empty")
        k = self.caption_class(caption)
        noise = self._style_vector(caption)
        if seed is not None:
            rng = np.random.default_rng(_digest("text-call", self.cfg.seed, caption, seed))
            noise = noise + rng.standard_normal(self.dim) / np.sqrt(self.dim)
        noise -= np.dot(noise, self.offset) * self.offset
        v = self.prototypes[k] + self.cfg.text_noise * noise
        return QueryEmbedding(_unit(v), TEXT, True)

    # -- audio ---------------------------------------------------------------

    def _audio_base(self, mel: MelSpectrogram, key: bytes, seed: int | None) -> np.ndarray:
        """Gap-free part of the audio embedding (before normalisation)."""
        z = self._whitened(mel)
        a = self._posterior(z)
        n = self._detail_map @ z
        n /= np.linalg.norm(n)
        if seed is not None:
            rng = np.random.default_rng(_digest("audio-call", self.cfg.seed, key, seed))
            n = n + rng.standard_normal(self.dim) / np.sqrt(self.dim)
        n -= self._shared.T @ (self._shared @ n)
        return a @ self.prototypes + self.cfg.audio_noise * _unit(n)

    def _check_audio(self, w: Waveform) -> None:
        if len(w) < self.stft.win_length(w.sample_rate):
            raise InvalidInputError("waveform shorter than one analysis frame")
        if not np.any(w.samples):
            raise DegenerateInputError("cannot embed a silent waveform")
        if w.sample_rate != self.cfg.sample_rate:
            raise InvalidInputError(
                f"toy encoder expects {self.cfg.sample_rate} Hz audio, got {w.sample_rate} Hz"
            )

    def audio_base(self, w: Waveform, seed: int | None = None) -> np.ndarray:
        self._check_audio(w)
        mel = mel_spectrogram(w, MEL_BINS, self.stft)
        return self._audio_base(mel, w.samples.tobytes(), seed)

    def encode_audio(self, w: Waveform, seed: int | None = None) -> QueryEmbedding:
        v = self.audio_base(w, seed) + self.cfg.gap * self.offset
        return QueryEmbedding(_unit(v), AUDIO, True)

    def mel(self, w: Waveform) -> MelSpectrogram:
        self._check_audio(w)
        return mel_spectrogram(w, MEL_BINS, self.stft)

    def encode_mel(self, mel: MelSpectrogram, seed: int | None = None) -> QueryEmbedding:
        """Audio embedding from a (possibly augmented) mel spectrogram."""
        v = self._audio_base(mel, mel.power.tobytes(), seed) + self.cfg.gap * self.offset
        return QueryEmbedding(_unit(v), AUDIO, True)


class CallableJointEncoder:
    """Adapter for an external encoder given as two callables.

    ``text_fn(caption) -> vector`` and ``audio_fn(samples, sample_rate) ->
    vector`` must both return ``dim``-dimensional arrays; outputs are
    L2-normalised here.
    """

    def __init__(self, dim: int, text_fn: Callable, audio_fn: Callable):
        self.dim = dim
        self._text_fn = text_fn
        self._audio_fn = audio_fn

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise InvalidInputError(f"external encoder returned dim {v.shape[0]}, expected {self.dim}")
        return _unit(v)

    def encode_text(self, caption: str, seed: int | None = None) -> QueryEmbedding:
        if not caption:
            raise InvalidInputError("caption must be non-empty")
        return QueryEmbedding(self._check(self._text_fn(caption)), TEXT, True)

    def encode_audio(self, w: Waveform, seed: int | None = None) -> QueryEmbedding:
        if not np.any(w.samples):
            raise DegenerateInputError("cannot embed a silent waveform")
        return QueryEmbedding(self._check(self._audio_fn(w.samples, w.sample_rate)), AUDIO, True)


def modality_gap(enc: JointEncoder, pairs: Sequence[tuple[str, Waveform]]) -> float:
    """Mean cosine between paired text and audio embeddings."""
    if len(pairs) == 0:
        raise InvalidInputError("modality_gap needs at least one pair")
    cos = [cosine(enc.encode_text(c), enc.encode_audio(w)) for c, w in pairs]
    return float(np.mean(cos))


def calibrate_gap(
    cfg: ToyJointEncoderConfig,
    target_cosine: float,
    pairs: Sequence[tuple[str, Waveform]],
    tol: float = 1e-4,
) -> float:
    """Bisection for the gap that puts the mean paired cosine at ``target_cosine``."""
    if not (0.0 < target_cosine <= 1.0):
        raise InvalidInputError(f"target_cosine must be in (0, 1], got {target_cosine}")
    if len(pairs) == 0:
        raise InvalidInputError("calibration needs at least one pair")
    enc = ToyJointEncoder(ToyJointEncoderConfig.from_dict({**cfg.to_dict(), "gap": 0.0}))
    texts = np.array([enc.encode_text(c).vector for c, _ in pairs])
    bases = np.array([enc.audio_base(w) for _, w in pairs])
    num = np.einsum("ij,ij->i", texts, bases)
    base_sq = np.einsum("ij,ij->i", bases, bases)
    # noise is orthogonal to the offset, so |base + g*offset|^2 = |base|^2 + g^2
    def mean_cos(g: float) -> float:
        return float(np.mean(num / np.sqrt(base_sq + g * g)))

    c0 = mean_cos(0.0)
    if target_cosine >= c0:
        if target_cosine - c0 > 0.05:
            raise CalibrationError(
                f"target cosine {target_cosine} unreachable: gap-free cosine is only {c0:.4f}",
                achieved=(0.0, c0),
            )
        return 0.0
    lo, hi = 0.0, 1.0
    while mean_cos(hi) > target_cosine:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError(
                f"target cosine {target_cosine} unreachable", achieved=(mean_cos(hi), c0)
            )
    while hi - lo > 1e-10 and abs(mean_cos(0.5 * (lo + hi)) - target_cosine) > tol * 1e-3:
        mid = 0.5 * (lo + hi)
        if mean_cos(mid) > target_cosine:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def paired_examples(manifest, limit: int | None = None) -> list[tuple[str, Waveform]]:
    entries = manifest.entries if limit is None else manifest.entries[:limit]
    return [(e.query_caption(), manifest.load(e)) for e in entries]


# ---------------------------------------------------------------------------
# embedding cache file: one JSON record per line
# ---------------------------------------------------------------------------


def write_embedding_cache(path: str | Path, records: Iterable[tuple[str, QueryEmbedding]]) -> None:
    lines = [
        json.dumps({"clip_id": cid, "modality": q.modality, "vector": [float(x) for x in q.vector]})
        for cid, q in records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embedding_cache(path: str | Path) -> list[tuple[str, QueryEmbedding]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            v = np.asarray(rec["vector"], dtype=np.float64)
            out.append((rec["clip_id"], QueryEmbedding(v, rec["modality"], bool(abs(np.linalg.norm(v) - 1) < 1e-6))))
    return out
