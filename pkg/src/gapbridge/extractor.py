"""Query-conditioned mask-estimation extractor.

Log-magnitude STFT frames go through a Conformer stack; a conditioning block
(linear -> Swish -> FiLM -> linear) sits in front of every Conformer layer.
A sigmoid head predicts a [0, 1] mask that is applied to the complex mixture
STFT, i.e. the mixture phase is reused for resynthesis.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dsp import StftConfig, Waveform, istft_tensor, stft_tensor
from .embeddings import QueryEmbedding
from .errors import ConfigError, InvalidInputError

CHECKPOINT_FORMAT = "gapbridge-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ExtractorConfig:
    num_layers: int = 2
    attention_heads: int = 2
    attention_dim: int = 64
    ffn_dim: int = 128
    query_dim: int = 512
    conv_kernel: int = 15
    window_ms: float = 32.0
    hop_ms: float = 16.0
    sample_rate: int = 8000
    residual_conditioning: bool = False

    def __post_init__(self):
        if self.attention_dim % self.attention_heads:
            raise ConfigError(
                f"attention_dim {self.attention_dim} not divisible by attention_heads {self.attention_heads}"
            )

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_ms, self.hop_ms)

    @property
    def n_freqs(self) -> int:
        return self.stft.n_freqs(self.sample_rate)

    @classmethod
    def desk(cls, **overrides) -> "ExtractorConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ExtractorConfig":
        base = dict(num_layers=16, attention_heads=4, attention_dim=256, ffn_dim=1024, query_dim=512, sample_rate=32000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def film(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation; channels are the last axis of ``features``.

    ``gamma``/``beta`` are [channels] or [batch, channels].
    """
    c = features.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise InvalidInputError(
            f"FiLM parameters have {gamma.shape[-1]}/{beta.shape[-1]} channels, features have {c}"
        )
    if gamma.dim() == 2 and features.dim() == 3:
        gamma, beta = gamma[:, None, :], beta[:, None, :]
    return gamma * features + beta


class ConditioningBlock(nn.Module):
    def __init__(self, query_dim: int, channels: int, residual: bool = False):
        super().__init__()
        self.query_dim = query_dim
        self.residual = residual
        self.linear_in = nn.Linear(query_dim, channels)
        self.film_params = nn.Linear(channels, 2 * channels)
        self.linear_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.linear_in.bias)
        nn.init.zeros_(self.film_params.bias)
        with torch.no_grad():
            self.linear_out.weight.copy_(torch.eye(channels))
            self.linear_out.bias.zero_()

    def forward(self, x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.query_dim:
            raise InvalidInputError(f"query dim {q.shape[-1]} != configured query_dim {self.query_dim}")
        h = F.silu(self.linear_in(q))
        d_gamma, beta = self.film_params(h).chunk(2, dim=-1)
        y = self.linear_out(film(x, 1.0 + d_gamma, beta))
        return x + y if self.residual else y


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.w2(F.silu(self.w1(self.norm(x))))


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # LayerNorm instead of BatchNorm: batch-independent outputs
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)

    def forward(self, x):  # [B, T, C]
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = self.depthwise(y)
        y = F.silu(self.mid_norm(y.transpose(1, 2))).transpose(1, 2)
        return self.pointwise_out(y).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, kernel: int):
        super().__init__()
        self.ff1 = FeedForward(dim, ffn_dim)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.conv = ConvModule(dim, kernel)
        self.ff2 = FeedForward(dim, ffn_dim)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


@dataclass(frozen=True)
class MaskEstimate:
    mask: np.ndarray  # [freq, frames]


class Extractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        self.win = cfg.stft.win_length(cfg.sample_rate)
        self.hop = cfg.stft.hop_length(cfg.sample_rate)
        self.n_fft = cfg.stft.fft_size(cfg.sample_rate)
        n_freqs = self.n_fft // 2 + 1
        c = cfg.attention_dim
        self.input_proj = nn.Linear(n_freqs, c)
        self.conditioning = nn.ModuleList(
            ConditioningBlock(cfg.query_dim, c, cfg.residual_conditioning) for _ in range(cfg.num_layers)
        )
        self.blocks = nn.ModuleList(
            ConformerBlock(c, cfg.attention_heads, cfg.ffn_dim, cfg.conv_kernel) for _ in range(cfg.num_layers)
        )
        self.mask_head = nn.Linear(c, n_freqs)

    def estimate_mask(self, spec: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """[B, F, T] complex mixture STFT -> [B, F, T] mask."""
        feats = torch.log1p(spec.abs()).transpose(1, 2)
        x = self.input_proj(feats)
        for cond, block in zip(self.conditioning, self.blocks):
            x = block(cond(x, q))
        return torch.sigmoid(self.mask_head(x)).transpose(1, 2)

    def forward(self, mixture: torch.Tensor, q: torch.Tensor, mask_override: torch.Tensor | None = None):
        """mixture [B, L], q [B, query_dim] -> (estimate [B, L], mask [B, F, T])."""
        if mixture.dim() != 2:
            raise InvalidInputError(f"mixture must be [batch, samples], got {tuple(mixture.shape)}")
        if mixture.shape[-1] == 0:
            raise InvalidInputError("empty mixture")
        spec = stft_tensor(mixture, self.win, self.hop, self.n_fft)
        mask = self.estimate_mask(spec, q) if mask_override is None else mask_override.expand(spec.shape).to(spec.real.dtype)
        est = istft_tensor(spec * mask, self.win, self.hop, self.n_fft, mixture.shape[-1])
        return est, mask


def forward(model: Extractor, m: Waveform, q: QueryEmbedding, mask_override=None) -> tuple[Waveform, MaskEstimate]:
    """Single-example inference on numpy inputs."""
    if q.dim != model.cfg.query_dim:
        raise InvalidInputError(f"query dim {q.dim} != model query_dim {model.cfg.query_dim}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(m.samples, dtype=dtype)[None]
    qv = torch.as_tensor(q.vector, dtype=dtype)[None]
    if mask_override is not None:
        mask_override = torch.as_tensor(mask_override, dtype=dtype)
    with torch.no_grad():
        est, mask = model(x, qv, mask_override)
    return Waveform(est[0].double().numpy(), m.sample_rate), MaskEstimate(mask[0].double().numpy())


def build_model(cfg: ExtractorConfig, seed: int) -> Extractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Extractor(cfg)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Extractor, **payload) -> Path:
    """Write model parameters plus arbitrary metadata into one versioned file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "extractor_config": model.cfg.to_dict(),
        "parameters": {k: v.detach().clone() for k, v in model.state_dict().items()},
        **payload,
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def model_from_checkpoint(blob: dict) -> Extractor:
    model = Extractor(ExtractorConfig.from_dict(blob["extractor_config"]))
    model.load_state_dict(blob["parameters"])
    model.eval()
    return model


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
