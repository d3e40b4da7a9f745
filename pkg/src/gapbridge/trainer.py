"""Training loop: on-the-fly mixing, query-mode selection, manipulation,
negative SI-SDR loss, warmup/constant/step-decay schedule, AdamW with global
gradient-norm clipping, resumable checkpoints.

Every batch is a pure function of (seed, step), and the model holds no
stochastic layers, so a run resumed from a checkpoint continues bit-identically.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datagen import Manifest, MixtureSample, make_mixture, sample_source_pair
from .dsp import mix_at_snr, pad_or_crop, si_sdr_torch
from .embeddings import AUDIO, TEXT, QueryEmbedding, ToyJointEncoder, ToyJointEncoderConfig
from .errors import ConfigError, TrainingDivergedError
from .extractor import (
    Extractor,
    ExtractorConfig,
    build_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .manip import (
    SIGNAL_METHODS,
    ManipulationConfig,
    PcaProjector,
    apply_manipulation,
    fit_pca,
    query_dim,
    query_transform,
)

log = logging.getLogger(__name__)

QUERY_MODES = (TEXT, AUDIO, "both")


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    constant_steps: int = 3000
    decay_factor: float = 0.9
    decay_every: int = 500
    weight_decay: float = 1e-2
    grad_clip_norm: float = 5.0
    snr_range: tuple[float, float] = (-5.0, 5.0)
    query_mode: str = TEXT
    manipulation: ManipulationConfig = field(default_factory=ManipulationConfig)
    seed: int = 0
    segment_seconds: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    n_valid: int = 64
    # named sub-seeds; None falls back to ``seed``
    data_seed: int | None = None
    init_seed: int | None = None
    manip_seed: int | None = None

    def __post_init__(self):
        if isinstance(self.manipulation, dict):
            self.manipulation = ManipulationConfig.from_dict(self.manipulation)
        self.snr_range = tuple(self.snr_range)
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(
            steps=400_000, batch_size=32, lr_peak=2e-4, warmup_steps=4000, constant_steps=160_000,
            decay_every=10_000, segment_seconds=10.0, eval_interval=10_000, checkpoint_interval=10_000,
        )
        base.update(overrides)
        return cls(**base)

    def sub_seed(self, name: str) -> int:
        v = getattr(self, f"{name}_seed")
        return self.seed if v is None else int(v)

    def validate(self) -> list[str]:
        problems = []
        for name in ("steps", "batch_size", "warmup_steps", "decay_every", "eval_interval", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.constant_steps < 0:
            problems.append(f"constant_steps must be >= 0, got {self.constant_steps}")
        if not 0.0 < self.decay_factor < 1.0:
            problems.append(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.lr_peak <= 0:
            problems.append(f"lr_peak must be positive, got {self.lr_peak}")
        if self.grad_clip_norm <= 0:
            problems.append(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.snr_range[0] > self.snr_range[1]:
            problems.append(f"snr_range is empty: {self.snr_range}")
        if self.query_mode not in QUERY_MODES:
            problems.append(f"query_mode must be one of {QUERY_MODES}, got {self.query_mode!r}")
        problems += self.manipulation.validate()
        if self.query_mode == TEXT and self.manipulation.method in ("mixup", "specaugment"):
            problems.append(f"{self.manipulation.method} is undefined for text-queried training")
        return problems

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["manipulation"] = self.manipulation.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, constant plateau, then step decay."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    after = step - cfg.warmup_steps - cfg.constant_steps
    if after < 0:
        return cfg.lr_peak
    return cfg.lr_peak * cfg.decay_factor ** (after // cfg.decay_every)


def _rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng([int(seed), *tags])


# named sub-seed streams
_DATA, _MODE, _MANIP, _PCA = 11, 12, 13, 14


def fit_query_projector(manifest: Manifest, enc, cfg: TrainConfig) -> PcaProjector | None:
    """PCA over text embeddings of training captions (only for pca/pca_inv)."""
    mcfg = cfg.manipulation
    if mcfg.method not in ("pca", "pca_inv"):
        return None
    rng = _rng(cfg.sub_seed("data"), _PCA)
    idx = rng.integers(0, len(manifest), size=mcfg.pca_fit_size)
    embs = [enc.encode_text(manifest.entries[i].query_caption(), seed=j) for j, i in enumerate(idx)]
    return fit_pca(embs, mcfg.pca_dim)


class BatchBuilder:
    """Builds the (mixture, query) batch for a step; caches clean encodings."""

    def __init__(self, manifest: Manifest, enc, cfg: TrainConfig, projector: PcaProjector | None = None):
        self.manifest = manifest
        self.enc = enc
        self.cfg = cfg
        self.projector = projector
        self.segment = int(round(cfg.segment_seconds * manifest.sample_rate))
        self._clean: dict[tuple[str, str], QueryEmbedding] = {}

    def step_mode(self, step: int) -> str:
        if self.cfg.query_mode != "both":
            return self.cfg.query_mode
        return TEXT if _rng(self.cfg.sub_seed("data"), _MODE, step).random() < 0.5 else AUDIO

    def _clean_query(self, sample: MixtureSample, mode: str) -> QueryEmbedding:
        key = (mode, sample.target_id if mode == AUDIO else sample.caption)
        q = self._clean.get(key)
        if q is None:
            q = self.enc.encode_text(sample.caption) if mode == TEXT else self.enc.encode_audio(sample.target)
            self._clean[key] = q
        return q

    def sample(self, rng: np.random.Generator) -> MixtureSample:
        target, nontarget = sample_source_pair(self.manifest, rng)
        snr = float(rng.uniform(*self.cfg.snr_range))
        s = pad_or_crop(self.manifest.load(target), self.segment)
        n = pad_or_crop(self.manifest.load(nontarget), self.segment)
        mixture, scaled = mix_at_snr(s, n, snr)
        return MixtureSample(
            mixture, s, scaled, target.query_caption(), target.class_label, snr, target.clip_id, nontarget.clip_id
        )

    def build(self, step: int) -> tuple[list[MixtureSample], list[QueryEmbedding], str]:
        mode = self.step_mode(step)
        data_rng = _rng(self.cfg.sub_seed("data"), _DATA, step)
        manip_rng = _rng(self.cfg.sub_seed("manip"), _MANIP, step)
        mcfg = self.cfg.manipulation
        if mode == TEXT and mcfg.method in SIGNAL_METHODS:
            # "both" mode: signal-domain methods only touch the audio steps
            mcfg = ManipulationConfig.from_dict({**mcfg.to_dict(), "method": "none"})
        samples, queries = [], []
        for _ in range(self.cfg.batch_size):
            sample = self.sample(data_rng)
            mixup_source = None
            if mcfg.method == "mixup":
                while True:
                    other = self.manifest.entries[int(data_rng.integers(len(self.manifest)))]
                    if other.clip_id != sample.target_id:
                        break
                mixup_source = self.manifest.load(other)
            clean = None if mcfg.method in ("mixup", "specaugment") else self._clean_query(sample, mode)
            q = apply_manipulation(sample, mode, mcfg, self.enc, manip_rng, self.projector, mixup_source, clean)
            samples.append(sample)
            queries.append(q)
        return samples, queries, mode


def make_training_batch(manifest: Manifest, cfg: TrainConfig, step: int, enc, projector=None):
    """Stateless form of :meth:`BatchBuilder.build`."""
    samples, queries, _ = BatchBuilder(manifest, enc, cfg, projector).build(step)
    return list(zip(samples, queries))


def batch_tensors(samples, queries, dtype=torch.float32):
    mix = torch.as_tensor(np.stack([s.mixture.samples for s in samples]), dtype=dtype)
    tgt = torch.as_tensor(np.stack([s.target.samples for s in samples]), dtype=dtype)
    q = torch.as_tensor(np.stack([qq.vector for qq in queries]), dtype=dtype)
    return mix, tgt, q


def loss_fn(model: Extractor, mix: torch.Tensor, tgt: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    est, _ = model(mix, q)
    return -si_sdr_torch(est, tgt).mean()


def make_optimizer(model: Extractor, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )


def training_step(model, batch, optimizer, cfg: TrainConfig, step: int) -> tuple[float, float, float]:
    """One AdamW update. Returns (loss, grad_norm_before_clip, lr)."""
    mix, tgt, q = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn(model, mix, tgt, q)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at step {step} (seed {cfg.seed})")
    loss.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm))
    lr = lr_schedule(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return float(loss.detach()), grad_norm, lr


def build_encoder(encoder_cfg: dict):
    return ToyJointEncoder(ToyJointEncoderConfig.from_dict(encoder_cfg))


@dataclass
class RunPaths:
    out_dir: Path

    @property
    def log(self) -> Path:
        return self.out_dir / "train_log.jsonl"

    @property
    def final(self) -> Path:
        return self.out_dir / "final.ckpt"

    def checkpoint(self, step: int) -> Path:
        return self.out_dir / f"step_{step:07d}.ckpt"


def _validation_queries(test, enc, method, projector):
    text_q = [query_transform(enc.encode_text(m.caption), method, projector) for m in test.mixtures]
    audio_q = [query_transform(enc.encode_audio(m.target), method, projector) for m in test.mixtures]
    return text_q, audio_q


def _validate(model, test, queries) -> float:
    model.eval()
    mix, tgt, q = batch_tensors(test.mixtures, queries)
    with torch.no_grad():
        est, _ = model(mix, q)
        return float(si_sdr_torch(est, tgt).mean())


def train(
    manifest: Manifest,
    out_dir: str | Path,
    train_cfg: TrainConfig,
    extractor_cfg: ExtractorConfig,
    encoder_cfg: ToyJointEncoderConfig,
    valid_manifest: Manifest | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    run_id: str | None = None,
    enc=None,
) -> Path:
    """Train and return the path of the final checkpoint.

    ``stop_at`` halts early (after writing a checkpoint) so a run can be
    interrupted and resumed deterministically.
    """
    problems = train_cfg.validate()
    qdim = query_dim(train_cfg.manipulation, encoder_cfg.dim)
    if extractor_cfg.query_dim != qdim:
        problems.append(f"extractor query_dim {extractor_cfg.query_dim} != effective query dim {qdim}")
    if problems:
        raise ConfigError("invalid training configuration:\n  " + "\n  ".join(problems))

    paths = RunPaths(Path(out_dir))
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_id or paths.out_dir.name
    enc = enc or ToyJointEncoder(encoder_cfg)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    if resume is not None:
        blob = load_checkpoint(resume)
        model = model_from_checkpoint(blob)
        optimizer = make_optimizer(model, train_cfg)
        optimizer.load_state_dict(blob["optimizer"])
        start = int(blob["step"])
        projector = PcaProjector.from_dict(blob["projector"]) if blob.get("projector") else None
    else:
        model = build_model(extractor_cfg, train_cfg.sub_seed("init"))
        optimizer = make_optimizer(model, train_cfg)
        start = 0
        projector = fit_query_projector(manifest, enc, train_cfg)

    builder = BatchBuilder(manifest, enc, train_cfg, projector)
    val_set = val_text = val_audio = None
    if valid_manifest is not None:
        from .evalharness import build_test_set

        val_set = build_test_set(valid_manifest, train_cfg.n_valid, seed=0)
        val_text, val_audio = _validation_queries(val_set, enc, train_cfg.manipulation.method, projector)

    def payload(step):
        return dict(
            step=step,
            optimizer=optimizer.state_dict(),
            train_config=train_cfg.to_dict(),
            manipulation_config=train_cfg.manipulation.to_dict(),
            encoder_config=encoder_cfg.to_dict(),
            projector=projector.to_dict() if projector is not None else None,
            run_id=run_id,
        )

    end = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    mode_flag = "a" if resume is not None else "w"
    t0 = time.time()
    with open(paths.log, mode_flag, encoding="utf-8") as log_file:
        for step in range(start, end):
            samples, queries, mode = builder.build(step)
            loss, grad_norm, lr = training_step(model, batch_tensors(samples, queries), optimizer, train_cfg, step)
            rec = {"step": step, "lr": lr, "loss": loss, "grad_norm": grad_norm, "mode": mode}
            done = step + 1
            if val_set is not None and done % train_cfg.eval_interval == 0:
                rec["valid_text_sisdr"] = _validate(model, val_set, val_text)
                rec["valid_audio_sisdr"] = _validate(model, val_set, val_audio)
                log.info(
                    "%s step %d loss %.3f valid text %.2f dB audio %.2f dB (%.0fs)",
                    run_id, done, loss, rec["valid_text_sisdr"], rec["valid_audio_sisdr"], time.time() - t0,
                )
            log_file.write(json.dumps(rec) + "\n")
            if done % train_cfg.checkpoint_interval == 0 and done < train_cfg.steps:
                save_checkpoint(paths.checkpoint(done), model, **payload(done))
    if end < train_cfg.steps:
        return save_checkpoint(paths.checkpoint(end), model, **payload(end))
    return save_checkpoint(paths.final, model, **payload(end))


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
