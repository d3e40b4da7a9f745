"""Synthetic labelled audio corpus and manifest handling.

Eight generator kinds occupy separated spectral regions so that a class is
recoverable from its spectrum; each clip draws its pitch/band/modulation from
the class ranges using a seed derived from (corpus seed, split, clip index).
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav, write_wav
from .errors import DegenerateInputError, InvalidInputError

CAPTION_TEMPLATE = "this is the sound of {}"
PEAK = 0.9
DEFAULT_RATE = 8000
DEFAULT_DURATION = 1.0
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SynthClassSpec:
    class_id: int
    name: str
    kind: str
    params: dict = field(default_factory=dict)


# (name, kind, parameter ranges). Spectral centroids land near
# 350, 520, 780, 1100, 1500, 2000, 2600 and 3300 Hz respectively.
CLASS_BANK: tuple[tuple[str, str, dict], ...] = (
    ("harmonic", "sine-harmonic-stack", {"f0": (135.0, 150.0), "n_harmonics": 6}),
    ("chirp", "chirp", {"f_start": (380.0, 420.0), "f_end": (650.0, 700.0)}),
    ("tremolo", "am-tone", {"carrier": (750.0, 810.0), "rate": (4.0, 8.0), "depth": (0.6, 0.9)}),
    ("buzz", "square", {"f0": (330.0, 360.0), "max_harmonic": 11}),
    ("warble", "fm-tone", {"carrier": (1450.0, 1550.0), "deviation": (40.0, 80.0), "rate": (5.0, 7.0)}),
    ("burst", "filtered-noise-burst", {"center": (1900.0, 2100.0), "width": (200.0, 300.0), "rate": (4.0, 6.0)}),
    ("clicks", "click-train", {"carrier": (2500.0, 2700.0), "rate": (15.0, 25.0), "click_ms": (3.0, 5.0)}),
    ("hiss", "band-noise", {"center": (3200.0, 3400.0), "width": (250.0, 350.0)}),
)

NATURAL_CAPTIONS: dict[str, tuple[str, ...]] = {
    "harmonic": (
        "a low harmonic tone hums steadily",
        "a steady harmonic drone with many overtones",
        "someone holds a deep harmonic note",
        "a warm harmonic sound rings without stopping",
    ),
    "chirp": (
        "a chirp rises quickly in pitch",
        "an upward chirp sweeps through the air",
        "a single long chirp glides higher",
        "a bird like chirp slides upward",
    ),
    "tremolo": (
        "a tone wobbles in loudness with tremolo",
        "a pulsing tremolo note keeps going",
        "a flute note played with heavy tremolo",
        "tremolo makes a steady pitch throb",
    ),
    "buzz": (
        "an electric buzz drones on",
        "a harsh buzz comes from a machine",
        "a loud buzz fills the room",
        "an insect like buzz continues",
    ),
    "warble": (
        "a high warble bends up and down",
        "a siren like warble wavers",
        "a whistle with a fast warble",
        "a bright warble oscillates in pitch",
    ),
    "burst": (
        "a short burst of static pops repeatedly",
        "a noisy burst comes again in quick succession",
        "a radio crackles in rhythmic burst patterns",
        "repeated burst sounds of spraying air",
    ),
    "clicks": (
        "rapid clicks tick like a clock",
        "a stream of sharp clicks",
        "mechanical clicks repeat quickly",
        "someone taps producing fast clicks",
    ),
    "hiss": (
        "a high pitched hiss from escaping steam",
        "a constant hiss of air leaking",
        "a tape hiss fills the background",
        "a snake like hiss that does not stop",
    ),
}


def class_specs(n_classes: int) -> list[SynthClassSpec]:
    if n_classes < 2:
        raise InvalidInputError(f"need at least 2 classes, got {n_classes}")
    if n_classes > len(CLASS_BANK):
        raise InvalidInputError(f"at most {len(CLASS_BANK)} synthetic classes are available, got {n_classes}")
    return [SynthClassSpec(i, name, kind, dict(params)) for i, (name, kind, params) in enumerate(CLASS_BANK[:n_classes])]


def template_caption(class_label: str) -> str:
    return CAPTION_TEMPLATE.format(class_label)


def natural_caption(class_label: str, index: int) -> str:
    bank = NATURAL_CAPTIONS[class_label]
    return bank[index % len(bank)]


def _u(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _band_noise(rng, n, rate, center, width):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    # raised-cosine band edges to avoid ringing
    dist = np.abs(freqs - center) / (width / 2.0)
    gain = np.where(dist <= 1.0, 0.5 * (1.0 + np.cos(np.pi * np.clip(dist, 0, 1))), 0.0)
    return np.fft.irfft(spec * gain, n=n)


def synth_clip(spec: SynthClassSpec, seed: int, duration: float = DEFAULT_DURATION, rate: int = DEFAULT_RATE) -> Waveform:
    """Render one clip of ``spec``; deterministic in (spec, seed), peak 0.9."""
    if duration <= 0:
        raise InvalidInputError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng([spec.class_id, int(seed)])
    n = max(1, int(round(duration * rate)))
    t = np.arange(n) / rate
    p = spec.params
    nyq = rate / 2.0
    phase0 = rng.uniform(0, 2 * np.pi)
    kind = spec.kind

    if kind == "sine-harmonic-stack":
        f0 = _u(rng, p["f0"])
        x = np.zeros(n)
        for k in range(1, p["n_harmonics"] + 1):
            if k * f0 < nyq:
                x += np.sin(2 * np.pi * k * f0 * t + k * phase0) / k
    elif kind == "chirp":
        f1, f2 = _u(rng, p["f_start"]), _u(rng, p["f_end"])
        inst = f1 + (f2 - f1) * t / max(duration, 1e-9)
        x = np.sin(2 * np.pi * np.cumsum(inst) / rate + phase0)
    elif kind == "am-tone":
        fc, fm, depth = _u(rng, p["carrier"]), _u(rng, p["rate"]), _u(rng, p["depth"])
        env = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi)))
        x = env * np.sin(2 * np.pi * fc * t + phase0)
    elif kind == "square":
        f0 = _u(rng, p["f0"])
        x = np.zeros(n)
        for k in range(1, p["max_harmonic"] + 1, 2):
            if k * f0 < nyq:
                x += np.sin(2 * np.pi * k * f0 * t + k * phase0) / k
    elif kind == "fm-tone":
        fc, dev, fm = _u(rng, p["carrier"]), _u(rng, p["deviation"]), _u(rng, p["rate"])
        inst = fc + dev * np.sin(2 * np.pi * fm * t)
        x = np.sin(2 * np.pi * np.cumsum(inst) / rate + phase0)
    elif kind == "filtered-noise-burst":
        center, width, r = _u(rng, p["center"]), _u(rng, p["width"]), _u(rng, p["rate"])
        gate_phase = rng.uniform(0, 1)
        gate = ((t * r + gate_phase) % 1.0) < 0.5
        smooth = np.convolve(gate.astype(float), np.hanning(max(3, rate // 100)), mode="same")
        x = _band_noise(rng, n, rate, center, width) * smooth
    elif kind == "click-train":
        fc, r, click_ms = _u(rng, p["carrier"]), _u(rng, p["rate"]), _u(rng, p["click_ms"])
        m = max(2, int(round(click_ms / 1000 * rate)))
        click = np.hanning(m) * np.sin(2 * np.pi * fc * np.arange(m) / rate)
        x = np.zeros(n)
        offset = rng.uniform(0, 1.0 / r)
        for start in np.arange(offset, duration, 1.0 / r):
            i = int(start * rate)
            seg = click[: max(0, min(m, n - i))]
            x[i : i + seg.shape[0]] += seg
    elif kind == "band-noise":
        center, width = _u(rng, p["center"]), _u(rng, p["width"])
        x = _band_noise(rng, n, rate, min(center, 0.95 * nyq), width)
    else:
        raise InvalidInputError(f"unknown generator kind {kind!r}")

    peak = np.max(np.abs(x))
    if peak == 0:
        raise DegenerateInputError(f"class {spec.name!r} rendered silence at rate {rate}")
    return Waveform(x * (PEAK / peak), rate)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    audio_path: str
    caption: str | None = None
    class_label: str | None = None
    duration: float = 0.0

    def __post_init__(self):
        if self.caption is None and self.class_label is None:
            raise InvalidInputError(f"entry {self.clip_id!r} needs a caption or a class_label")

    @property
    def label_key(self) -> str:
        return self.class_label if self.class_label is not None else self.caption

    def query_caption(self) -> str:
        return self.caption if self.caption is not None else template_caption(self.class_label)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    split: str = "train"
    sample_rate: int = DEFAULT_RATE
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.clip_id in seen:
                raise InvalidInputError(f"duplicate clip_id {e.clip_id!r}")
            seen.add(e.clip_id)

    def __len__(self) -> int:
        return len(self.entries)

    def class_labels(self) -> list[str]:
        return sorted({e.label_key for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.audio_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load(self, entry: ManifestEntry) -> Waveform:
        w = self._cache.get(entry.clip_id)
        if w is None:
            w = read_wav(self.resolve(entry))
            if w.sample_rate != self.sample_rate:
                from .dsp import resample

                w = resample(w, self.sample_rate)
            self._cache[entry.clip_id] = w
        return w

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        header = {"format": "gapbridge-manifest/1", "split": self.split, "sample_rate": self.sample_rate}
        lines = [json.dumps(header)]
        lines += [json.dumps(asdict(e), ensure_ascii=False) for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        split, rate = "train", None
        entries = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "format" in rec and "clip_id" not in rec:
                split = rec.get("split", split)
                rate = rec.get("sample_rate", rate)
                continue
            entries.append(ManifestEntry(**rec))
        m = cls(entries, split=split, sample_rate=rate or DEFAULT_RATE, root=path.parent)
        if rate is None and entries:
            m.sample_rate = read_wav(m.resolve(entries[0])).sample_rate
        return m


def _clip_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(split.encode()), index]).generate_state(1)[0])


def build_synth_manifest(
    n_classes: int,
    clips_per_class: int,
    seed: int,
    out_dir: str | Path,
    split: str = "train",
    duration: float = DEFAULT_DURATION,
    rate: int = DEFAULT_RATE,
) -> Manifest:
    """Render a labelled synthetic split and write ``{out_dir}/{split}.jsonl``."""
    specs = class_specs(n_classes)
    if clips_per_class < 1:
        raise InvalidInputError(f"clips_per_class must be >= 1, got {clips_per_class}")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio" / split
    try:
        audio_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {audio_dir}: {exc}") from exc
    entries = []
    index = 0
    for spec in specs:
        for j in range(clips_per_class):
            clip_id = f"{split}-{spec.name}-{j:04d}"
            w = synth_clip(spec, _clip_seed(seed, split, index), duration, rate)
            rel = Path("audio") / split / f"{clip_id}.wav"
            write_wav(out_dir / rel, w)
            entries.append(
                ManifestEntry(clip_id, rel.as_posix(), template_caption(spec.name), spec.name, round(len(w) / rate, 6))
            )
            index += 1
    manifest = Manifest(entries, split=split, sample_rate=rate, root=out_dir)
    manifest.write(out_dir / f"{split}.jsonl")
    return manifest


def sample_source_pair(m: Manifest, rng: np.random.Generator) -> tuple[ManifestEntry, ManifestEntry]:
    """Uniformly draw an ordered (target, non-target) pair with distinct labels."""
    n = len(m.entries)
    if n < 2:
        raise DegenerateInputError(f"manifest has {n} entries, need at least 2")
    if len({e.label_key for e in m.entries}) < 2:
        raise DegenerateInputError("manifest needs at least 2 distinct classes to form a pair")
    while True:
        i, j = rng.integers(0, n, size=2)
        a, b = m.entries[i], m.entries[j]
        if a.label_key != b.label_key:
            return a, b


@dataclass(frozen=True)
class MixtureSample:
    """One two-source training/eval record; ``mixture = target + nontarget`` exactly."""

    mixture: Waveform
    target: Waveform
    nontarget: Waveform
    caption: str
    class_label: str | None
    snr_db: float
    target_id: str = ""
    nontarget_id: str = ""


def make_mixture(m: Manifest, target: ManifestEntry, nontarget: ManifestEntry, snr_db: float, caption: str | None = None) -> MixtureSample:
    """Mix ``nontarget`` (padded or cropped to the target length) at ``snr_db``."""
    from .dsp import mix_at_snr, pad_or_crop

    s = m.load(target)
    n = pad_or_crop(m.load(nontarget), len(s))
    mixture, scaled = mix_at_snr(s, n, snr_db)
    return MixtureSample(
        mixture, s, scaled, caption or target.query_caption(), target.class_label, float(snr_db),
        target.clip_id, nontarget.clip_id,
    )
