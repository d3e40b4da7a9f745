"""Frozen two-source test sets, SI-SDR evaluation with clean queries, and
CSV/markdown reports shaped like an ablation table (method x training query
mode rows, test-condition columns).
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import Manifest, MixtureSample, make_mixture, natural_caption, sample_source_pair, template_caption
from .dsp import si_sdr
from .embeddings import AUDIO, TEXT
from .errors import ConfigError, DegenerateInputError, InvalidInputError
from .extractor import Extractor, model_from_checkpoint
from .manip import PcaProjector, query_transform

CSV_HEADER = ("run_id", "query_mode", "method", "test_set", "mean_sisdr_db", "stderr_db", "n")
CAPTION_STYLES = ("template", "natural")


@dataclass(frozen=True)
class TestSet:
    mixtures: tuple[MixtureSample, ...]
    seed: int
    manifest_id: str
    snr_policy: tuple[float, float]
    content_hash: str

    __test__ = False  # not a pytest class

    def __len__(self) -> int:
        return len(self.mixtures)


def _hash_mixtures(mixtures) -> str:
    h = hashlib.sha256()
    for m in mixtures:
        h.update(m.mixture.samples.tobytes())
        h.update(m.target.samples.tobytes())
        h.update(m.caption.encode())
        h.update(repr(m.snr_db).encode())
    return h.hexdigest()


def build_test_set(m: Manifest, n_mixtures: int, seed: int, snr_range=(-5.0, 5.0)) -> TestSet:
    """``n_mixtures`` frozen mixtures of two distinct-class sources."""
    if n_mixtures < 1:
        raise InvalidInputError(f"n_mixtures must be >= 1, got {n_mixtures}")
    if len(m) < 2:
        raise DegenerateInputError(f"test manifest has {len(m)} entries, need at least 2")
    rng = np.random.default_rng([int(seed), 21])
    mixtures = []
    for _ in range(n_mixtures):
        target, nontarget = sample_source_pair(m, rng)
        mixtures.append(make_mixture(m, target, nontarget, float(rng.uniform(*snr_range))))
    manifest_id = hashlib.sha256("\n".join(e.clip_id for e in m.entries).encode()).hexdigest()[:16]
    return TestSet(tuple(mixtures), int(seed), manifest_id, tuple(snr_range), _hash_mixtures(mixtures))


def eval_caption(sample: MixtureSample, style: str, index: int) -> str:
    if style == "template":
        return template_caption(sample.class_label) if sample.class_label else sample.caption
    if style == "natural":
        return natural_caption(sample.class_label, index) if sample.class_label else sample.caption
    raise InvalidInputError(f"caption style must be one of {CAPTION_STYLES}, got {style!r}")


@dataclass
class EvalCell:
    run_id: str
    query_mode: str  # training query mode of the run
    method: str
    test_set: str
    mean: float
    stderr: float
    n: int
    values: list[float] = field(default_factory=list, repr=False)


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, cell: EvalCell) -> None:
        self.cells.append(cell)

    def row_keys(self) -> list[tuple[str, str, str]]:
        seen = []
        for c in self.cells:
            k = (c.run_id, c.query_mode, c.method)
            if k not in seen:
                seen.append(k)
        return seen

    def columns(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.test_set not in seen:
                seen.append(c.test_set)
        return seen

    def cell(self, run_id: str, test_set: str) -> EvalCell:
        for c in self.cells:
            if c.run_id == run_id and c.test_set == test_set:
                return c
        raise KeyError((run_id, test_set))


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    # fixed summation order: mixture index
    mean = float(math.fsum(v.tolist()) / len(v))
    stderr = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return mean, stderr


class LoadedRun:
    """Model plus the query-space metadata stored in its checkpoint."""

    def __init__(self, blob: dict, run_id: str | None = None):
        self.model: Extractor = model_from_checkpoint(blob)
        self.method = blob.get("manipulation_config", {}).get("method", "none")
        self.train_mode = blob.get("train_config", {}).get("query_mode", TEXT)
        self.projector = PcaProjector.from_dict(blob["projector"]) if blob.get("projector") else None
        self.run_id = run_id or blob.get("run_id", "run")
        self.encoder_config = blob.get("encoder_config")


def evaluate(
    run: LoadedRun,
    test: TestSet,
    enc,
    query_mode: str = TEXT,
    caption_style: str = "template",
    test_name: str | None = None,
    batch_size: int = 50,
) -> EvalCell:
    """Mean/stderr SI-SDR of the run on ``test`` with clean (unmanipulated) queries."""
    model = run.model
    qdim = model.cfg.query_dim
    expected = run.projector.dim_out if run.method == "pca" and run.projector is not None else enc.dim
    if qdim != expected:
        raise ConfigError(f"checkpoint query_dim {qdim} does not match encoder-side query dim {expected}")
    queries = []
    for i, m in enumerate(test.mixtures):
        if query_mode == TEXT:
            q = enc.encode_text(eval_caption(m, caption_style, i))
        elif query_mode == AUDIO:
            q = enc.encode_audio(m.target)
        else:
            raise InvalidInputError(f"evaluation query mode must be text or audio, got {query_mode!r}")
        queries.append(query_transform(q, run.method, run.projector))
    dtype = next(model.parameters()).dtype
    model.eval()
    values = []
    with torch.no_grad():
        for lo in range(0, len(test), batch_size):
            chunk = test.mixtures[lo : lo + batch_size]
            mix = torch.as_tensor(np.stack([m.mixture.samples for m in chunk]), dtype=dtype)
            q = torch.as_tensor(np.stack([qq.vector for qq in queries[lo : lo + batch_size]]), dtype=dtype)
            est, _ = model(mix, q)
            est = est.double().numpy()
            values += [si_sdr(e, m.target.samples) for e, m in zip(est, chunk)]
    mean, stderr = summarize(values)
    name = test_name or (f"{query_mode}-{caption_style}" if query_mode == TEXT else query_mode)
    return EvalCell(run.run_id, run.train_mode, run.method, name, mean, stderr, len(values), values)


def reference_cell(test: TestSet, kind: str, run_id: str | None = None, test_name: str = "reference") -> EvalCell:
    """Oracle (estimate = target) or no-processing (estimate = mixture) baseline."""
    if kind == "oracle":
        values = [si_sdr(m.target, m.target) for m in test.mixtures]
    elif kind == "mixture":
        values = [si_sdr(m.mixture, m.target) for m in test.mixtures]
    else:
        raise InvalidInputError(f"unknown reference kind {kind!r}")
    mean, stderr = summarize(values)
    return EvalCell(run_id or kind, "-", kind, test_name, mean, stderr, len(values), values)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(report: EvalReport) -> str:
    if not report.cells:
        raise InvalidInputError("refusing to emit an empty report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in report.cells:
        w.writerow((c.run_id, c.query_mode, c.method, c.test_set, _fmt(c.mean), _fmt(c.stderr), c.n))
    return buf.getvalue()


def report_markdown(report: EvalReport) -> str:
    if not report.cells:
        raise InvalidInputError("refusing to emit an empty report")
    cols = report.columns()
    lines = []
    if report.metadata:
        for k in sorted(report.metadata):
            lines.append(f"<!-- {k}: {report.metadata[k]} -->")
    lines.append("| run | training query | method | " + " | ".join(cols) + " |")
    lines.append("|---|---|---|" + "---|" * len(cols))
    for run_id, mode, method in report.row_keys():
        cells = []
        for col in cols:
            try:
                c = report.cell(run_id, col)
                cells.append(f"{_fmt(c.mean)} ± {_fmt(c.stderr)} (n={c.n})")
            except KeyError:
                cells.append("")
        lines.append(f"| {run_id} | {mode} | {method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path: str | Path, fmt: str = "csv") -> Path:
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "markdown":
        text = report_markdown(report)
    else:
        raise InvalidInputError(f"report format must be csv or markdown, got {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path


def read_report_csv(path: str | Path) -> EvalReport:
    report = EvalReport()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise InvalidInputError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            report.add(
                EvalCell(
                    row["run_id"], row["query_mode"], row["method"], row["test_set"],
                    float(row["mean_sisdr_db"]), float(row["stderr_db"]), int(row["n"]),
                )
            )
    return report
