"""Command-line entry point: ``gapbridge <command> [flags]``.

Commands
  synth-data   write train/valid/test manifests of synthetic class clips
  gap          measure (or calibrate) the text/audio modality gap
  train        train one extractor, or the whole ablation grid with --grid
  eval         score checkpoints on a frozen test set and write a report
  manipulate   apply one embedding manipulation to a stored embedding file

Relative output paths resolve under $GAPBRIDGE_OUT when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import SPLITS, Manifest, build_synth_manifest
from .embeddings import (
    AUDIO,
    TEXT,
    ToyJointEncoder,
    ToyJointEncoderConfig,
    calibrate_gap,
    modality_gap,
    paired_examples,
    read_embedding_cache,
    write_embedding_cache,
)
from .errors import ConfigError, GapBridgeError
from .evalharness import EvalReport, LoadedRun, build_test_set, emit_report, evaluate
from .extractor import ExtractorConfig, load_checkpoint
from .manip import METHODS, SIGNAL_METHODS, ManipulationConfig, dropout_embed, fit_pca, gaussian_noise_embed, pca_inverse, pca_project, query_dim
from .trainer import QUERY_MODES, TrainConfig, train

log = logging.getLogger("gapbridge")

OUT_ENV = "GAPBRIDGE_OUT"
GRID_MODES = QUERY_MODES
GRID_METHODS = METHODS
CONDITIONS = ("text-template", "text-natural", "audio")


def grid_combos(modes=GRID_MODES, methods=GRID_METHODS) -> list[tuple[str, str]]:
    """Valid (query mode, method) pairs; signal-domain methods need audio queries."""
    return [(mode, m) for mode in modes for m in methods if not (mode == TEXT and m in SIGNAL_METHODS)]


def out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _csv(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# run config file
# ---------------------------------------------------------------------------


def load_run_config(path: str | Path) -> dict:
    """Read a JSON run config: paths, train, extractor, manipulation, encoder, seed."""
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = set(cfg) - {"paths", "train", "extractor", "manipulation", "encoder", "seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown run config keys {sorted(unknown)}")
    return cfg


def _load_encoder_config(spec) -> ToyJointEncoderConfig:
    if spec is None:
        return ToyJointEncoderConfig()
    if isinstance(spec, dict):
        if spec.get("kind", "toy") != "toy":
            raise ConfigError(f"encoder kind {spec.get('kind')!r} cannot be built from the command line")
        body = spec.get("config", {})
        return _load_encoder_config(body) if isinstance(body, str) else ToyJointEncoderConfig.from_dict(
            {**ToyJointEncoderConfig().to_dict(), **body}
        )
    return ToyJointEncoderConfig.load(spec)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = out_path(args.out)
    counts = {"train": args.per_class, "valid": args.eval_per_class, "test": args.eval_per_class}
    for split in args.splits:
        m = build_synth_manifest(args.classes, counts[split], args.seed, out, split=split, rate=args.rate, duration=args.duration)
        print(f"{split}: {out / (split + '.jsonl')} ({len(m)} entries)")
    return 0


def _encoder_from_args(args) -> ToyJointEncoderConfig:
    cfg = _load_encoder_config(args.encoder)
    for flag, name in (("dim", "dim"), ("gap_value", "gap"), ("text_noise", "text_noise"), ("audio_noise", "audio_noise")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg


def cmd_gap(args) -> int:
    manifest = Manifest.read(args.manifest)
    cfg = _encoder_from_args(args)
    if manifest.sample_rate != cfg.sample_rate:
        raise ConfigError(f"manifest is {manifest.sample_rate} Hz but the encoder expects {cfg.sample_rate} Hz")
    pairs = paired_examples(manifest, args.limit)
    if args.calibrate is not None:
        cfg.gap = calibrate_gap(cfg, args.calibrate, pairs)
        target = out_path(args.write_encoder)
        target.parent.mkdir(parents=True, exist_ok=True)
        cfg.save(target)
        log.info("gap=%.6f written to %s", cfg.gap, target)
    value = modality_gap(ToyJointEncoder(cfg), pairs)
    print(f"mean_cosine={value:.6f}")
    return 0


def _train_config(args, run_cfg: dict, mode: str, method: str) -> TrainConfig:
    base = TrainConfig.paper() if args.preset == "paper" else TrainConfig()
    d = {**base.to_dict(), **run_cfg.get("train", {})}
    d["manipulation"] = {**d["manipulation"], **run_cfg.get("manipulation", {}), "method": method}
    d["query_mode"] = mode
    for flag, name in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr_peak")):
        v = getattr(args, flag)
        if v is not None:
            d[name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    elif "seed" in run_cfg:
        d["seed"] = run_cfg["seed"]
    return TrainConfig.from_dict(d)


def _extractor_config(args, run_cfg: dict, train_cfg: TrainConfig, enc_dim: int) -> ExtractorConfig:
    base = ExtractorConfig.paper() if args.preset == "paper" else ExtractorConfig.desk()
    d = {**base.to_dict(), **run_cfg.get("extractor", {})}
    d["query_dim"] = query_dim(train_cfg.manipulation, enc_dim)
    return ExtractorConfig.from_dict(d)


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config) if args.config else {}
    paths = run_cfg.get("paths", {})
    manifest_path = args.manifest or paths.get("manifest")
    if manifest_path is None:
        raise ConfigError("train needs --manifest (or paths.manifest in --config)")
    valid_path = args.valid_manifest or paths.get("valid_manifest")
    out = out_path(args.out or paths.get("out_dir", "runs"))
    enc_cfg = _load_encoder_config(args.encoder or run_cfg.get("encoder"))

    if args.grid:
        combos = grid_combos(_csv(args.grid_modes), _csv(args.grid_methods))
    else:
        combos = [(args.query_mode, args.method)]
    # validate every run before any work starts
    plans, problems = [], []
    for mode, method in combos:
        tc = _train_config(args, run_cfg, mode, method)
        problems += [f"{mode}:{method}: {p}" for p in tc.validate()]
        plans.append((mode, method, tc))
    if args.resume and args.grid:
        problems.append("--resume applies to a single run, not --grid")
    if args.resume and not Path(args.resume).is_file():
        problems.append(f"checkpoint to resume not found: {args.resume}")
    if problems:
        raise ConfigError("invalid training configuration:\n  " + "\n  ".join(problems))

    manifest = Manifest.read(manifest_path)
    valid = Manifest.read(valid_path) if valid_path else None
    enc = ToyJointEncoder(enc_cfg)
    index = {}
    for mode, method, tc in plans:
        run_id = f"{mode}-{method}"
        run_dir = out / run_id if args.grid else out
        xcfg = _extractor_config(args, run_cfg, tc, enc_cfg.dim)
        ckpt = train(manifest, run_dir, tc, xcfg, enc_cfg, valid, resume=args.resume, run_id=run_id, enc=enc)
        index[run_id] = str(ckpt)
        print(f"{run_id}: {ckpt}")
    if args.grid:
        (out / "grid.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
        if args.test_manifest:
            report = _evaluate_runs(list(index.items()), args, enc)
            print(f"report: {emit_report(report, out_path(args.report), args.format)}")
    return 0


def _checkpoint_list(args) -> list[tuple[str, str]]:
    items = []
    for path in args.checkpoint or []:
        items.append((Path(path).parent.name or Path(path).stem, path))
    if args.grid_index:
        index = json.loads(Path(args.grid_index).read_text(encoding="utf-8"))
        items += sorted(index.items(), key=lambda kv: list(index).index(kv[0]))
    return items


def _evaluate_runs(items, args, enc) -> EvalReport:
    missing = [p for _, p in items if not Path(p).is_file()]
    if missing:
        raise ConfigError("checkpoint(s) not found: " + ", ".join(missing))
    conditions = _csv(args.conditions)
    bad = [c for c in conditions if c not in CONDITIONS]
    if bad:
        raise ConfigError(f"unknown test condition(s) {bad}; choose from {CONDITIONS}")
    test = build_test_set(Manifest.read(args.test_manifest), args.n_mixtures, args.test_seed)
    runs = [LoadedRun(load_checkpoint(p), run_id) for run_id, p in items]
    report = EvalReport(metadata={"test_set_hash": test.content_hash, "test_seed": test.seed, "n_mixtures": len(test)})
    for run in runs:
        for cond in conditions:
            mode, _, style = cond.partition("-")
            report.add(evaluate(run, test, enc, mode, style or "template", test_name=cond))
    return report


def cmd_eval(args) -> int:
    items = _checkpoint_list(args)
    if not items:
        raise ConfigError("eval needs --checkpoint or --grid-index")
    missing = [p for _, p in items if not Path(p).is_file()]
    if missing:
        raise ConfigError("checkpoint(s) not found: " + ", ".join(missing))
    if args.encoder:
        enc_cfg = _load_encoder_config(args.encoder)
    else:
        enc_cfg = ToyJointEncoderConfig.from_dict(load_checkpoint(items[0][1])["encoder_config"])
    report = _evaluate_runs(items, args, ToyJointEncoder(enc_cfg))
    path = emit_report(report, out_path(args.report), args.format)
    print(f"report: {path}")
    return 0


def cmd_manipulate(args) -> int:
    records = read_embedding_cache(args.input)
    if not records:
        raise ConfigError(f"{args.input}: no embeddings")
    rng = np.random.default_rng(args.seed)
    mcfg = ManipulationConfig(method=args.method, dropout_rescale=not args.no_rescale)
    out = []
    if args.method in ("pca", "pca_inv"):
        proj = fit_pca([q for _, q in records], args.pca_dim)
        for cid, q in records:
            v = pca_project(q, proj)
            out.append((cid, v if args.method == "pca" else pca_inverse(v, proj, q.modality)))
    else:
        for cid, q in records:
            if args.method == "dropout":
                lo, hi = mcfg.dropout_range_text if q.modality == TEXT else mcfg.dropout_range_audio
                q = dropout_embed(q, float(rng.uniform(lo, hi)) if args.p is None else args.p, rng, mcfg.dropout_rescale)
            elif args.method == "gaussian_noise":
                lo, hi = mcfg.noise_range_text if q.modality == TEXT else mcfg.noise_range_audio
                q = gaussian_noise_embed(q, float(rng.uniform(lo, hi)) if args.alpha is None else args.alpha, rng)
            out.append((cid, q))
    target = out_path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_cache(target, out)
    print(f"{len(out)} embeddings -> {target}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gapbridge", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write synthetic manifests")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=50, help="train clips per class")
    s.add_argument("--eval-per-class", type=int, default=25, help="valid/test clips per class")
    s.add_argument("--splits", type=_csv, default=list(SPLITS))
    s.add_argument("--rate", type=int, default=8000)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_synth_data)

    g = sub.add_parser("gap", help="mean paired text/audio cosine; optionally calibrate the toy gap")
    g.add_argument("--manifest", required=True)
    g.add_argument("--encoder", help="toy encoder config JSON")
    g.add_argument("--calibrate", type=float, metavar="COSINE")
    g.add_argument("--write-encoder", default="encoder.json")
    g.add_argument("--limit", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--gap", dest="gap_value", type=float)
    g.add_argument("--text-noise", type=float)
    g.add_argument("--audio-noise", type=float)
    g.set_defaults(func=cmd_gap)

    t = sub.add_parser(
        "train",
        help="train one run or the ablation grid",
        description="With --grid, runs every valid (query mode, method) pair in turn. "
        "mixup and specaugment manipulate audio, so they are skipped for text-queried runs.",
    )
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--manifest")
    t.add_argument("--valid-manifest")
    t.add_argument("--encoder", help="toy encoder config JSON (from `gap --calibrate`)")
    t.add_argument("--out")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--query-mode", choices=QUERY_MODES, default=TEXT)
    t.add_argument("--method", choices=METHODS, default="none")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--grid", action="store_true")
    t.add_argument("--grid-modes", default=",".join(GRID_MODES))
    t.add_argument("--grid-methods", default=",".join(GRID_METHODS))
    _eval_flags(t, required=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints with clean queries")
    e.add_argument("--checkpoint", action="append")
    e.add_argument("--grid-index", help="grid.json written by `train --grid`")
    e.add_argument("--encoder", help="defaults to the encoder stored in the first checkpoint")
    _eval_flags(e, required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("manipulate", help="apply one manipulation to an embedding file")
    m.add_argument("--input", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--method", choices=("none", "dropout", "gaussian_noise", "pca", "pca_inv"), required=True)
    m.add_argument("--p", type=float, help="fixed dropout probability")
    m.add_argument("--no-rescale", action="store_true", help="do not scale dropout survivors by 1/(1-p)")
    m.add_argument("--alpha", type=float, help="fixed noise norm")
    m.add_argument("--pca-dim", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_manipulate)
    return p


def _eval_flags(p, required: bool) -> None:
    p.add_argument("--test-manifest", required=required)
    p.add_argument("--n-mixtures", type=int, default=200)
    p.add_argument("--test-seed", type=int, default=0)
    p.add_argument("--conditions", default="text-template", help=f"comma list from {CONDITIONS}")
    p.add_argument("--report", default="report.csv")
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (GapBridgeError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
