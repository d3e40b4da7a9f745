import csv
import io
import math

import numpy as np
import pytest

from gapbridge.embeddings import AUDIO, TEXT, ToyJointEncoder, ToyJointEncoderConfig
from gapbridge.errors import ConfigError, InvalidInputError
from gapbridge.evalharness import (
    CSV_HEADER,
    EvalCell,
    EvalReport,
    LoadedRun,
    build_test_set,
    emit_report,
    eval_caption,
    evaluate,
    read_report_csv,
    reference_cell,
    report_markdown,
    summarize,
)
from gapbridge.extractor import ExtractorConfig, build_model, save_checkpoint


@pytest.fixture(scope="module")
def test_set(test_manifest):
    return build_test_set(test_manifest, 12, seed=0)


class TestTestSet:
    def test_frozen(self, test_manifest, test_set):
        again = build_test_set(test_manifest, 12, seed=0)
        assert again.content_hash == test_set.content_hash
        assert build_test_set(test_manifest, 12, seed=1).content_hash != test_set.content_hash

    def test_distinct_classes_and_snr(self, test_set):
        for m in test_set.mixtures:
            assert -5 <= m.snr_db <= 5
            np.testing.assert_array_equal(m.target.samples + m.nontarget.samples, m.mixture.samples)

    def test_bad_sizes(self, test_manifest):
        with pytest.raises(InvalidInputError):
            build_test_set(test_manifest, 0, seed=0)


class TestReferences:
    def test_oracle_is_cap(self, test_set):
        cell = reference_cell(test_set, "oracle")
        assert cell.mean == 60.0 and cell.stderr == 0.0 and cell.n == len(test_set)

    def test_mixture_baseline_near_snr(self, test_set):
        # for uncorrelated sources, SI-SDR of the mixture is close to the mixing SNR
        cell = reference_cell(test_set, "mixture")
        mean_snr = np.mean([m.snr_db for m in test_set.mixtures])
        assert abs(cell.mean - mean_snr) < 1.0

    def test_unknown_kind(self, test_set):
        with pytest.raises(InvalidInputError):
            reference_cell(test_set, "magic")


def test_summarize_matches_hand_values():
    mean, stderr = summarize([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    assert stderr == pytest.approx(math.sqrt(5 / 3) / 2, rel=1e-12)
    assert summarize([7.0]) == (7.0, 0.0)


def test_eval_caption_styles(test_set):
    m = test_set.mixtures[0]
    assert eval_caption(m, "template", 0) == f"this is the sound of {m.class_label}"
    assert m.class_label in eval_caption(m, "natural", 3).split()
    with pytest.raises(InvalidInputError):
        eval_caption(m, "poetic", 0)


@pytest.fixture(scope="module")
def run(tmp_path_factory, toy_encoder):
    path = tmp_path_factory.mktemp("run") / "final.ckpt"
    save_checkpoint(
        path, build_model(ExtractorConfig(num_layers=1), 0), step=0, run_id="r0",
        train_config={"query_mode": AUDIO}, manipulation_config={"method": "dropout"},
        encoder_config=toy_encoder.cfg.to_dict(), projector=None,
    )
    from gapbridge.extractor import load_checkpoint

    return LoadedRun(load_checkpoint(path))


class TestEvaluate:
    def test_cell_fields(self, run, test_set, toy_encoder):
        cell = evaluate(run, test_set, toy_encoder, TEXT, "natural")
        assert (cell.run_id, cell.query_mode, cell.method, cell.test_set) == ("r0", AUDIO, "dropout", "text-natural")
        assert cell.n == len(test_set) == len(cell.values)
        assert np.isfinite(cell.mean)

    def test_batching_does_not_change_scores(self, run, test_set, toy_encoder):
        a = evaluate(run, test_set, toy_encoder, AUDIO, batch_size=5)
        b = evaluate(run, test_set, toy_encoder, AUDIO, batch_size=50)
        np.testing.assert_allclose(a.values, b.values, atol=1e-4)

    def test_dim_mismatch(self, run, test_set):
        with pytest.raises(ConfigError):
            evaluate(run, test_set, ToyJointEncoder(ToyJointEncoderConfig(dim=32)))

    def test_bad_mode(self, run, test_set, toy_encoder):
        with pytest.raises(InvalidInputError):
            evaluate(run, test_set, toy_encoder, "both")


def _report():
    r = EvalReport(metadata={"seed": 0})
    r.add(EvalCell("a", TEXT, "none", "text-template", 10.5, 0.25, 200))
    r.add(EvalCell("a", TEXT, "none", "audio", 9.0, 0.5, 200))
    r.add(EvalCell("b", AUDIO, "dropout", "text-template", 11.125, 0.125, 200))
    return r


class TestReports:
    def test_csv_round_trip(self, tmp_path):
        path = emit_report(_report(), tmp_path / "r.csv")
        rows = list(csv.reader(io.StringIO(path.read_text())))
        assert tuple(rows[0]) == CSV_HEADER and len(rows) == 4
        back = read_report_csv(path)
        assert [(c.run_id, c.test_set, c.mean, c.stderr, c.n) for c in back.cells] == [
            (c.run_id, c.test_set, c.mean, c.stderr, c.n) for c in _report().cells
        ]

    def test_markdown_pivot(self):
        md = report_markdown(_report())
        lines = [l for l in md.splitlines() if l.startswith("|")]
        assert len(lines) == 2 + 2  # header, rule, one row per run
        assert "text-template" in lines[0] and "audio" in lines[0]

    def test_empty_refused(self, tmp_path):
        with pytest.raises(InvalidInputError):
            emit_report(EvalReport(), tmp_path / "e.csv")
        assert not (tmp_path / "e.csv").exists()

    def test_bad_format(self, tmp_path):
        with pytest.raises(InvalidInputError):
            emit_report(_report(), tmp_path / "x", fmt="xlsx")

    def test_bad_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("a,b\n1,2\n")
        with pytest.raises(InvalidInputError):
            read_report_csv(tmp_path / "h.csv")
