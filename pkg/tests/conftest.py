import pytest

from gapbridge.datagen import Manifest, build_synth_manifest
from gapbridge.embeddings import ToyJointEncoder, ToyJointEncoderConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """8-class corpus: 6 train clips and 3 test clips per class."""
    root = tmp_path_factory.mktemp("corpus")
    build_synth_manifest(8, 6, 0, root)
    build_synth_manifest(8, 3, 0, root, split="valid")
    build_synth_manifest(8, 3, 0, root, split="test")
    return root


@pytest.fixture(scope="session")
def train_manifest(small_corpus):
    return Manifest.read(small_corpus / "train.jsonl")


@pytest.fixture(scope="session")
def test_manifest(small_corpus):
    return Manifest.read(small_corpus / "test.jsonl")


@pytest.fixture(scope="session")
def clean_encoder():
    return ToyJointEncoder(ToyJointEncoderConfig(gap=0.0, text_noise=0.0, audio_noise=0.0))


@pytest.fixture(scope="session")
def toy_encoder():
    return ToyJointEncoder(ToyJointEncoderConfig(gap=2.0))


@pytest.fixture(scope="session")
def acceptance_lines(request):
    lines = getattr(request.config, "_acceptance_lines", None)
    if lines is None:
        lines = request.config._acceptance_lines = []
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
