import warnings

import pytest

from muscall.synthetic import SyntheticSpec, generate_synthetic

# small enough that a training epoch takes well under a second
TINY = dict(batch_size=8, max_epochs=2, crop_seconds=1.0, n_mels=32, stem_channels=[2, 2, 4],
            stage_widths=[4, 8], attn_heads=2, text_depth=1, text_width=8, text_heads=2,
            bpe_vocab_size=300, embed_dim=8, ssl_hidden=8, ssl_dim=8, precision="float64")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic(SyntheticSpec(n_pairs=40, duration_s=1.5, split_fractions=(0.6, 0.2, 0.2)), out)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
