import numpy as np
import pytest

from secost import core, data
from secost import model as wels

TINY_SYNTH = dict(n_classes=4, n_train=24, n_val=12, n_eval=12, clip_seconds=1.6, seed=5)
TINY_MODEL = wels.WelsConfig(n_classes=4, width_multiplier=1 / 32)
TINY_TRAIN = core.TrainConfig(epochs=2, batch_size=8, frames=128, eval_batch_size=16, patience=5)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    data.synth_corpus(data.SynthConfig(**TINY_SYNTH), out)
    return out


@pytest.fixture(scope="session")
def tiny_sets(tiny_corpus):
    return {s: data.load_dataset(tiny_corpus / f"{s}.jsonl", 4) for s in ("train", "val", "eval")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
