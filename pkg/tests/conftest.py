import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ppgdistill.datapipe import SynthCorpus, split_participants, synth_corpus, window  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """12 synthetic participants x 40 s -> (train, test) windows of fold 0."""
    recs = synth_corpus(SynthCorpus(participants=12, duration_s=40.0, noise_level=0.3, seed=7))
    samples = [s for r in recs for s in window(r)]
    plan = split_participants([r.participant_id for r in recs], 0.8, 0, 0)
    return plan.select(samples)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
