import numpy as np
import pytest

from affectfusion.data import SynthConfig, generate_synthetic
from affectfusion.models import FeatureBundle
from affectfusion.training import Split

TINY_DIMS = dict(visual_dim=6, audio_dim=5, seq_len=4, lstm_hidden=3, branch_hidden=4,
                 decision_hidden=8)


def random_split(n, seed, target="valence", seq_len=4, visual_dim=6, audio_dim=5):
    """Bundles whose labels depend smoothly on the inputs, for fast training tests."""
    rng = np.random.default_rng(seed)
    bundles, labels = [], []
    for _ in range(n):
        text = rng.normal(size=10)
        audio = rng.normal(size=audio_dim)
        y = np.tanh(text[0] + 0.5 * audio[0])
        if target == "arousal":
            y = (y + 1) / 2
        bundles.append(FeatureBundle(visual=rng.normal(size=(seq_len, visual_dim)), audio=audio,
                                     audio_frames=rng.normal(size=(seq_len, audio_dim)),
                                     text=text))
        labels.append(y)
    return Split(bundles, np.array(labels))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(n_train=40, n_val=16, n_test=12, min_frames=3, max_frames=12)
    return generate_synthetic(cfg, out)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
