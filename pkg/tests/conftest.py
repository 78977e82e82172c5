import numpy as np
import pytest

from univip.profiles import DESK
from univip.synth import load_manifest, write_dataset
from univip.train import TrainConfig, dataset_proposals, load_images


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight desk scenes with cached proposals: (manifest, images, proposals)."""
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root, 8, 3, "desk")
    man = load_manifest(root)
    images, _, _ = load_images(man)
    return man, images, dataset_proposals(man, images, DESK)


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    man = tiny_dataset[0]
    return TrainConfig(manifest=man.root, channels="8,16", proj_hidden=16, proj_dim=8,
                       pred_hidden=16, K=2, epochs=2, batch_size=4, out_dir=str(tmp_path / "run"))


def rng(seed=0):
    return np.random.default_rng(seed)


_ACCEPTANCE = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for the acceptance summary and echo it immediately."""

    def _report(number, title, passed, detail):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
        _ACCEPTANCE.append((number, line))
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
