import numpy as np
import pytest
import torch

from clippatch.core import LabeledImage, as_image
from clippatch.encoders import LabelVocabulary, make_palette_encoder, make_toy_encoder
from clippatch.synthetic import DEFAULT_LABELS, palette_image


def palette_set(labels, per_class, size=80, seed=0, prefix=""):
    rng = np.random.default_rng(seed)
    return [LabeledImage(as_image(palette_image(lab, size, rng)), i, f"{prefix}{lab}/{k}")
            for i, lab in enumerate(labels) for k in range(per_class)]


@pytest.fixture(scope="session")
def vocab():
    return LabelVocabulary(DEFAULT_LABELS)


@pytest.fixture(scope="session")
def palette_encoder():
    return make_palette_encoder()


@pytest.fixture(scope="session")
def toy_encoder():
    return make_toy_encoder(16, seed=0, side=12)


@pytest.fixture
def rand_image():
    def make(h, w, seed=0, dtype=torch.float64):
        g = torch.Generator().manual_seed(seed)
        return torch.rand(h, w, 3, generator=g, dtype=dtype)
    return make


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and rep.when in ("call", "setup"):
                name = nodeid.split("::test_criterion_")[1]
                num, _, title = name.partition("_")
                lines.append((int(num), f"criterion {num} {title.replace('_', ' ')}: {outcome.upper()}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
