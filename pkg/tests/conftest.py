import numpy as np
import pytest

from sirad.config import Config
from sirad.nn import TINY_WIDTHS, SirModel
from sirad.synth import SynthSpec, synth_benchmark

# lines appended by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model(loops=2, channels=2, widths=TINY_WIDTHS, seed=0):
    s = np.random.SeedSequence(seed).spawn(2)
    return SirModel.create(
        channels, widths, loops=loops,
        teacher_rng=np.random.default_rng(s[0]), student_rng=np.random.default_rng(s[1]),
    )


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    """A 32x32, 3-domain benchmark with few images; fast to train on."""
    root = tmp_path_factory.mktemp("bench")
    spec = SynthSpec(train_normals=4, test_normals=4, test_anoms=4, size=32, seed=3)
    synth_benchmark(spec, root)
    return root


def small_config(bench, out, **kw) -> Config:
    base = dict(
        image_size=32,
        widths=(4, 6, 8, 8),
        iterations=12,
        batch_size=4,
        learning_rate=1e-3,
        loss_log_every=3,
        manifests=[str(bench / "benchmark.json")],
        output_dir=str(out),
    )
    base.update(kw)
    return Config(**base)
