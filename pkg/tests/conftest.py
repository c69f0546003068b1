import numpy as np
import pytest
from hypothesis import settings

from abbnn import bitcore, checkpoint, kernels
from abbnn.data import make_synthetic
from abbnn.exporter import fold
from abbnn.graphspec import load_spec
from abbnn.trainer import TrainConfig, run_two_step

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# Lines appended by test_acceptance.py; echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(kernels.IMPLEMENTATIONS))
def backend(request, monkeypatch):
    """Run a test once per kernel backend by rebinding the public kernel names."""
    impl = kernels.IMPLEMENTATIONS[request.param]
    for name, fn in impl.items():
        monkeypatch.setattr(kernels, name, fn)
    monkeypatch.setattr(bitcore, "popcount64", impl["popcount64"])
    return request.param


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic(n_train=600, n_test=200)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, small_data):
    """A quickly trained toy2block network: (state, history, workdir)."""
    work = tmp_path_factory.mktemp("trained")
    spec = load_spec("toy2block")
    state, history = run_two_step(
        spec, small_data, TrainConfig(phase="step1", epochs=3), TrainConfig(phase="step2", epochs=3), work
    )
    return state, history, work


@pytest.fixture(scope="session")
def trained_state(trained):
    return trained[0]


@pytest.fixture(scope="session")
def folded(trained_state):
    return fold(trained_state)


@pytest.fixture
def fresh_state(trained):
    """A private copy of the trained state that tests may mutate."""
    return checkpoint.load(trained[2] / "step2.abck")


def perturbed_step2_state(spec, seed=0):
    """Initialized state with random non-trivial offsets, marked as step2-trained."""
    from abbnn.nfgraph import init_state

    state = init_state(spec, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in state.params.items():
        if name.endswith((".xi", ".xi1", ".xi2")):
            p += 0.3 * rng.normal(size=p.shape)
        elif name.endswith(".a"):
            p += rng.normal(size=p.shape)
    state.phase = "step2"
    return state
