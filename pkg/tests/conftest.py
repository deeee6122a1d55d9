import numpy as np
import pytest

from influx.models import ModelSpec
from influx.synthetic import gaussian_blobs
from influx.training import TrainConfig, train


@pytest.fixture(scope="session")
def blobs():
    train_ds = gaussian_blobs(80, 4, 3, seed=3, sep=1.5)
    test_ds = gaussian_blobs(10, 4, 3, seed=4, sep=1.5)
    return train_ds, test_ds


@pytest.fixture(scope="session")
def sr_spec():
    return ModelSpec("softmax-regression", 4, 3, l2=1e-2)


@pytest.fixture(scope="session")
def sr_theta(blobs, sr_spec):
    return train(blobs[0], sr_spec, TrainConfig())


@pytest.fixture(scope="session")
def mlp_spec():
    return ModelSpec("mlp-1hidden", 4, 3, hidden=5, l2=1e-2)


@pytest.fixture(scope="session")
def mlp_theta(blobs, mlp_spec):
    return train(blobs[0], mlp_spec, TrainConfig(optimizer="lbfgs", max_iters=5000))


def random_spd(rng, p, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    ev = np.geomspace(1.0, cond, p)
    return (Q * ev) @ Q.T


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    state = {"detail": ""}
    yield state
    call = getattr(request.node, "rep_call", None)
    if call is None or call.skipped:
        status = "SKIP"
    else:
        status = "PASS" if call.passed else "FAIL"
    ACCEPTANCE_LINES.append(f"{status}  {state['name']}: {state['detail']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
