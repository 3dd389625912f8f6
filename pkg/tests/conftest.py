import numpy as np
import pytest

from opfguard.dataset import InputDomain, generate_dataset
from opfguard.grid import Generator, GridCase, Line, Load, load_case
from opfguard.mlp import MlpNetwork, TrainConfig, train


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case9_2load():
    return load_case("case9_2load")


@pytest.fixture(scope="session")
def domain():
    return InputDomain(0.6, 1.0)


@pytest.fixture(scope="session")
def ds9_small(case9, domain):
    return generate_dataset(case9, domain, 2000, seed=7)


@pytest.fixture(scope="session")
def ds9_10k(case9, domain):
    return generate_dataset(case9, domain, 10000, seed=0)


@pytest.fixture(scope="session")
def ds2_small(case9_2load, domain):
    return generate_dataset(case9_2load, domain, 2000, seed=11)


@pytest.fixture(scope="session")
def net9_3x10(case9, ds9_small):
    net, _ = train(ds9_small, case9, [10, 10, 10], TrainConfig(seed=3))
    return net


@pytest.fixture(scope="session")
def net2_3x10(case9_2load, ds2_small):
    net, _ = train(ds2_small, case9_2load, [10, 10, 10], TrainConfig(seed=5))
    return net


TOY_COST = 3.0
TOY_PMIN, TOY_PMAX = 10.0, 60.0


@pytest.fixture(scope="session")
def toy_case():
    """Two buses: a free slack unit at bus 0 and one priced unit next to the load at bus 1.

    The optimal dispatch keeps the priced unit at its minimum over the whole domain.
    """
    return GridCase(
        n_buses=2,
        lines=(Line(0, 1, 10.0, 1000.0),),
        gens=(Generator(0, 0.0, 200.0, 0.0), Generator(1, TOY_PMIN, TOY_PMAX, TOY_COST)),
        loads=(Load(1, 100.0),),
        slack_bus=0,
        name="toy2",
    )


def constant_net(n_inputs: int, outputs, hidden: int = 3) -> MlpNetwork:
    """Net whose output ignores its input (active hidden units with zero input weights)."""
    outputs = np.asarray(outputs, dtype=float)
    W0 = np.zeros((hidden, n_inputs))
    b0 = np.ones(hidden)
    W1 = np.zeros((len(outputs), hidden))
    W1[:, 0] = outputs
    return MlpNetwork.identity_scaled([n_inputs, hidden, len(outputs)], [W0, W1], [b0, np.zeros(len(outputs))],
                                      [np.ones_like(W0), np.ones_like(W1)])


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    _, results = _CRITERIA.setdefault(number, (title, []))
    if rep.when == "call" or rep.failed:
        results.append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        ok = bool(results) and all(r == "passed" for r in results)
        terminalreporter.write_line(f"criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'}")
