import os

import numpy as np
import pytest

from mpep import config as cfgmod
from mpep.dynamics import ivdp
from mpep.montecarlo import SdeParams, run_ensemble
from mpep.pipeline import Pipeline

# epsilon values whose OM minimizers the suite inspects
OM_EPS = [0.1024, 0.047595, 0.003, 0.0022753]
MC_N = 50_000
JOBS = os.cpu_count() or 1

_ACCEPTANCE: list[str] = []


def record(line: str) -> None:
    """Keep one acceptance line for the terminal summary and echo it."""
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def field():
    return ivdp(0.5)


@pytest.fixture(scope="session")
def pipe(tmp_path_factory):
    """Deterministic IVDP pipeline, run once for the whole session."""
    cfg = cfgmod.build({
        "output": str(tmp_path_factory.mktemp("ivdp")),
        "action": {"epsilon": OM_EPS,
                   "epsilon_scan": {"lo": 5e-4, "hi": 0.1024, "n": 16}},
        "montecarlo": None,
        "jobs": JOBS,
    })
    p = Pipeline(cfg)
    p.run()
    return p


@pytest.fixture(scope="session")
def problem(pipe):
    return pipe.problem()


@pytest.fixture(scope="session")
def orbit(pipe):
    return pipe.get("orbit").objects["orbit"]


@pytest.fixture(scope="session")
def manifold(problem):
    return problem.manifold


@pytest.fixture(scope="session")
def mesh(pipe):
    return pipe.get("manifold").objects["mesh"]


@pytest.fixture(scope="session")
def hets(pipe):
    return pipe.get("heteroclinics").objects["hets"]


@pytest.fixture(scope="session")
def river(pipe):
    return pipe.get("river").objects["river"]


@pytest.fixture(scope="session")
def pivot(pipe):
    return pipe.get("pivot").objects["pivot"]


@pytest.fixture(scope="session")
def profile(pipe):
    return pipe.get("action").objects["profile"]


@pytest.fixture(scope="session")
def selections(pipe):
    return {s["eps"]: s for s in pipe.get("action").payload["selections"]}


@pytest.fixture(scope="session")
def ensembles(orbit):
    """Lazily computed Monte-Carlo ensembles keyed by (sqrt_eps, n, pid0)."""
    cache = {}

    def get(sqrt_eps: float, n: int = MC_N, pid0: int = 0):
        key = (sqrt_eps, n, pid0)
        if key not in cache:
            cache[key] = run_ensemble(SdeParams.from_sqrt_eps(sqrt_eps), n, orbit=orbit,
                                      pid0=pid0, jobs=JOBS)
        return cache[key]
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
