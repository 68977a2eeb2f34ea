import math

import numpy as np
import pytest

from relocpdr.core import RelocObservation, StepEvent
from relocpdr.fusion import FusionConfig, FusionGraph
from relocpdr.simulator import ScenarioConfig, load_scenario, simulate


def make_step(k, length=1.0, heading=0.0, t=None):
    return StepEvent(k, float(k if t is None else t), float(length), float(heading), 11.0, 9.0)


def straight_config(length=70.0, **kw):
    kw.setdefault("step_mean", 0.7)
    return ScenarioConfig(waypoints=((0.0, 0.0), (length, 0.0)), **kw)


def random_graph(seed, n_max=200, outlier_rate=0.1):
    """Prior-anchored chain with noisy steps, fixes on ~30% of nodes, some of them outliers.

    Returns the empty graph and the events ("step" | "reloc", payload) to feed it.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, n_max + 1))
    g = FusionGraph(FusionConfig(), start=(0.0, 0.0))
    g.add_prior(0, (0.0, 0.0), shift=False)
    heading = 0.0
    events = []
    truth = np.zeros(2)
    for k in range(1, n + 1):
        heading += rng.normal(0, 0.2)
        length = rng.uniform(0.4, 0.9)
        truth = truth + length * np.array([math.cos(heading), math.sin(heading)])
        events.append(("step", make_step(k, length + rng.normal(0, 0.05), heading + rng.normal(0, 0.05))))
        if rng.random() < 0.3:
            z = truth + rng.normal(0, 0.3, 2)
            if rng.random() < outlier_rate:
                z = z + rng.uniform(10, 50) * np.array([1.0, 0.0])
            events.append(("reloc", RelocObservation.gated(k, tuple(z), int(rng.integers(26, 200)))))
    return g, events


# acceptance results, printed once at the end of the session
ACCEPTANCE = {}
CRITERIA = [f"A{i}" for i in range(1, 11)]


def record(name, passed, detail=""):
    ACCEPTANCE[name] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in CRITERIA:
        if name in ACCEPTANCE:
            ok, detail = ACCEPTANCE[name]
            tr.write_line(f"{name} {'PASS' if ok else 'FAIL'} {detail}")
        else:
            tr.write_line(f"{name} FAIL not evaluated (error or deselected)")


@pytest.fixture(scope="session")
def corridor_cfg():
    return load_scenario("corridor")


@pytest.fixture(scope="session")
def corridor_sim(corridor_cfg):
    return simulate(corridor_cfg, 1)


@pytest.fixture(scope="session")
def small_sim():
    """A short L-shaped walk with a dense map; cheap enough for many tests."""
    cfg = ScenarioConfig(
        waypoints=((0.0, 0.0), (20.0, 0.0), (20.0, 10.0)),
        name="small",
        frames_per_m=0.5,
        seed=11,
    )
    return simulate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
