import pytest
import structlog

from factory import POLICY_PREFER_DISTINCT, Factory
from math_core import gen_params
from scenario import ScenarioConfig
from simulator import Actor, Simulation

ROOT_KEY = b"\x07" * 32


# main.configure_logging binds the current sys.stderr, which under pytest is a
# per-test capture stream; restore defaults so later tests don't log to a closed file
@pytest.fixture(autouse=True)
def _reset_structlog():
    yield
    structlog.reset_defaults()


@pytest.fixture(scope="session")
def params4():
    return gen_params(64, 4, b"fixture-params")


@pytest.fixture(scope="session")
def params2():
    return gen_params(64, 2, b"fixture-params")


# Small scenario so full protocol runs stay fast
@pytest.fixture
def config():
    return ScenarioConfig(dim=4, seed="0badc0de")


class StubActor(Actor):
    def __init__(self, sim, actor_id, role, subnet):
        self.role = role
        super().__init__(sim, subnet=subnet, actor_id=actor_id)


def stub_install(sim):
    return lambda actor_id, role, subnet: StubActor(sim, actor_id, role, subnet)


@pytest.fixture
def spawned():
    sim = Simulation(b"spawn-seed")
    factory = Factory(sim, ["subnet-a", "subnet-b", "subnet-c", "subnet-d", "subnet-e", "subnet-f"], ROOT_KEY)
    proof = factory.spawn("dep-0001", 2, POLICY_PREFER_DISTINCT, 200, b"\x11" * 32, b"\x22" * 32,
                          "refund-0001", stub_install(sim))
    return sim, factory, proof
