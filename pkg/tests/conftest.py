import os

import numpy as np
import pytest

from phe import Owner, PheParams, keygen, make_backend
from protocol import SessionConfig, make_party


def acceptance_seeds(default: int) -> int:
    return int(os.environ.get("CHEETAH_ACCEPTANCE_SEEDS", default))


@pytest.fixture(scope="session")
def small_params():
    return PheParams.generate(n=64)


@pytest.fixture(scope="session")
def small_fp(small_params):
    return small_params.fp(10, 16.0)


@pytest.fixture(params=["clear", "rlwe"])
def backend_kind(request):
    return request.param


@pytest.fixture
def backend(backend_kind, small_params):
    return make_backend(backend_kind, small_params, seed=3)


@pytest.fixture
def client_key(small_params):
    return keygen(small_params, Owner.CLIENT, 11)


@pytest.fixture
def server_key(small_params):
    return keygen(small_params, Owner.SERVER, 12)


@pytest.fixture(scope="session")
def clear_config():
    return SessionConfig.build(n=1024, backend="clear")


@pytest.fixture(scope="session")
def rlwe_config():
    return SessionConfig.build(n=256, backend="rlwe")


@pytest.fixture
def clear_pair(clear_config):
    """(client party, server party) on the clear backend."""
    return (make_party(Owner.CLIENT, clear_config, seed=21),
            make_party(Owner.SERVER, clear_config, seed=22))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
