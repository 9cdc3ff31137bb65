import pytest

import qfexp as q


@pytest.fixture(scope="session")
def grid32():
    return q.make_grid(1.0, 32)


@pytest.fixture(scope="session")
def ens_small(grid32):
    return q.simulate_brownian(grid32, 1, 4096, seed=101)


@pytest.fixture(scope="session")
def ens_mid(grid32):
    return q.simulate_brownian(grid32, 1, 2**14, seed=202)


@pytest.fixture(scope="session")
def poly3():
    return q.polynomial_basis(3)


@pytest.fixture(scope="session")
def pw30():
    return q.piecewise_basis(30)


@pytest.fixture(scope="session")
def entropic_op(ens_mid, pw30):
    return q.GExpectation(generator=q.entropic_generator(1.0), ensemble=ens_mid,
                          basis=pw30, name="entropic")


@pytest.fixture(scope="session")
def linear_op(ens_mid, poly3):
    return q.LinearExpectation(ens_mid, poly3)
