"""
Общие фикстуры: маленькие ядра, спецификации поля и потоки случайности
"""

import pytest

from she_core.parallel import parallel_settings
from she_core.random_field import FieldSpec, make_kernels
from she_core.rng import RandomStreams


@pytest.fixture(scope='session')
def kernel():
    return make_kernels()


@pytest.fixture(scope='session')
def small_spec(kernel):
    """Бокс 4, решётка 16³"""
    return FieldSpec(kernel, box=4.0, h_x=0.25, h_t=0.25)


@pytest.fixture(scope='session')
def medium_spec(kernel):
    """Бокс 8, решётка 32³: для задач, где важно заворачивание"""
    return FieldSpec(kernel, box=8.0, h_x=0.25, h_t=0.25)


@pytest.fixture(scope='session')
def white_spec(kernel):
    return FieldSpec(kernel, box=4.0, h_x=0.25, h_t=0.25, white_in_time=True)


@pytest.fixture
def streams():
    return RandomStreams(20240601)


@pytest.fixture(autouse=True)
def serial_execution():
    parallel_settings.configure(1, parallel_settings.DEFAULT_BLOCK_SIZE)
    yield
    parallel_settings.configure(1, parallel_settings.DEFAULT_BLOCK_SIZE)


@pytest.fixture
def small_field(small_spec):
    return small_spec.sample((-2.0, 2.0), 7)
