import pytest

from coupled_ssm.verify import model_gradient_errors, op_gradient_errors


@pytest.fixture(scope="session")
def op_grad_errors():
    return op_gradient_errors(seed=0)


@pytest.fixture(scope="session")
def model_grad_errors():
    return model_gradient_errors(seed=0)
