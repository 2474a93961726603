import numpy as np
import pytest
import torch

from blto.data import make_synthetic_set
from blto.models import init_encoder


@pytest.fixture(scope="session")
def synth_small():
    return make_synthetic_set(num_classes=4, per_class=50, image_size=32, seed=7)


@pytest.fixture()
def tiny_stack():
    return init_encoder("tiny-conv", 16, seed=3)


@pytest.fixture()
def micro_stack_double():
    """Sub-1e3-parameter stack in float64 for finite-difference checks."""
    stack = init_encoder("tiny-conv", 4, seed=5).double()
    return stack


def central_difference_grad(fn, params: list[torch.Tensor], eps: float = 1e-5):
    """Central finite differences of a scalar fn over the given tensors.

    ``fn`` must be a pure function of the current parameter values.
    """
    grads = []
    with torch.no_grad():
        for param in params:
            grad = torch.zeros_like(param)
            flat = param.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn()
                flat[i] = orig - eps
                minus = fn()
                flat[i] = orig
                grad.view(-1)[i] = (plus - minus) / (2 * eps)
            grads.append(grad)
    return grads


def relative_grad_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    num = sum(float((a - n).norm() ** 2) for a, n in zip(analytic, numeric)) ** 0.5
    den = max(sum(float(n.norm() ** 2) for n in numeric) ** 0.5, 1e-12)
    return num / den


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
