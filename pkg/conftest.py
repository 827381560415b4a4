import numpy as np
import pytest
import torch

from sslseg import core, models, synth
from sslseg.unet_torch import UNetConfig


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: mark test as slow to run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        # --runslow given in cli: do not skip slow tests
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def tiny_config():
    return UNetConfig(depth=2, base_channels=4, num_classes=2, global_embed_dim=8,
                      local_embed_dim=8, global_hidden_dim=8)


@pytest.fixture()
def tiny_net(tiny_config):
    return models.build_model(tiny_config, rng_seed=0)


@pytest.fixture()
def tiny_phantom():
    return synth.PhantomConfig(size=32, n_slices=2, seed=0)


@pytest.fixture()
def tiny_volumes(tiny_phantom):
    return synth.generate_phantom_dataset(tiny_phantom, 4)


@pytest.fixture()
def float64():
    """ run a test in double precision, restoring the previous default after """
    previous = core.set_precision("float64")
    yield
    torch.set_default_dtype(previous)


def relative_gradient_error(fn, inputs, h=1e-5):
    """Central finite differences of a scalar fn against autograd.

    Returns the max absolute error over all input entries divided by the
    largest numeric gradient entry.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs)
    max_err, max_grad = 0., 0.
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn(*inputs).item()
                flat[i] = orig - h
                fm = fn(*inputs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                max_err = max(max_err, abs(numeric - g.view(-1)[i].item()))
                max_grad = max(max_grad, abs(numeric))
    return max_err / max(max_grad, 1e-12)


@pytest.fixture()
def grad_error():
    return relative_gradient_error


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
