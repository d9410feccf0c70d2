import jax
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import gpot  # noqa: F401  (enables 64-bit floats)
from gpot.divfree import VelocityField, init_unet

settings.register_profile(
    "gpot",
    max_examples=15,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("gpot")


def random_field(dim, hidden=(8, 8), seed=0, scale=1.0, boundary="cube"):
    return VelocityField(init_unet(dim, hidden, seed=seed, final_scale=scale), boundary)


def interior_points(rng, n, dim, margin=0.05):
    return rng.uniform(-1 + margin, 1 - margin, size=(n, dim))


@jax.jit
def _eval_batch(fld, x, t):
    return jax.vmap(lambda p: fld(p, t))(x)


def eval_field(fld, x, t=0.3):
    return np.asarray(_eval_batch(fld, jax.numpy.asarray(x), t))


def fd_divergence(fld, x, t=0.3, h=1e-5):
    """Central-difference divergence of ``fld`` at each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    eye = np.eye(d) * h
    plus = eval_field(fld, (x[:, None, :] + eye).reshape(-1, d), t).reshape(n, d, d)
    minus = eval_field(fld, (x[:, None, :] - eye).reshape(-1, d), t).reshape(n, d, d)
    return np.einsum("nii->n", plus - minus) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True, scope="session")
def _x64():
    assert jax.config.jax_enable_x64


@pytest.fixture(scope="session")
def trained_gp():
    """A GP flow after a short forward fit on eight Gaussians with a frozen synthetic base."""
    from gpot import baseflow, graddesk, toydata

    data = toydata.sample(toydata.DatasetSpec("eight_gaussians", 3000, 7))
    base = baseflow.synthetic_flow(2, n_layers=3, seed=3)
    cfg = graddesk.FitConfig(epochs=40, buffer_size=1000, batch_size=500, monitor_size=200, monitor_every=40, lr=1e-2)
    fit = graddesk.fit_gp_forward(base, data, cfg)
    return fit.gp
