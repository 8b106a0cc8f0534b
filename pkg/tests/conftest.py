import numpy as np
import pytest

from mixatlas.kernels import Geometry, KernelConfig
from mixatlas.params import ComponentParams, Hyperparams, ModelParams


@pytest.fixture(scope="session")
def small_geometry():
    # 4x4 pixels, 2x2 photometric and 2x2 geometric landmarks
    return Geometry.regular(4, 4, (2, 2), (2, 2), KernelConfig(sigma_p=0.8, sigma_g=0.6))


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + 0.5 * np.eye(d))


def random_eta(rng, geometry, tau_m=2, sigma2=0.1, gamma_scale=0.05):
    comps = []
    for _ in range(tau_m):
        comps.append(ComponentParams(rng.normal(size=geometry.k_p), sigma2,
                                     random_spd(rng, 2 * geometry.k_g, gamma_scale)))
    rho = rng.dirichlet(np.full(tau_m, 3.0))
    return ModelParams(comps, rho / rho.sum())


def hyper_for(geometry, tau_m=2, **kw):
    return Hyperparams.from_geometry(geometry, tau_m, **kw)


def synthetic_setup(shapes=("ring", "cross"), sigma2=0.05, deformation_scale=0.02):
    """8x8 geometry and a well-separated two-template truth."""
    from mixatlas.data import shape_template
    geometry = Geometry.regular(8, 8, (6, 6), (2, 2), KernelConfig(sigma_p=0.4, sigma_g=0.6))
    gamma = Hyperparams.from_geometry(geometry, len(shapes),
                                      sigma_g_scale=deformation_scale).sigma_g_mat
    comps = [ComponentParams(shape_template(s, geometry), sigma2, gamma.copy()) for s in shapes]
    rho = np.full(len(shapes), 1.0 / len(shapes))
    return geometry, ModelParams(comps, rho)
