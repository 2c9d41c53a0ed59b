"""Grid-domain laboratory for Laplace eigenfunctions and Brownian paths.

Five pieces: grid domains with labeled walls (`geometry`), sparse Laplacian
eigensolves and heat semigroups on them (`spectral`), the ball first-exit
function and its bounds (`theta`), killed/reflected path simulation
(`brownian`), and the inequality battery tying them together (`verify`),
plus a command line front end (`cli`).
"""

from eigenwalk.geometry import (
    DomainError,
    DomainSpec,
    GridDomain,
    build_domain,
    diameter,
    extract_level_set,
    set_distance,
)
from eigenwalk.spectral import (
    SpectralError,
    SpectralResult,
    assemble_laplacian,
    heat_semigroup,
    solve_eigs,
    survival_profile,
    zeta_bound,
)
from eigenwalk.theta import ThetaValue, bessel_zeros, theta, theta_inverse

__all__ = [
    "DomainError",
    "DomainSpec",
    "GridDomain",
    "SpectralError",
    "SpectralResult",
    "ThetaValue",
    "assemble_laplacian",
    "bessel_zeros",
    "build_domain",
    "diameter",
    "extract_level_set",
    "heat_semigroup",
    "set_distance",
    "solve_eigs",
    "survival_profile",
    "theta",
    "theta_inverse",
    "zeta_bound",
]

__version__ = "0.1.0"
