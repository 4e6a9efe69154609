"""Semiclassical toolkit for a damped, unbalanced two-mode spin-cavity model.

The package covers the reduced spin equations obtained after adiabatic
elimination of the cavity, their equilibria and local bifurcations, the
geometry of rotating periodic states, symbolic dynamics of the saddle's
unstable manifold, and boundary-value continuation of periodic orbits and
connecting orbits.
"""

from lmglab.model import ModelParams, ReducedParams, derive_params

__all__ = ["ModelParams", "ReducedParams", "derive_params"]
__version__ = "0.1.0"
