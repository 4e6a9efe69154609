"""Parameters, state charts, vector fields, and symmetries.

The model is a collective spin (b_x, b_y, gamma) coupled to a single
cavity mode alpha with co- and counter-rotating couplings lambda_minus,
lambda_plus, cavity loss kappa, detunings omega (cavity) and omega0
(spin), and incoherent per-spin rates gamma_down, gamma_up.  When the
cavity relaxes much faster than the spin it can be eliminated; the spin
then obeys a closed cubic vector field whose coefficients are the
reduced parameters below.

Charts:
  * spin chart: (b_x, b_y, gamma), the workhorse;
  * spherical chart: (r, theta, phi) with b_x = r sin(theta) cos(phi),
    b_y = r sin(theta) sin(phi), gamma = r cos(theta); only valid in the
    strongly dissipative limit xi = 0, where phi decouples;
  * cavity chart: (Re alpha, Im alpha, b_x, b_y, gamma), the full
    five-dimensional flow before elimination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChartError",
    "ModelParams",
    "ReducedParams",
    "derive_params",
    "lmg_rhs",
    "lmg_vector_field",
    "lmg_jacobian",
    "spherical_rhs",
    "spherical_vector_field",
    "dicke_rhs",
    "dicke_vector_field",
    "slave_field",
    "photon_number",
    "parity",
    "u1_rotate",
    "to_spherical",
    "from_spherical",
    "spin_energy",
    "params_to_text",
    "params_from_text",
]


class ChartError(ValueError):
    """Raised when a chart is used outside its domain of validity."""


@dataclass(frozen=True)
class ModelParams:
    """Bare model parameters.

    Rates are non-negative; the cavity response kappa + i*omega must not
    vanish or the elimination is undefined.
    """

    omega: float
    omega0: float
    kappa: float
    lambda_minus: float
    lambda_plus: float
    gamma_down: float = 0.0
    gamma_up: float = 0.0

    def __post_init__(self):
        if self.kappa ** 2 + self.omega ** 2 <= 0.0:
            raise ValueError("cavity response kappa + i*omega must be nonzero")
        if self.gamma_down < 0.0 or self.gamma_up < 0.0:
            raise ValueError("incoherent rates must be non-negative")


@dataclass(frozen=True)
class ReducedParams:
    """Coefficients of the eliminated-cavity spin equations.

    xi and eta are the reactive and dissipative parts of the inverse
    cavity response, mu the net spin-spin coupling, sigma and delta the
    total and differential incoherent rates, gamma_eq the axis
    equilibrium inversion delta/(2 sigma), and omega0_shift the residual
    per-spin precession correction -xi*(lambda_minus^2 - lambda_plus^2)
    left over from the frame transformation (it scales with the inverse
    system size and is kept only as a diagnostic).
    """

    xi: float
    eta: float
    sigma: float
    delta: float
    mu: float
    gamma_eq: float
    omega0_shift: float


def derive_params(p: ModelParams) -> ReducedParams:
    """Reduce bare parameters to the coefficients of the spin equations."""
    d = p.kappa ** 2 + p.omega ** 2
    xi = p.omega / d
    eta = p.kappa / d
    sigma = p.gamma_up + p.gamma_down
    delta = p.gamma_up - p.gamma_down
    mu = 2.0 * eta * (p.lambda_plus ** 2 - p.lambda_minus ** 2)
    gamma_eq = delta / (2.0 * sigma) if sigma > 0.0 else math.nan
    shift = -xi * (p.lambda_minus ** 2 - p.lambda_plus ** 2)
    return ReducedParams(xi=xi, eta=eta, sigma=sigma, delta=delta, mu=mu,
                         gamma_eq=gamma_eq, omega0_shift=shift)


def _spin_coeffs(p: ModelParams):
    rp = derive_params(p)
    lm, lp = p.lambda_minus, p.lambda_plus
    c_m = 2.0 * rp.xi * (lp - lm) ** 2
    c_p = 2.0 * rp.xi * (lp + lm) ** 2
    c_x = 8.0 * rp.xi * lm * lp
    return rp.mu, rp.sigma, rp.delta, p.omega0, c_m, c_p, c_x


def lmg_vector_field(p: ModelParams):
    """Return f(t, y) for the reduced spin equations.

    The closure broadcasts over trailing axes, so it accepts a single
    state of shape (3,) or a batch of shape (3, n).
    """
    mu, sig, dlt, om0, c_m, c_p, c_x = _spin_coeffs(p)

    def f(t, y):
        bx, by, g = y[0], y[1], y[2]
        dbx = -om0 * by - (mu * g + sig) * bx - c_m * g * by
        dby = om0 * bx - (mu * g + sig) * by + c_p * g * bx
        dg = (mu * (bx * bx + by * by) - c_x * bx * by
              + dlt - 2.0 * sig * g)
        return np.array([dbx, dby, dg])

    return f


def lmg_rhs(s, p: ModelParams) -> np.ndarray:
    """Evaluate the reduced spin vector field at one state."""
    return lmg_vector_field(p)(0.0, np.asarray(s, dtype=float))


def lmg_jacobian(s, p: ModelParams) -> np.ndarray:
    """Analytic Jacobian of the reduced spin field."""
    bx, by, g = np.asarray(s, dtype=float)
    mu, sig, _, om0, c_m, c_p, c_x = _spin_coeffs(p)
    return np.array([
        [-(mu * g + sig), -om0 - c_m * g, -mu * bx - c_m * by],
        [om0 + c_p * g, -(mu * g + sig), -mu * by + c_p * bx],
        [2.0 * mu * bx - c_x * by, 2.0 * mu * by - c_x * bx, -2.0 * sig],
    ])


def spherical_vector_field(p: ModelParams):
    """Return f(t, (r, theta, phi)) in the strongly dissipative limit.

    Requires xi = 0 exactly; with a reactive cavity component the phase
    phi does not decouple and the closed form below is wrong, so the
    chart refuses to evaluate.
    """
    rp = derive_params(p)
    if rp.xi != 0.0:
        raise ChartError("spherical chart requires omega = 0 (xi = 0)")
    mu, sig, dlt, om0 = rp.mu, rp.sigma, rp.delta, p.omega0

    def f(t, y):
        r, th = y[0], y[1]
        ct = np.cos(th)
        st = np.sin(th)
        dr = dlt * ct - sig * r * ct * ct - sig * r
        dth = -(mu * r - sig * ct + dlt / r) * st
        dph = np.full_like(np.asarray(dr, dtype=float), om0)
        return np.array([dr, dth, dph])

    return f


def spherical_rhs(s, p: ModelParams) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s[0] <= 0.0:
        raise ChartError("spherical radius must be positive")
    return spherical_vector_field(p)(0.0, s)


def dicke_vector_field(p: ModelParams):
    """Return f(t, y) for the full cavity-spin flow.

    State layout: (Re alpha, Im alpha, b_x, b_y, gamma).
    """
    lm, lp = p.lambda_minus, p.lambda_plus
    kap, om, om0 = p.kappa, p.omega, p.omega0
    gdn, gup = p.gamma_down, p.gamma_up
    sig = 0.5 * (gup + gdn)

    def f(t, y):
        ar, ai, bx, by, g = y[0], y[1], y[2], y[3], y[4]
        dar = -kap * ar + om * ai + (lp - lm) * by
        dai = -kap * ai - om * ar - (lm + lp) * bx
        dbx = -om0 * by + 2.0 * (lp - lm) * g * ai - sig * bx
        dby = om0 * bx - 2.0 * (lm + lp) * g * ar - sig * by
        dg = (2.0 * lm * (ar * by + ai * bx)
              + 2.0 * lp * (ar * by - ai * bx)
              - 2.0 * gdn * (0.5 + g) + 2.0 * gup * (0.5 - g))
        return np.array([dar, dai, dbx, dby, dg])

    return f


def dicke_rhs(s, p: ModelParams) -> np.ndarray:
    return dicke_vector_field(p)(0.0, np.asarray(s, dtype=float))


def slave_field(s, p: ModelParams) -> complex:
    """Cavity amplitude slaved to the spin state.

    alpha = -i (lambda_minus beta + lambda_plus beta*) / (kappa + i omega)
    with beta = b_x - i b_y.  Substituting it into the cavity equation
    makes d alpha/dt vanish identically.
    """
    s = np.asarray(s, dtype=float)
    beta = s[0] - 1j * s[1]
    lm, lp = p.lambda_minus, p.lambda_plus
    return -1j * (lm * beta + lp * np.conj(beta)) / (p.kappa + 1j * p.omega)


def photon_number(s, p: ModelParams) -> float:
    """Slaved photon number |alpha|^2 in closed form."""
    s = np.asarray(s, dtype=float)
    rp = derive_params(p)
    lm, lp = p.lambda_minus, p.lambda_plus
    bx2, by2 = s[0] ** 2, s[1] ** 2
    return (rp.xi ** 2 + rp.eta ** 2) * (
        (lm ** 2 + lp ** 2) * (bx2 + by2) + 2.0 * lm * lp * (bx2 - by2))


def parity(s) -> np.ndarray:
    """The model's exact Z2 symmetry.

    Negates the transverse spin (and the cavity quadratures in the full
    chart); fixes the inversion gamma.
    """
    s = np.asarray(s, dtype=float)
    out = s.copy()
    if s.shape[0] == 3:
        out[:2] = -out[:2]
    elif s.shape[0] == 5:
        out[:4] = -out[:4]
    else:
        raise ValueError("expected a 3- or 5-component state")
    return out


def u1_rotate(s, angle: float) -> np.ndarray:
    """Rotate the transverse spin by a phase.

    A symmetry of the reduced flow only at xi = 0, where the equations
    are equivariant under the full circle action.
    """
    s = np.asarray(s, dtype=float)
    c, sn = math.cos(angle), math.sin(angle)
    out = s.copy()
    out[0] = c * s[0] - sn * s[1]
    out[1] = sn * s[0] + c * s[1]
    return out


def to_spherical(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    r = float(np.linalg.norm(s))
    if r == 0.0:
        raise ChartError("spherical chart undefined at the origin")
    theta = math.acos(max(-1.0, min(1.0, s[2] / r)))
    phi = math.atan2(s[1], s[0])
    return np.array([r, theta, phi])


def from_spherical(s) -> np.ndarray:
    r, th, ph = np.asarray(s, dtype=float)
    st = math.sin(th)
    return np.array([r * st * math.cos(ph), r * st * math.sin(ph),
                     r * math.cos(th)])


def spin_energy(s, p: ModelParams) -> float:
    """Rotating-frame energy per spin, omega0 * gamma.

    Conserved on pole-flip trajectories (balanced couplings, no pumps),
    where gamma is frozen; more generally a convenient scalar monitor.
    """
    return p.omega0 * float(np.asarray(s)[2])


_PARAM_KEYS = ("omega", "omega0", "kappa", "lambda_minus", "lambda_plus",
               "gamma_down", "gamma_up")


def params_to_text(p: ModelParams) -> str:
    """Flat key = value serialization, one parameter per line."""
    return "".join(f"{k} = {getattr(p, k)!r}\n" for k in _PARAM_KEYS)


def params_from_text(text: str) -> ModelParams:
    """Parse the flat serialization produced by params_to_text.

    Unknown keys raise; missing rate keys default to zero.
    """
    vals = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _PARAM_KEYS:
            raise ValueError(f"unknown parameter {key!r}")
        vals[key] = float(raw.strip())
    return ModelParams(**vals)
