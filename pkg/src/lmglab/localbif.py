"""Equilibria and local bifurcation analysis of the spin evolution.

Covers the normal and superradiant rest points with their eigen-structure,
the closed-form Hopf / pitchfork / saddle-node curves in the coupling plane,
a bialternate-product Hopf test, the circular-orbit geometry available in
the overdamped-cavity limit, and coarse phase classification.
"""

from dataclasses import dataclass, replace

import numpy as np

from .integrate import _write_csv, extrema_events, integrate
from .model import (
    ChartError,
    ModelParams,
    derive_params,
    lmg_jacobian,
    lmg_rhs,
    lmg_vector_field,
    parity,
)


class DegenerateEquilibriumManifoldError(ValueError):
    """A whole manifold of rest states (or an ill-defined curve direction).

    Raised when sigma = 0 leaves the entire inversion axis at rest, and by
    curve constructors whose defining denominator vanishes.
    """


class NoOrbitError(ValueError):
    """No circular orbit exists at these parameters (pre-threshold)."""


@dataclass(frozen=True)
class Equilibrium:
    """A rest point with its linearization.

    eigenvalues are sorted by ascending real part (imaginary part breaks
    ties); eigenvectors[:, k] belongs to eigenvalues[k].  stability is one
    of "sink", "saddle(k)", "source", or "marginal" when some eigenvalue
    sits on the imaginary axis within tolerance.
    """

    state: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    stability: str
    label: str


@dataclass(frozen=True)
class POGeometry:
    """Closed-form description of the circular lasing orbit at xi = 0."""

    theta_po: float
    r_po: float
    gamma_po: float
    max_bx: float
    period: float


def jacobian(s, p):
    """Linearization of the spin flow at state s (alias kept at module level)."""
    return lmg_jacobian(s, p)


def _stability_string(eigenvalues):
    tol = 1e-9 * max(1.0, float(np.max(np.abs(eigenvalues))))
    re = np.real(eigenvalues)
    if np.any(np.abs(re) <= tol):
        return "marginal"
    n_unstable = int(np.sum(re > 0.0))
    if n_unstable == 0:
        return "sink"
    if n_unstable == len(eigenvalues):
        return "source"
    return f"saddle({n_unstable})"


def _make_equilibrium(state, p, label):
    state = np.asarray(state, dtype=float)
    ev, vec = np.linalg.eig(lmg_jacobian(state, p))
    order = np.lexsort((ev.imag, ev.real))
    ev = ev[order]
    vec = vec[:, order]
    return Equilibrium(state=state, eigenvalues=ev, eigenvectors=vec,
                       stability=_stability_string(ev), label=label)


def normal_equilibrium(p):
    """The rest state on the inversion axis, gamma = delta/(2 sigma)."""
    rp = derive_params(p)
    if not np.isfinite(rp.gamma_eq):
        raise DegenerateEquilibriumManifoldError(
            "sigma = 0: every point of the inversion axis is at rest")
    return _make_equilibrium([0.0, 0.0, rp.gamma_eq], p, "normal")


# seed shells for the superradiant Newton search
_SEED_RADII = (0.1, 0.25, 0.4)
_SEED_THETA = (np.pi / 6, np.pi / 3, 2 * np.pi / 3, 5 * np.pi / 6)
_SEED_PHI = (0.0, np.pi / 2)


def _newton_root(x0, p, tol=1e-13, maxiter=100):
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(maxiter):
        f = lmg_rhs(x, p)
        fn = np.linalg.norm(f)
        if fn < tol:
            return x
        try:
            dx = np.linalg.solve(lmg_jacobian(x, p), -f)
        except np.linalg.LinAlgError:
            return None
        # backtracking on the residual norm; accept the smallest step if
        # nothing decreases, Newton often recovers on the next iterate
        t = 1.0
        while t > 1.0 / 256.0:
            if np.linalg.norm(lmg_rhs(x + t * dx, p)) < fn:
                break
            t *= 0.5
        x = x + t * dx
    return x if np.linalg.norm(lmg_rhs(x, p)) < tol else None


def _plus_member(x):
    if abs(x[0]) > 1e-12:
        return x if x[0] > 0.0 else parity(x)
    return x if x[1] > 0.0 else parity(x)


def superradiant_equilibria(p):
    """All rest states with nonzero transverse spin, in parity-paired order.

    Damped Newton from a fixed seed grid; each found orbit representative is
    normalized to the b_x > 0 member and its partner is constructed by the
    parity map exactly, so paired states mirror to machine precision.  Pairs
    are sorted by descending transverse amplitude.  Returns [] when the
    normal state is the only equilibrium.
    """
    reps = []
    for r in _SEED_RADII:
        for th in _SEED_THETA:
            st, ct = np.sin(th), np.cos(th)
            for ph in _SEED_PHI:
                x = _newton_root([r * st * np.cos(ph), r * st * np.sin(ph),
                                  r * ct], p)
                if x is None or np.max(np.abs(lmg_rhs(x, p))) > 1e-12:
                    continue
                if np.hypot(x[0], x[1]) < 1e-8:
                    continue
                x = _plus_member(x)
                if any(np.linalg.norm(x - y) < 1e-7 for y in reps):
                    continue
                reps.append(x)
    reps.sort(key=lambda x: -np.hypot(x[0], x[1]))
    out = []
    for x in reps:
        out.append(_make_equilibrium(x, p, "superradiant-plus"))
        out.append(_make_equilibrium(parity(x), p, "superradiant-minus"))
    return out


def hopf_lambda_plus(p, lambda_minus):
    """Oscillation threshold lambda_plus at the given lambda_minus.

    The trace of the transverse block vanishes on lambda_plus**2 =
    lambda_minus**2 - sigma**2/(eta delta); the candidate is kept only if
    the crossing eigenvalues actually form a complex pair there.  Returns
    None when no genuine crossing exists.
    """
    rp = derive_params(p)
    if not np.isfinite(rp.gamma_eq):
        raise DegenerateEquilibriumManifoldError(
            "sigma = 0: no isolated normal state to destabilize")
    if rp.eta == 0.0 or rp.delta == 0.0:
        return None
    v = lambda_minus**2 - rp.sigma**2 / (rp.eta * rp.delta)
    if v <= 0.0:
        return None
    lp = float(np.sqrt(v))
    q = ModelParams(omega=p.omega, omega0=p.omega0, kappa=p.kappa,
                    lambda_minus=float(lambda_minus), lambda_plus=lp,
                    gamma_down=p.gamma_down, gamma_up=p.gamma_up)
    J = lmg_jacobian(np.array([0.0, 0.0, rp.gamma_eq]), q)
    if J[0, 1] * J[1, 0] >= 0.0:
        return None
    return lp


def hopf_curve(p, lambda_minus_values):
    """(lambda_minus, lambda_plus) points of the oscillatory instability."""
    pts = []
    for lm in lambda_minus_values:
        lp = hopf_lambda_plus(p, lm)
        if lp is not None:
            pts.append((float(lm), lp))
    return pts


def pitchfork_lambda_plus(p, lambda_minus):
    """Symmetry-breaking thresholds in lambda_plus at fixed lambda_minus.

    det(J) = 0 at the normal state reduces to a quadratic in
    lambda_plus**2; real positive roots are kept only when a simple real
    eigenvalue crosses zero with the remaining pair bounded away from it.
    Returns a sorted list (possibly empty).
    """
    rp = derive_params(p)
    g = rp.gamma_eq
    if not np.isfinite(g):
        raise DegenerateEquilibriumManifoldError(
            "sigma = 0: normal state undefined")
    a = 2.0 * rp.eta * g
    b = 2.0 * rp.xi * g
    lm2 = float(lambda_minus) ** 2
    s = rp.sigma - a * lm2
    w = p.omega0 + b * lm2
    A2 = a * a + b * b
    A1 = 2.0 * a * s + 2.0 * b * w - 4.0 * b * b * lm2
    A0 = s * s + w * w
    if A2 < 1e-30:
        roots_v = [] if abs(A1) < 1e-30 else [-A0 / A1]
    else:
        disc = A1 * A1 - 4.0 * A2 * A0
        if disc < 0.0:
            roots_v = []
        else:
            sq = np.sqrt(disc)
            roots_v = [(-A1 - sq) / (2.0 * A2), (-A1 + sq) / (2.0 * A2)]
    out = []
    for v in roots_v:
        if v <= 0.0:
            continue
        lp = float(np.sqrt(v))
        q = ModelParams(omega=p.omega, omega0=p.omega0, kappa=p.kappa,
                        lambda_minus=float(lambda_minus), lambda_plus=lp,
                        gamma_down=p.gamma_down, gamma_up=p.gamma_up)
        ev = np.linalg.eigvals(lmg_jacobian(np.array([0.0, 0.0, g]), q))
        scale = max(1.0, float(np.max(np.abs(ev))))
        k = int(np.argmin(np.abs(ev)))
        if abs(ev[k]) > 1e-7 * scale or abs(ev[k].imag) > 1e-7 * scale:
            continue
        if np.min(np.abs(np.delete(ev, k))) < 1e-7 * scale:
            continue
        out.append(lp)
    return sorted(out)


def pitchfork_curve(p, lambda_minus_values):
    """(lambda_minus, lambda_plus) points of the symmetry-breaking curves."""
    pts = []
    for lm in lambda_minus_values:
        for lp in pitchfork_lambda_plus(p, lm):
            pts.append((float(lm), lp))
    return pts


def saddlenode_lines(p):
    """Slopes of the two fold lines lambda_plus = slope * lambda_minus.

    The folds of the superradiant branch are straight rays through the
    origin; returns (low, high) slopes.  Requires xi*sigma != eta*omega0.
    """
    rp = derive_params(p)
    om0 = p.omega0
    den = rp.xi * rp.sigma - rp.eta * om0
    scale = abs(rp.xi * rp.sigma) + abs(rp.eta * om0)
    if abs(den) <= 1e-12 * max(scale, 1e-300):
        raise DegenerateEquilibriumManifoldError(
            "xi*sigma = eta*omega0: fold directions degenerate")
    base = rp.xi**2 * rp.sigma**2 + om0**2 * (rp.eta**2 + 2.0 * rp.xi**2)
    cross = 2.0 * rp.xi * om0 * np.sqrt(
        (rp.eta**2 + rp.xi**2) * (rp.sigma**2 + om0**2))
    lo = float(np.sqrt(max(base - cross, 0.0)) / abs(den))
    hi = float(np.sqrt(base + cross) / abs(den))
    return (lo, hi) if lo <= hi else (hi, lo)


def bialternate(M):
    """Bialternate product 2 M (.) I of a 3x3 matrix.

    Its eigenvalues are the pairwise sums of the eigenvalues of M, so a
    zero determinant flags two eigenvalues of M summing to zero.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    return np.array([
        [M[0, 0] + M[1, 1], M[1, 2], -M[0, 2]],
        [M[2, 1], M[0, 0] + M[2, 2], M[0, 1]],
        [-M[2, 0], M[1, 0], M[1, 1] + M[2, 2]],
    ])


def bialternate_test(M):
    """det of the bialternate product; vanishes at Hopf candidates."""
    return float(np.linalg.det(bialternate(M)))


def po_geometry(p):
    """Closed-form circular-orbit data in the overdamped-cavity limit.

    Only valid at xi = 0, where the orbit is a latitude circle traversed at
    the bare precession rate.  gamma_po carries the dynamical sign (negative
    for net downward pumping); theta_po is measured from the north pole.
    """
    rp = derive_params(p)
    if rp.xi != 0.0:
        raise ChartError("orbit geometry requires omega = 0")
    if rp.sigma <= 0.0:
        raise DegenerateEquilibriumManifoldError(
            "sigma = 0: no relaxation toward a circular orbit")
    if p.omega0 <= 0.0:
        raise NoOrbitError("no precession at omega0 = 0")
    D = -(rp.delta * rp.mu + rp.sigma**2)
    if D <= rp.sigma**2:
        raise NoOrbitError(
            "parameters on or below the oscillation threshold")
    gamma = -rp.sigma / rp.mu
    r = float(np.sqrt(D) / abs(rp.mu))
    theta = float(np.arccos(np.clip(gamma / r, -1.0, 1.0)))
    max_bx = float(np.sqrt(D - rp.sigma**2) / abs(rp.mu))
    return POGeometry(theta_po=theta, r_po=r, gamma_po=float(gamma),
                      max_bx=max_bx, period=2.0 * np.pi / p.omega0)


def spheroid_axes(p):
    """Signed semi-axes (a, b) of the spheroid carrying the orbit family.

    The family of circular orbits generated by sweeping the coupling lies
    on a spheroid centered at gamma_eq/2 on the inversion axis with
    semi-axes delta/(4 sigma) along it and delta/(2 sqrt2 sigma) across.
    """
    rp = derive_params(p)
    if rp.sigma <= 0.0:
        raise DegenerateEquilibriumManifoldError("sigma = 0")
    return (rp.delta / (4.0 * rp.sigma),
            rp.delta / (2.0 * np.sqrt(2.0) * rp.sigma))


def axis_relative_equilibrium(p):
    """(r, theta) of the rotating-frame rest point on the inversion axis.

    Degenerate at balanced pumping where the rest point sits at the origin
    of the sphere chart: returns (0, nan).
    """
    rp = derive_params(p)
    if rp.sigma <= 0.0:
        raise DegenerateEquilibriumManifoldError("sigma = 0")
    r = abs(rp.gamma_eq)
    if r == 0.0:
        return 0.0, float("nan")
    return float(r), 0.0 if rp.delta > 0.0 else float(np.pi)


def classify_phase(p, t_max=3000.0, tail=600.0, rtol=1e-9, atol=1e-11):
    """Coarse attractor classification at one point of the coupling plane.

    Returns one of "N", "SR", "N+SR", "CL", "L", "transitional".  The first
    three follow from equilibrium stability alone.  When no equilibrium is
    stable, a trajectory started just off the normal state must settle onto
    a periodic attractor (checked through the spread of late-time b_x
    maxima, strides up to 4 to allow subharmonics) to be called lasing:
    "CL" under net downward pumping, "L" upward.  Anything else, chaotic
    windows included, is reported as "transitional" rather than guessed.
    """
    rp = derive_params(p)
    normal = normal_equilibrium(p)
    srs = superradiant_equilibria(p)
    sr_stable = any(e.stability == "sink" for e in srs)
    if normal.stability == "sink":
        return "N+SR" if sr_stable else "N"
    if sr_stable:
        return "SR"

    s0 = normal.state + np.array([1e-3, 0.0, 0.0])
    tr = integrate(lmg_vector_field(p), s0, (0.0, t_max),
                   rtol=rtol, atol=atol)
    maxima = np.array([e.value for e in extrema_events(tr, component=0)
                       if e.kind == "max" and e.time >= t_max - tail])
    if len(maxima) >= 6:
        for stride in (1, 2, 3, 4):
            groups = [maxima[i::stride] for i in range(stride)]
            if all(len(g) >= 2
                   and np.ptp(g) < 5e-4 * (1.0 + np.max(np.abs(g)))
                   for g in groups):
                return "CL" if rp.delta < 0.0 else "L"
    return "transitional"


def phase_grid(p, lambda_minus_values, lambda_plus_values, **kwargs):
    """Classify every point of a coupling-plane grid.

    Returns rows (lambda_minus, lambda_plus, label, gamma_eq, leading_re,
    leading_im).  The equilibrium data belongs to the state carrying the
    label: a stable superradiant member for SR / N+SR, the normal state
    otherwise.  Extra keyword arguments go to classify_phase.
    """
    rows = []
    for lm in np.atleast_1d(lambda_minus_values):
        for lp in np.atleast_1d(lambda_plus_values):
            q = replace(p, lambda_minus=float(lm), lambda_plus=float(lp))
            label = classify_phase(q, **kwargs)
            eq = normal_equilibrium(q)
            if label in ("SR", "N+SR"):
                for cand in superradiant_equilibria(q):
                    if cand.stability == "sink":
                        eq = cand
                        break
            lead = eq.eigenvalues[-1]
            rows.append((float(lm), float(lp), label, float(eq.state[2]),
                         float(np.real(lead)), float(np.imag(lead))))
    return rows


def phase_grid_to_csv(rows, path, meta=None):
    """Write phase_grid rows with a '#'-prefixed JSON header line."""
    out = [[repr(lm), repr(lp), label, repr(g), repr(re), repr(im)]
           for (lm, lp, label, g, re, im) in rows]
    _write_csv(path, dict(meta or {}),
               ["lambda_minus", "lambda_plus", "label", "gamma_eq",
                "leading_eigenvalue_re", "leading_eigenvalue_im"], out)


def curves_to_csv(curves, path, meta=None):
    """Write boundary curves as (lambda_minus, lambda_plus, curve_id) rows.

    curves maps curve_id to an iterable of (lambda_minus, lambda_plus)
    pairs; ids are written in sorted order so output is deterministic.
    """
    rows = []
    for cid in sorted(curves):
        for lm, lp in curves[cid]:
            rows.append([repr(float(lm)), repr(float(lp)), str(cid)])
    _write_csv(path, dict(meta or {}),
               ["lambda_minus", "lambda_plus", "curve_id"], rows)
