"""Boundary-value solving, continuation, and connecting-orbit location.

Orbit segments are discretized by multiple shooting on a uniform mesh with
exact variational Jacobians, so periodic orbits, their Floquet data, and
the two-segment systems of Lin's method all reduce to damped Newton on
moderate dense systems.  Branches of equilibria and periodic orbits are
followed in the co-rotating coupling by pseudo-arclength continuation with
test functions monitored at accepted points and bifurcations refined by
bisection.  Homoclinic orbits to the normal-state saddle and connections
from it to the saddle periodic orbit are found by closing a Lin gap in a
fixed direction across the section gamma = const.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .integrate import _write_csv, integrate, poincare_crossings
from .localbif import normal_equilibrium, superradiant_equilibria
from .model import ModelParams, lmg_jacobian, lmg_rhs, lmg_vector_field, parity

__all__ = [
    "SegmentSolveError",
    "OrbitSegment",
    "SegmentProblem",
    "PeriodicOrbitSolution",
    "FloquetData",
    "BifurcationEvent",
    "BranchPoint",
    "Branch",
    "HomoclinicResult",
    "EtoPResult",
    "BifDiagram",
    "solve_segment",
    "solve_periodic",
    "periodic_from_attractor",
    "sro_from_manifold",
    "floquet",
    "continue_branch",
    "lin_find_homoclinic",
    "lin_find_etop",
    "bif_diagram",
    "branches_to_csv",
    "bif_events_to_csv",
    "connection_to_csv",
]


class SegmentSolveError(RuntimeError):
    """Newton failed; carries the last iterate and its residual norm."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


@dataclass
class OrbitSegment:
    """Multiple-shooting representation of one orbit piece.

    mesh holds normalized times in [0, 1]; states the node values; T the
    total (signed) flow time, so node j maps to node j+1 under the flow
    over T * (mesh[j+1] - mesh[j]).
    """

    mesh: np.ndarray
    states: np.ndarray
    T: float
    boundary: str = ""


@dataclass
class SegmentProblem:
    """General shooting BVP: node guesses, optional free scalars, and a
    boundary-condition callable bc(states, T, scalars) -> residual vector.

    The system need not be square; Newton uses least squares, so an
    underdetermined direction (like a free T along a constant solution)
    simply stays put.
    """

    p: ModelParams
    states: np.ndarray
    T: float
    bc: object
    free_T: bool = True
    scalars: dict = field(default_factory=dict)
    boundary: str = "custom"


@dataclass
class PeriodicOrbitSolution:
    p: ModelParams
    segment: OrbitSegment
    period: float
    multipliers: np.ndarray
    stability: str
    symmetric: bool


@dataclass
class FloquetData:
    multipliers: np.ndarray     # sorted by descending magnitude
    vectors: np.ndarray         # columns matching multipliers
    base_point: np.ndarray
    degenerate: bool

    @property
    def stable_vector(self):
        """Real unit eigenvector of the largest multiplier inside the
        unit circle, None when that multiplier is complex."""
        for k, m in enumerate(self.multipliers):
            if abs(m) < 1.0 - 1e-6:
                v = self.vectors[:, k]
                if abs(m.imag) > 1e-8 or np.max(np.abs(v.imag)) > 1e-6:
                    return None
                v = np.real(v)
                v = v / np.linalg.norm(v)
                for c in v:
                    if abs(c) > 1e-12:
                        return v if c > 0 else -v
                return v
        return None


@dataclass
class BifurcationEvent:
    kind: str                   # Hopf | fold | pitchfork-eq | PD | PPO |
                                # fold-PO | homoclinic | EtoP
    lambda_plus: float
    object_ref: str = ""
    diagnostics: dict = field(default_factory=dict)


@dataclass
class BranchPoint:
    lambda_plus: float
    state: np.ndarray
    max_bx: float
    stability: str
    period: float | None = None
    data: object = None


@dataclass
class Branch:
    branch_id: str
    kind: str                   # "equilibrium" | "periodic"
    points: list
    events: list = field(default_factory=list)
    note: str = ""


@dataclass
class HomoclinicResult:
    lambda_plus: float
    label: str
    x1: OrbitSegment
    x2: OrbitSegment
    epsilon: float
    delta1: float
    delta2: float
    lin_vector: np.ndarray
    section_value: float
    times: np.ndarray
    states: np.ndarray


@dataclass
class EtoPResult:
    lambda_plus: float
    label: str
    x1: OrbitSegment
    x2: OrbitSegment
    orbit: PeriodicOrbitSolution
    epsilon: float
    delta2: float
    lin_vector: np.ndarray
    section_value: float
    times: np.ndarray
    states: np.ndarray


@dataclass
class BifDiagram:
    p: ModelParams
    lambda_minus: float
    branches: list
    events: list
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# flows

_FLOW_RTOL = 1e-11
_FLOW_ATOL = 1e-13


_STATE_BOUND = 5.0   # physical states stay inside the unit-ish ball; a
                     # Newton excursion past this rides the cubic field
                     # into finite-time blowup and stalls the integrator


def _escape_event(t, y):
    return 4.0 * _STATE_BOUND ** 2 - (y[0] ** 2 + y[1] ** 2 + y[2] ** 2)


_escape_event.terminal = True


def _flow(p, x0, T):
    """End point of the flow over time T (T may be negative)."""
    x0 = np.asarray(x0, dtype=float)
    if T == 0.0:
        return x0.copy()
    if not np.all(np.isfinite(x0)) or np.max(np.abs(x0)) > _STATE_BOUND:
        raise SegmentSolveError("flow start outside the physical ball")
    f = lmg_vector_field(p)
    sol = solve_ivp(f, (0.0, T), x0, method="DOP853",
                    rtol=_FLOW_RTOL, atol=_FLOW_ATOL, dense_output=False,
                    events=_escape_event)
    if sol.status == 1:
        raise SegmentSolveError("flow left the physical ball")
    if not sol.success:
        raise SegmentSolveError(f"flow failed: {sol.message}")
    return sol.y[:, -1]


def _flow_var(p, x0, T):
    """Flow end point together with the state-transition matrix."""
    x0 = np.asarray(x0, dtype=float)
    if T == 0.0:
        return x0.copy(), np.eye(3)
    if not np.all(np.isfinite(x0)) or np.max(np.abs(x0)) > _STATE_BOUND:
        raise SegmentSolveError("flow start outside the physical ball")
    f = lmg_vector_field(p)

    def aug(t, y):
        x = y[:3]
        Phi = y[3:].reshape(3, 3)
        return np.concatenate([f(t, x), (lmg_jacobian(x, p) @ Phi).ravel()])

    y0 = np.concatenate([x0, np.eye(3).ravel()])
    sol = solve_ivp(aug, (0.0, T), y0, method="DOP853",
                    rtol=_FLOW_RTOL, atol=_FLOW_ATOL, events=_escape_event)
    if sol.status == 1:
        raise SegmentSolveError("flow left the physical ball")
    if not sol.success:
        raise SegmentSolveError(f"variational flow failed: {sol.message}")
    return sol.y[:3, -1], sol.y[3:, -1].reshape(3, 3)


# ---------------------------------------------------------------------------
# dense Newton with column equilibration

def _newton(build, z0, tol=1e-11, maxiter=25):
    """build(z) -> (R, J).  Damped Newton with least-squares steps.

    A flow failure while probing a trial point counts as an infinite
    residual, so backtracking recovers instead of propagating the error.
    """
    z = np.asarray(z0, dtype=float).copy()
    R, J = build(z)
    rn = np.max(np.abs(R))
    rescues = 0
    for _ in range(maxiter):
        if rn < tol:
            return z
        col = np.max(np.abs(J), axis=0)
        col[col < 1e-300] = 1.0
        Js = J / col
        if Js.shape[0] == Js.shape[1]:
            try:
                dz = np.linalg.solve(Js, -R)
            except np.linalg.LinAlgError:
                dz = np.linalg.lstsq(Js, -R, rcond=None)[0]
        else:
            dz = np.linalg.lstsq(Js, -R, rcond=None)[0]
        dz = dz / col
        cap = 10.0 * max(1.0, float(np.max(np.abs(z))))
        big = float(np.max(np.abs(dz)))
        if big > cap:
            dz *= cap / big
        t = 1.0
        stepped = False
        weak = None
        for _ in range(9):
            try:
                Rt, Jt = build(z + t * dz)
                rt = np.max(np.abs(Rt))
            except SegmentSolveError:
                rt = np.inf
                Rt = Jt = None
            if rt < 0.9 * rn or rt < tol:
                z = z + t * dz
                R, J, rn = Rt, Jt, rt
                stepped = True
                break
            if rt < rn and (weak is None or rt < weak[0]):
                weak = (rt, t, Rt, Jt)
            t *= 0.5
        if stepped:
            continue
        # a near-converged iterate displaced along a stiff direction has a
        # non-monotone residual on the Newton path; the undamped step still
        # lands in the quadratic basin, so spend one on it
        if rescues < 3 and rn < 1e-4:
            try:
                Rt, Jt = build(z + dz)
                rt = np.max(np.abs(Rt))
            except SegmentSolveError:
                rt = np.inf
            if np.isfinite(rt) and rt <= max(1e3 * rn, 1e-2):
                z = z + dz
                R, J, rn = Rt, Jt, rt
                rescues += 1
                continue
        if weak is not None:
            rt, t, Rt, Jt = weak
            z = z + t * dz
            R, J, rn = Rt, Jt, rt
            continue
        raise SegmentSolveError("Newton stalled", last_iterate=z,
                                residual=rn)
    if rn < tol:
        return z
    raise SegmentSolveError("Newton did not converge", last_iterate=z,
                            residual=rn)


# ---------------------------------------------------------------------------
# generic segment solve (spec-level entry point)

def solve_segment(problem: SegmentProblem) -> OrbitSegment:
    """Newton-solve a shooting BVP given as a SegmentProblem.

    Unknowns are the node states, T (if free_T), and the extra scalars in
    problem.scalars (alphabetical order).  bc receives (states, T,
    scalars_dict) and returns the boundary residual vector.
    """
    m = problem.states.shape[0] - 1
    keys = sorted(problem.scalars)
    nz = 3 * (m + 1) + (1 if problem.free_T else 0) + len(keys)
    p = problem.p

    def unpack(z):
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        k = 3 * (m + 1)
        T = z[k] if problem.free_T else problem.T
        if problem.free_T:
            k += 1
        sc = {key: z[k + i] for i, key in enumerate(keys)}
        return X, T, sc

    def build(z):
        X, T, sc = unpack(z)
        h = T / m
        R = np.zeros(3 * m)
        J = np.zeros((3 * m, nz))
        for j in range(m):
            xe, Phi = _flow_var(p, X[j], h)
            R[3 * j:3 * j + 3] = xe - X[j + 1]
            J[3 * j:3 * j + 3, 3 * j:3 * j + 3] = Phi
            J[3 * j:3 * j + 3, 3 * (j + 1):3 * (j + 1) + 3] = -np.eye(3)
            if problem.free_T:
                J[3 * j:3 * j + 3, 3 * (m + 1)] = \
                    lmg_rhs(xe, p) / m
        B = np.atleast_1d(np.asarray(problem.bc(X, T, sc), dtype=float))
        JB = np.zeros((B.size, nz))
        hstep = 1e-7
        for i in range(nz):
            zp = z.copy()
            zp[i] += hstep
            Xp, Tp, scp = unpack(zp)
            Bp = np.atleast_1d(np.asarray(problem.bc(Xp, Tp, scp),
                                          dtype=float))
            JB[:, i] = (Bp - B) / hstep
        return np.concatenate([R, B]), np.vstack([J, JB])

    z0 = np.concatenate([
        problem.states.ravel(),
        [problem.T] if problem.free_T else [],
        [problem.scalars[k] for k in keys]])
    z = _newton(build, z0)
    X, T, sc = unpack(z)
    problem.scalars.update(sc)
    return OrbitSegment(mesh=np.linspace(0.0, 1.0, m + 1), states=X, T=T,
                        boundary=problem.boundary)


# ---------------------------------------------------------------------------
# periodic orbits

def _po_build(p, m, x_ref, f_ref, lam_col=False):
    """Residual/Jacobian assembler for the periodic shooting system.

    Unknown layout [X_0..X_m, T] (+ lambda_plus when lam_col); equations:
    3m matching, 3 closure, 1 linear phase anchored at x_ref.
    """
    def build(z):
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        T = z[3 * (m + 1)]
        q = replace(p, lambda_plus=float(z[-1])) if lam_col else p
        h = T / m
        n = z.size
        R = np.zeros(3 * m + 4)
        J = np.zeros((3 * m + 4, n))
        ends = np.empty((m, 3))
        for j in range(m):
            xe, Phi = _flow_var(q, X[j], h)
            ends[j] = xe
            R[3 * j:3 * j + 3] = xe - X[j + 1]
            J[3 * j:3 * j + 3, 3 * j:3 * j + 3] = Phi
            J[3 * j:3 * j + 3, 3 * (j + 1):3 * (j + 1) + 3] = -np.eye(3)
            J[3 * j:3 * j + 3, 3 * (m + 1)] = lmg_rhs(xe, q) / m
        R[3 * m:3 * m + 3] = X[m] - X[0]
        J[3 * m:3 * m + 3, 3 * m:3 * m + 3] = np.eye(3)
        J[3 * m:3 * m + 3, 0:3] = -np.eye(3)
        R[3 * m + 3] = f_ref @ (X[0] - x_ref)
        J[3 * m + 3, 0:3] = f_ref
        if lam_col:
            # parameter column by forward difference on the matching part
            dl = 1e-7
            qp = replace(p, lambda_plus=float(z[-1]) + dl)
            for j in range(m):
                xp = _flow(qp, X[j], h)
                J[3 * j:3 * j + 3, n - 1] = (xp - ends[j]) / dl
        return R, J
    return build


def solve_periodic(p, states, T, m=None) -> PeriodicOrbitSolution:
    """Periodic orbit from node guesses (m+1, 3) and a period guess."""
    states = np.asarray(states, dtype=float)
    m = states.shape[0] - 1 if m is None else m
    x_ref = states[0].copy()
    f_ref = lmg_rhs(x_ref, p)
    if np.linalg.norm(f_ref) < 1e-12:
        raise SegmentSolveError("phase anchor sits at an equilibrium")
    build = _po_build(p, m, x_ref, f_ref)
    z0 = np.concatenate([states.ravel(), [float(T)]])
    z = _newton(build, z0)
    X = z[:3 * (m + 1)].reshape(m + 1, 3)
    T = float(z[3 * (m + 1)])
    seg = OrbitSegment(mesh=np.linspace(0.0, 1.0, m + 1), states=X, T=T,
                       boundary="periodic")
    mult = _multipliers(p, seg)
    return PeriodicOrbitSolution(
        p=p, segment=seg, period=T, multipliers=mult,
        stability=_po_stability(mult), symmetric=_is_symmetric(p, seg))


def _multipliers(p, seg):
    m = seg.states.shape[0] - 1
    h = seg.T / m
    M = np.eye(3)
    for j in range(m):
        _, Phi = _flow_var(p, seg.states[j], h)
        M = Phi @ M
    mult = np.linalg.eigvals(M)
    return mult[np.argsort(-np.abs(mult))]


def _po_stability(mult):
    # drop the multiplier closest to +1 (trivial), judge the rest
    k = int(np.argmin(np.abs(mult - 1.0)))
    rest = np.delete(mult, k)
    big = np.max(np.abs(rest))
    if big < 1.0 - 1e-6:
        return "stable"
    if big > 1.0 + 1e-6:
        return "unstable"
    return "marginal"


def _is_symmetric(p, seg):
    half = _flow(p, seg.states[0], 0.5 * seg.T)
    err = np.linalg.norm(parity(half) - seg.states[0])
    return bool(err < 1e-6 * max(1.0, np.linalg.norm(seg.states[0])))


def floquet(po: PeriodicOrbitSolution) -> FloquetData:
    """Monodromy spectrum and eigenvectors at the orbit's base point."""
    seg = po.segment
    m = seg.states.shape[0] - 1
    h = seg.T / m
    M = np.eye(3)
    for j in range(m):
        _, Phi = _flow_var(po.p, seg.states[j], h)
        M = Phi @ M
    mult, vec = np.linalg.eig(M)
    order = np.argsort(-np.abs(mult))
    mult, vec = mult[order], vec[:, order]
    degen = bool(np.min(np.abs(np.subtract.outer(mult, mult)
                               + np.eye(3) * 1e3)) < 1e-8)
    return FloquetData(multipliers=mult, vectors=vec,
                       base_point=seg.states[0].copy(), degenerate=degen)


def periodic_from_attractor(p, s0=None, t_settle=2000.0, n_nodes=12,
                            rtol=1e-10, atol=1e-12) -> PeriodicOrbitSolution:
    """Converge onto the stable periodic attractor reached from s0.

    Integrates past the transient, estimates the period from successive
    b_x maxima of one symbol class, then polishes by periodic shooting.
    """
    if s0 is None:
        s0 = normal_equilibrium(p).state + np.array([1e-3, 0.0, 0.0])
    tr = integrate(lmg_vector_field(p), np.asarray(s0, float),
                   (0.0, t_settle), rtol=rtol, atol=atol)
    from .integrate import extrema_events
    evs = [e for e in extrema_events(tr, component=0)
           if e.kind == "max" and e.time > 0.75 * t_settle]
    if len(evs) < 3:
        raise SegmentSolveError("no sustained oscillation found")
    # period from returns to the largest-maximum class
    top = max(e.value for e in evs)
    ret = [e.time for e in evs if e.value > top - 0.25 * abs(top) - 1e-9]
    gaps = np.diff(ret)
    if len(gaps) == 0:
        raise SegmentSolveError("could not bracket one period")
    # a doubled orbit revisits the same b_x class twice per period with
    # distinct states, so pick the period by full-state recurrence
    t_ref = ret[-1]
    x_ref = tr.sol(t_ref)
    d = np.array([np.linalg.norm(tr.sol(t) - x_ref) for t in ret[:-1]])
    T0 = None
    if len(d) >= 2 and np.max(d) > 2.0 * np.min(d) + 1e-12:
        thr = 0.5 * (np.min(d) + np.max(d))
        for i in range(len(d) - 1, -1, -1):
            if d[i] < thr:
                T0 = float(t_ref - ret[i])
                break
    if T0 is None:
        T0 = float(np.median(gaps))
    nodes = tr.sol(t_ref - T0 + np.linspace(0.0, T0, n_nodes + 1)).T
    sol = solve_periodic(p, nodes, T0)
    if float(np.linalg.norm(lmg_rhs(sol.segment.states[0], p))) < 1e-7:
        # a decaying spiral can hand the solver a constant solution
        raise SegmentSolveError("collapsed onto an equilibrium")
    return sol


# ---------------------------------------------------------------------------
# continuation

def _solve_equilibrium_at(p, x_guess):
    def build(z):
        return lmg_rhs(z, p), lmg_jacobian(z, p)
    return _newton(build, x_guess, tol=1e-12)


def _eq_point(p, x):
    ev = np.linalg.eigvals(lmg_jacobian(x, p))
    tol = 1e-9 * max(1.0, np.max(np.abs(ev)))
    re = np.real(ev)
    if np.any(np.abs(re) <= tol):
        stab = "marginal"
    else:
        k = int(np.sum(re > 0))
        stab = "sink" if k == 0 else ("source" if k == 3 else f"saddle({k})")
    return BranchPoint(lambda_plus=p.lambda_plus, state=np.asarray(x),
                       max_bx=abs(float(x[0])), stability=stab, data=ev)


def _hopf_test(ev):
    """Real part of the complex pair, None if the spectrum is all real."""
    pairs = [z for z in ev if abs(z.imag) > 1e-9]
    if len(pairs) < 2:
        return None
    return float(max(z.real for z in pairs))


def _continue_equilibrium(eq, p, stop):
    lo, hi = stop.get("range", (None, None))
    max_steps = stop.get("max_steps", 600)
    ds = stop.get("initial_step", 2e-3)
    direction = stop.get("direction", +1)
    min_amp = stop.get("min_amplitude", 0.0)
    branch_id = stop.get("branch_id", "eq")
    refine = stop.get("refine_events", True)

    W = np.array([1.0, 1.0, 1.0, 1.0])   # (x, lambda)
    u = np.concatenate([np.asarray(eq.state, float), [p.lambda_plus]])
    pts = [_eq_point(replace(p, lambda_plus=float(u[3])), u[:3])]
    events = []
    note = ""

    # first tangent: natural step in lambda
    q = replace(p, lambda_plus=float(u[3] + direction * ds))
    try:
        x1 = _solve_equilibrium_at(q, u[:3])
    except SegmentSolveError:
        return Branch(branch_id, "equilibrium", pts, events,
                      "initial step failed")
    u1 = np.concatenate([x1, [q.lambda_plus]])
    pts.append(_eq_point(q, x1))
    prev, cur = u, u1

    for _ in range(max_steps):
        t = (cur - prev) * W
        nt = np.linalg.norm(t)
        if nt < 1e-14:
            note = "tangent collapse"
            break
        t /= nt
        step = ds
        while True:
            pred = cur + step * (t / W)

            def build(z, pred=pred, t=t):
                q = replace(p, lambda_plus=float(z[3]))
                R4 = np.dot((z - pred) * W, t)
                J = np.zeros((4, 4))
                J[:3, :3] = lmg_jacobian(z[:3], q)
                dl = 1e-7
                qp = replace(p, lambda_plus=float(z[3]) + dl)
                J[:3, 3] = (lmg_rhs(z[:3], qp) - lmg_rhs(z[:3], q)) / dl
                J[3, :] = W * t
                return np.concatenate([lmg_rhs(z[:3], q), [R4]]), J

            try:
                nxt = _newton(build, pred, tol=1e-11, maxiter=12)
                break
            except SegmentSolveError:
                step *= 0.5
                if step < 1e-12:
                    nxt = None
                    break
        if nxt is None:
            note = "step collapse"
            break
        qn = replace(p, lambda_plus=float(nxt[3]))
        newpt = _eq_point(qn, nxt[:3])
        # events between cur and nxt
        if refine:
            events.extend(_eq_events(p, pts[-1], newpt, branch_id))
        pts.append(newpt)
        # fold monitor: lambda component of the secant flips sign
        if (nxt[3] - cur[3]) * (cur[3] - prev[3]) < 0 and refine:
            lam_fold, x_fold = _refine_fold(p, prev, cur, nxt)
            ev_fold = np.linalg.eigvals(
                lmg_jacobian(x_fold, replace(p, lambda_plus=lam_fold)))
            events.append(BifurcationEvent(
                "fold", float(lam_fold), branch_id,
                {"eigenvalues": ev_fold,
                 "zero_eig": float(np.min(np.abs(ev_fold)))}))
        prev, cur = cur, nxt
        ds = min(ds * 1.3, stop.get("max_step", 5e-3))
        amp = np.hypot(cur[0], cur[1])
        if min_amp > 0.0 and amp < min_amp:
            note = "amplitude floor reached"
            break
        if lo is not None and cur[3] < lo:
            note = "left range"
            break
        if hi is not None and cur[3] > hi:
            note = "right range"
            break
    return Branch(branch_id, "equilibrium", pts, events, note)


def _eq_events(p, pt_a, pt_b, branch_id):
    """Zero crossings of det(J) and of the complex pair's real part."""
    out = []
    la, lb = pt_a.lambda_plus, pt_b.lambda_plus
    if la == lb:
        return out
    xa = pt_a.state

    def at(lam):
        q = replace(p, lambda_plus=float(lam))
        x = _solve_equilibrium_at(q, xa)
        return np.linalg.eigvals(lmg_jacobian(x, q)), x

    ev_a, ev_b = pt_a.data, pt_b.data
    det_a = float(np.real(np.prod(ev_a)))
    det_b = float(np.real(np.prod(ev_b)))
    if det_a * det_b < 0:
        lo_l, hi_l = la, lb
        for _ in range(60):
            mid = 0.5 * (lo_l + hi_l)
            ev_m, _ = at(mid)
            if det_a * float(np.real(np.prod(ev_m))) < 0:
                hi_l = mid
            else:
                lo_l = mid
            if abs(hi_l - lo_l) < 1e-9:
                break
        lam_c = 0.5 * (lo_l + hi_l)
        ev_c, x_c = at(lam_c)
        kind = "pitchfork-eq" if np.hypot(x_c[0], x_c[1]) < 1e-6 else "fold"
        out.append(BifurcationEvent(kind, float(lam_c), branch_id,
                                    {"eigenvalues": ev_c}))
    ha, hb = _hopf_test(ev_a), _hopf_test(ev_b)
    if ha is not None and hb is not None and ha * hb < 0:
        lo_l, hi_l = la, lb
        for _ in range(60):
            mid = 0.5 * (lo_l + hi_l)
            ev_m, _ = at(mid)
            hm = _hopf_test(ev_m)
            if hm is None:
                break
            if ha * hm < 0:
                hi_l = mid
            else:
                lo_l = mid
            if abs(hi_l - lo_l) < 1e-9:
                break
        lam_c = 0.5 * (lo_l + hi_l)
        ev_c, _ = at(lam_c)
        out.append(BifurcationEvent("Hopf", float(lam_c), branch_id,
                                    {"eigenvalues": ev_c}))
    return out


def _refine_fold(p, prev, cur, nxt):
    """Parabolic estimate of the branch's lambda extremum."""
    pts = np.array([prev, cur, nxt])
    s = np.array([0.0, np.linalg.norm(cur - prev),
                  np.linalg.norm(cur - prev) + np.linalg.norm(nxt - cur)])
    c = np.polyfit(s, pts[:, 3], 2)
    s_ext = -c[1] / (2.0 * c[0])
    lam = float(np.polyval(c, s_ext))
    w = np.clip(s_ext / s[-1], 0.0, 1.0)
    x_guess = (1 - w) * prev[:3] + w * nxt[:3]
    return lam, x_guess


def _continue_periodic(po, stop):
    p = po.p
    lo, hi = stop.get("range", (None, None))
    max_steps = stop.get("max_steps", 400)
    ds = stop.get("initial_step", 2e-3)
    direction = stop.get("direction", -1)
    max_period = stop.get("max_period", 400.0)
    branch_id = stop.get("branch_id", "po")
    refine = stop.get("refine_events", True)

    seg = po.segment
    m = seg.states.shape[0] - 1
    n_state = 3 * (m + 1) + 1

    def pack(seg, lam):
        return np.concatenate([seg.states.ravel(), [seg.T], [lam]])

    def params_at(lam):
        return replace(p, lambda_plus=float(lam))

    def po_at(z):
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        T = float(z[3 * (m + 1)])
        q = params_at(z[-1])
        seg = OrbitSegment(np.linspace(0, 1, m + 1), X, T, "periodic")
        mult = _multipliers(q, seg)
        return PeriodicOrbitSolution(q, seg, T, mult, _po_stability(mult),
                                     _is_symmetric(q, seg))

    def point(sol):
        return BranchPoint(
            lambda_plus=sol.p.lambda_plus, state=sol.segment.states[0],
            max_bx=float(np.max(np.abs(sol.segment.states[:, 0]))),
            stability=sol.stability, period=sol.period, data=sol)

    def solve_at(lam, z_guess):
        q = params_at(lam)
        x_ref = z_guess[:3].copy()
        f_ref = lmg_rhs(x_ref, q)
        build = _po_build(q, m, x_ref, f_ref)
        z = _newton(build, z_guess[:n_state])
        return po_at(np.concatenate([z, [lam]]))

    # weights: orbit shape dominates the arclength metric
    W = np.ones(n_state + 1)
    W[3 * (m + 1)] = stop.get("period_weight", 0.01)
    W[-1] = 1.0                  # lambda

    u = pack(seg, p.lambda_plus)
    sols = [po]
    pts = [point(po)]
    events = []
    note = ""

    # natural first hop; near a homoclinic dT/dlambda is enormous, so
    # shrink the hop until the corrector lands
    hop = stop.get("first_hop", ds)
    s1 = None
    while hop >= 1e-9:
        try:
            s1 = solve_at(p.lambda_plus + direction * hop, u)
            break
        except SegmentSolveError:
            hop *= 0.5
    if s1 is None:
        return Branch(branch_id, "periodic", pts, events,
                      "initial step failed")
    sols.append(s1)
    pts.append(point(s1))
    prev, cur = u, pack(s1.segment, s1.p.lambda_plus)

    for _ in range(max_steps):
        t = (cur - prev) * W
        nt = np.linalg.norm(t)
        if nt < 1e-14:
            note = "tangent collapse"
            break
        t /= nt
        step = ds
        sol_n = None
        while step >= 1e-10:
            pred = cur + step * (t / W)
            x_ref = pred[:3].copy()
            q_pred = params_at(pred[-1])
            f_ref = lmg_rhs(x_ref, q_pred)
            inner = _po_build(p, m, x_ref, f_ref, lam_col=True)

            def build(z, pred=pred, t=t, inner=inner):
                R, J = inner(z)
                Ra = np.dot((z - pred) * W, t)
                Ja = (W * t)[None, :]
                return np.concatenate([R, [Ra]]), np.vstack([J, Ja])

            try:
                z_n = _newton(build, pred, tol=1e-11, maxiter=15)
                sol_n = po_at(z_n)
                break
            except SegmentSolveError:
                step *= 0.5
        if sol_n is None:
            note = "step collapse"
            break
        if refine:
            events.extend(_po_events(sols[-1], sol_n, m, branch_id))
        sols.append(sol_n)
        pts.append(point(sol_n))
        prev, cur = cur, pack(sol_n.segment, sol_n.p.lambda_plus)
        ds = min(step * 1.3, stop.get("max_step", 4e-3))
        lam = sol_n.p.lambda_plus
        if sol_n.period > max_period:
            note = "period blowup"
            break
        if lo is not None and lam < lo:
            note = "left range"
            break
        if hi is not None and lam > hi:
            note = "right range"
            break
    return Branch(branch_id, "periodic", pts, events, note)


def _floquet_tests(mult):
    """(PD, fold/PPO) test functions from trace/determinant invariants."""
    S = float(np.real(np.sum(mult))) - 1.0
    P = float(np.real(np.prod(mult)))
    return 1.0 + S + P, 1.0 - S + P


def _po_events(sol_a, sol_b, m, branch_id):
    out = []
    ga = _floquet_tests(sol_a.multipliers)
    gb = _floquet_tests(sol_b.multipliers)
    la, lb = sol_a.p.lambda_plus, sol_b.p.lambda_plus
    if la == lb:
        return out

    def solve_at(lam, guess_sol):
        q = replace(guess_sol.p, lambda_plus=float(lam))
        seg = guess_sol.segment
        x_ref = seg.states[0].copy()
        f_ref = lmg_rhs(x_ref, q)
        build = _po_build(q, m, x_ref, f_ref)
        z = _newton(build, np.concatenate([seg.states.ravel(), [seg.T]]))
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        T = float(z[3 * (m + 1)])
        seg2 = OrbitSegment(np.linspace(0, 1, m + 1), X, T, "periodic")
        mult = _multipliers(q, seg2)
        return PeriodicOrbitSolution(q, seg2, T, mult,
                                     _po_stability(mult),
                                     _is_symmetric(q, seg2))

    for idx, kind0 in ((0, "PD"), (1, "PPO-or-fold")):
        if ga[idx] * gb[idx] < 0:
            lo_l, lo_s = la, sol_a
            hi_l = lb
            g_lo = ga[idx]
            guess = sol_a
            for _ in range(60):
                mid = 0.5 * (lo_l + hi_l)
                try:
                    sm = solve_at(mid, guess)
                except SegmentSolveError:
                    break
                gm = _floquet_tests(sm.multipliers)[idx]
                if g_lo * gm < 0:
                    hi_l = mid
                else:
                    lo_l, lo_s = mid, sm
                guess = sm
                if abs(hi_l - lo_l) < 1e-12 or abs(gm) < 1e-7:
                    break
            lam_c = 0.5 * (lo_l + hi_l)
            try:
                sc = solve_at(lam_c, guess)
            except SegmentSolveError:
                sc = guess
            if kind0 == "PD":
                kind = "PD"
                crit = sc.multipliers[np.argmin(np.abs(
                    sc.multipliers + 1.0))]
            else:
                kind = "PPO" if sc.symmetric else "fold-PO"
                nontriv = np.delete(
                    sc.multipliers,
                    np.argmin(np.abs(sc.multipliers - 1.0)))
                crit = nontriv[np.argmin(np.abs(nontriv - 1.0))]
            out.append(BifurcationEvent(
                kind, float(sc.p.lambda_plus), branch_id,
                {"multiplier": complex(crit),
                 "multipliers": sc.multipliers,
                 "period": sc.period}))
    return out


def continue_branch(solution, p=None, free_param="lambda_plus",
                    stop_conditions=None) -> Branch:
    """Pseudo-arclength continuation of an equilibrium or periodic orbit.

    stop_conditions keys: range (lo, hi), max_steps, initial_step,
    max_step, direction (+1/-1), max_period, min_amplitude, branch_id,
    refine_events.  Events (fold / pitchfork-eq / Hopf for equilibria,
    PD / PPO / fold-PO for orbits) are refined by bisection in the
    coupling to 1e-9.
    """
    if free_param != "lambda_plus":
        raise ValueError("only lambda_plus continuation is supported")
    stop = dict(stop_conditions or {})
    if isinstance(solution, PeriodicOrbitSolution):
        return _continue_periodic(solution, stop)
    if p is None:
        raise ValueError("equilibrium continuation needs the parameter set")
    return _continue_equilibrium(solution, p, stop)


# ---------------------------------------------------------------------------
# Lin's method

def _saddle_frame(p):
    """Normal saddle with oriented eigenframe (y_u, y_s weak, y_ss strong)."""
    eq = normal_equilibrium(p)
    ev = eq.eigenvalues
    if np.max(np.abs(np.imag(ev))) > 1e-9:
        raise SegmentSolveError("saddle spectrum not real")
    re = np.real(ev)
    if np.sum(re > 0) != 1:
        raise SegmentSolveError("need exactly one unstable direction")
    idx_u = int(np.argmax(re))
    stable = [i for i in range(3) if i != idx_u]
    # weak = closer to zero
    idx_s = stable[int(np.argmax([re[i] for i in stable]))]
    idx_ss = stable[0] if stable[1] == idx_s else stable[1]

    def orient(v):
        v = np.real(v)
        v = v / np.linalg.norm(v)
        for c in v:
            if abs(c) > 1e-12:
                return v if c > 0 else -v
        return v

    y_u = orient(eq.eigenvectors[:, idx_u])
    y_s = orient(eq.eigenvectors[:, idx_s])
    y_ss = orient(eq.eigenvectors[:, idx_ss])
    return eq.state, (float(re[idx_u]), float(re[idx_s]), float(re[idx_ss])), \
        (y_u, y_s, y_ss)


def _x1_segment(p, k, delta1, section, t_max=400.0):
    """Manifold branch from the saddle to its k-th downward section crossing.

    Returns (trajectory, crossing time, crossing state).
    """
    x0, rates, (y_u, y_s, y_ss) = _saddle_frame(p)
    horizon = t_max
    for _ in range(3):
        tr = integrate(lmg_vector_field(p), x0 - delta1 * y_u,
                       (0.0, horizon), rtol=1e-11, atol=1e-13)
        crossings = poincare_crossings(tr, component=2, value=section,
                                       direction=-1)
        if len(crossings) > k:
            break
        horizon *= 2.0
    if len(crossings) < k:
        raise SegmentSolveError(
            f"only {len(crossings)} downward section crossings, need {k}")
    c = crossings[k - 1]
    return tr, c.time, np.asarray(c.state, dtype=float)


def _resample(tr, t0, t1, m):
    ts = np.linspace(t0, t1, m + 1)
    return tr.sol(ts).T.copy()


def _lin_x2_build(p, m, x1_end, v, x_eq, y_s, y_ss, delta2, lam=None):
    """Homoclinic Step-2 system: matching + end circle + Lin condition.

    Unknown layout [X_0..X_m, T2, Phi, eps]; lam (if given) overrides the
    coupling of p.
    """
    q = p if lam is None else replace(p, lambda_plus=float(lam))

    def build(z):
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        T2, Phi, eps = z[-3], z[-2], z[-1]
        h = T2 / m
        n = z.size
        R = np.zeros(3 * m + 6)
        J = np.zeros((3 * m + 6, n))
        for j in range(m):
            xe, Mj = _flow_var(q, X[j], h)
            R[3 * j:3 * j + 3] = xe - X[j + 1]
            J[3 * j:3 * j + 3, 3 * j:3 * j + 3] = Mj
            J[3 * j:3 * j + 3, 3 * (j + 1):3 * (j + 1) + 3] = -np.eye(3)
            J[3 * j:3 * j + 3, n - 3] = lmg_rhs(xe, q) / m
        target = x_eq + delta2 * (y_s * np.cos(Phi) + y_ss * np.sin(Phi))
        R[3 * m:3 * m + 3] = X[m] - target
        J[3 * m:3 * m + 3, 3 * m:3 * m + 3] = np.eye(3)
        J[3 * m:3 * m + 3, n - 2] = \
            -delta2 * (-y_s * np.sin(Phi) + y_ss * np.cos(Phi))
        R[3 * m + 3:] = X[0] - (x1_end + eps * v)
        J[3 * m + 3:, 0:3] = np.eye(3)
        J[3 * m + 3:, n - 1] = -v
        return R, J
    return build


def _lin_solve_homoclinic_at(p, lam, k, delta1, delta2, section, m2,
                             z_guess=None, v_frozen=None):
    """Solve the two-segment Lin system at fixed coupling; returns
    (eps, z, context) where context carries the frame and x1 data."""
    q = replace(p, lambda_plus=float(lam))
    x_eq, rates, (y_u, y_s, y_ss) = _saddle_frame(q)
    tr, t_k, x1_end = _x1_segment(q, k, delta1, section)
    if v_frozen is not None:
        v = v_frozen
    else:
        # in-section direction toward the symmetry axis, frozen by the
        # caller across the sweep so the gap is measured consistently
        axis_pt = np.array([0.0, 0.0, section])
        v = axis_pt - x1_end
        v[2] = 0.0
        nv = np.linalg.norm(v)
        if nv < 1e-10:
            raise SegmentSolveError("section crossing on the symmetry axis")
        v = v / nv

    if z_guess is None:
        # follow the manifold past the crossing to the entry into the
        # delta2-ball around the saddle
        ts = np.linspace(t_k, tr.times[-1], 6000)
        d = np.linalg.norm(tr.sol(ts).T - x_eq, axis=1)
        inside = np.where(d < delta2)[0]
        if len(inside) == 0:
            j = int(np.argmin(d))
        else:
            j = int(inside[0])
        t_end = ts[j]
        X = _resample(tr, t_k, t_end, m2)
        T2 = t_end - t_k
        offs = X[m2] - x_eq
        Phi0 = float(np.arctan2(np.dot(offs, y_ss), np.dot(offs, y_s)))
        z_guess = np.concatenate([X.ravel(), [T2, Phi0, 0.0]])

    build = _lin_x2_build(q, m2, x1_end, v, x_eq, y_s, y_ss, delta2)
    z = _newton(build, z_guess, tol=1e-10, maxiter=30)
    eps = float(z[-1])
    ctx = {"x_eq": x_eq, "rates": rates, "frame": (y_u, y_s, y_ss),
           "x1_traj": tr, "t_k": t_k, "x1_end": x1_end, "v": v}
    return eps, z, ctx


def lin_find_homoclinic(p, label="0", scan=None, delta1=1e-5, delta2=1e-2,
                        section=-0.4, m2=12, tol=1e-12) -> HomoclinicResult:
    """Homoclinic orbit to the normal saddle with the given finite label.

    label is the symbol word of the connection ("0", "01", "011", ...);
    its length fixes which downward section crossing ends the first
    segment.  scan is an iterable of coupling values to bracket the sign
    change of the Lin gap; a default window suits the reference setup.
    Returns the refined coupling, both segments, and the assembled orbit.
    """
    k = len(label)
    if k < 1 or set(label) - {"0", "1"}:
        raise ValueError("label must be a nonempty bit string")
    if scan is None:
        scan = {
            1: np.linspace(1.5315, 1.5325, 5),
            2: np.linspace(1.53280, 1.53292, 5),
            3: np.linspace(1.53280, 1.53290, 6),
            4: np.linspace(1.532822, 1.532830, 9),
        }.get(k)
        if scan is None:
            raise ValueError("no default scan window for this label length")
    scan = list(scan)

    eps_vals = []
    zs = []
    z = None
    v_frozen = None
    for lam in scan:
        eps, z, ctx = _lin_solve_homoclinic_at(
            p, lam, k, delta1, delta2, section, m2, z_guess=z,
            v_frozen=v_frozen)
        v_frozen = ctx["v"]
        eps_vals.append(eps)
        zs.append(z)
    brackets = [(i,) for i in range(len(scan) - 1)
                if eps_vals[i] * eps_vals[i + 1] < 0]
    if not brackets:
        raise SegmentSolveError(
            f"no Lin-gap sign change over scan {scan[0]}..{scan[-1]}; "
            f"gaps {eps_vals}")
    # the gap can jump sign across a discontinuity when longer words
    # crowd the window, so refine every bracket until one closes
    lam_star = None
    eps_c = np.inf
    for (i,) in brackets:
        la, lb = scan[i], scan[i + 1]
        ea, eb = eps_vals[i], eps_vals[i + 1]
        z = zs[i]
        # secant with bisection safeguard
        for _ in range(80):
            lm = la - ea * (lb - la) / (eb - ea)
            if not (min(la, lb) < lm < max(la, lb)):
                lm = 0.5 * (la + lb)
            em, z, ctx = _lin_solve_homoclinic_at(
                p, lm, k, delta1, delta2, section, m2, z_guess=z,
                v_frozen=v_frozen)
            if abs(lb - la) < tol or em == 0.0:
                la, ea = lm, em
                break
            if ea * em < 0:
                lb, eb = lm, em
            else:
                la, ea = lm, em
        cand = la if abs(ea) < abs(eb) else lb
        eps_c, z, ctx = _lin_solve_homoclinic_at(
            p, cand, k, delta1, delta2, section, m2, z_guess=z,
            v_frozen=v_frozen)
        if abs(eps_c) < 1e-8:
            lam_star, eps_star = cand, eps_c
            break
    if lam_star is None:
        raise SegmentSolveError(
            f"Lin gap root did not close; smallest residual gap {eps_c}")

    m = m2
    X2 = z[:3 * (m + 1)].reshape(m + 1, 3)
    T2 = float(z[-3])
    tr = ctx["x1_traj"]
    t_k = ctx["t_k"]
    n1 = 400
    ts1 = np.linspace(0.0, t_k, n1)
    states1 = tr.sol(ts1).T
    x1_seg = OrbitSegment(ts1 / t_k, states1, float(t_k), "lin-x1")
    x2_seg = OrbitSegment(np.linspace(0, 1, m + 1), X2, T2, "lin-x2")
    ts2 = t_k + np.linspace(0.0, T2, 200)
    states2 = _dense_segment(replace(p, lambda_plus=float(lam_star)),
                             X2, T2, 200)
    times = np.concatenate([ts1, ts2])
    states = np.vstack([states1, states2])
    return HomoclinicResult(
        lambda_plus=float(lam_star), label=label, x1=x1_seg, x2=x2_seg,
        epsilon=eps_star, delta1=delta1, delta2=delta2,
        lin_vector=ctx["v"], section_value=section,
        times=times, states=states)


def _dense_segment(p, X, T, n):
    """Sample the shooting solution densely by re-flowing each segment."""
    m = X.shape[0] - 1
    h = T / m
    f = lmg_vector_field(p)
    out = []
    per = max(2, n // m)
    for j in range(m):
        sol = solve_ivp(f, (0.0, h), X[j], method="DOP853",
                        rtol=_FLOW_RTOL, atol=_FLOW_ATOL, dense_output=True)
        tj = np.linspace(0.0, h, per, endpoint=(j == m - 1))
        out.append(sol.sol(tj).T)
    return np.vstack(out)


# ---------------------------------------------------------------------------
# saddle periodic orbit and EtoP connections

def sro_from_manifold(p, n_nodes=12) -> PeriodicOrbitSolution:
    """Saddle periodic orbit on the b_x > 0 side, seeded from a loop of
    the unstable manifold between two consecutive high maxima."""
    from .integrate import extrema_events
    tr = integrate(lmg_vector_field(p),
                   _saddle_frame(p)[0] - 1e-5 * _saddle_frame(p)[2][0],
                   (0.0, 3000.0), rtol=1e-11, atol=1e-13)
    evs = [e for e in extrema_events(tr, component=0,
                                     exclusion_halfwidth=0.2)
           if e.symbol == 1]
    pair = None
    for a, b in zip(evs, evs[1:]):
        if b.time - a.time < 80.0:
            pair = (a.time, b.time)
            break
    if pair is None:
        raise SegmentSolveError("no consecutive positive loops on branch")
    X = _resample(tr, pair[0], pair[1], n_nodes)
    sol = solve_periodic(p, X, pair[1] - pair[0])
    if np.max(np.abs(sol.multipliers)) < 1.0 + 1e-6:
        raise SegmentSolveError("converged to a stable orbit, not the saddle")
    return sol


def _sro_anchor(po):
    """Fixed-phase point on the saddle orbit: b_y upward crossing with
    b_x > 0, together with the stable Floquet vector there."""
    p = po.p
    seg = po.segment
    f = lmg_vector_field(p)
    sol = solve_ivp(f, (0.0, po.period), seg.states[0], method="DOP853",
                    rtol=_FLOW_RTOL, atol=_FLOW_ATOL, dense_output=True)
    ts = np.linspace(0.0, po.period, 2000)
    ys = sol.sol(ts)
    crossings = []
    for a, b in zip(range(len(ts) - 1), range(1, len(ts))):
        if ys[1, a] < 0 <= ys[1, b] and ys[0, a] > 0:
            crossings.append(ts[a])
    if not crossings:
        raise SegmentSolveError("no phase anchor found on the orbit")
    t0 = crossings[0]
    t1 = t0 + (po.period / 1999)
    ta = brentq(lambda t: sol.sol(t)[1], t0, t1, xtol=1e-13)
    p0 = sol.sol(ta)
    # monodromy at the anchor
    _, M = _flow_var(p, p0, po.period)
    mult, vec = np.linalg.eig(M)
    order = np.argsort(-np.abs(mult))
    mult, vec = mult[order], vec[:, order]
    k = int(np.argmin(np.abs(mult)))
    w = np.real(vec[:, k])
    w = w / np.linalg.norm(w)
    for c in w:
        if abs(c) > 1e-12:
            if c < 0:
                w = -w
            break
    return np.asarray(p0, float), w, mult


def _etop_x2_build(p, m, x1_end, v, p0, w_s, lam=None):
    """EtoP Step-2 system; unknowns [X_0..X_m, T2, log_delta2, eps]."""
    q = p if lam is None else replace(p, lambda_plus=float(lam))

    def build(z):
        X = z[:3 * (m + 1)].reshape(m + 1, 3)
        T2, logd, eps = z[-3], z[-2], z[-1]
        if not np.all(np.isfinite(z)) or abs(logd) > 50.0 \
                or not 0.0 < T2 < 2000.0:
            raise SegmentSolveError("trial point out of range")
        d2 = np.exp(logd)
        h = T2 / m
        n = z.size
        R = np.zeros(3 * m + 6)
        J = np.zeros((3 * m + 6, n))
        for j in range(m):
            xe, Mj = _flow_var(q, X[j], h)
            R[3 * j:3 * j + 3] = xe - X[j + 1]
            J[3 * j:3 * j + 3, 3 * j:3 * j + 3] = Mj
            J[3 * j:3 * j + 3, 3 * (j + 1):3 * (j + 1) + 3] = -np.eye(3)
            J[3 * j:3 * j + 3, n - 3] = lmg_rhs(xe, q) / m
        R[3 * m:3 * m + 3] = X[m] - (p0 + d2 * w_s)
        J[3 * m:3 * m + 3, 3 * m:3 * m + 3] = np.eye(3)
        J[3 * m:3 * m + 3, n - 2] = -d2 * w_s
        R[3 * m + 3:] = X[0] - (x1_end + eps * v)
        J[3 * m + 3:, 0:3] = np.eye(3)
        J[3 * m + 3:, n - 1] = -v
        return R, J
    return build


def _sro_at(q, po_guess=None):
    """Saddle orbit at q, warm-restarted from a neighbour when possible.

    Manifold seeding only works where the manifold happens to make two
    consecutive positive loops, so fall back to a ladder of couplings
    where it does and carry the orbit over by periodic shooting.
    """
    if po_guess is not None:
        seg = po_guess.segment
        po = solve_periodic(q, seg.states, seg.T)
        if np.max(np.abs(po.multipliers)) < 1.0 + 1e-6:
            raise SegmentSolveError("saddle orbit lost during restart")
        return po
    try:
        return sro_from_manifold(q)
    except SegmentSolveError:
        pass
    for lam0 in (1.5328, 1.53285, 1.5329):
        try:
            po = sro_from_manifold(replace(q, lambda_plus=lam0))
        except SegmentSolveError:
            continue
        try:
            seg = po.segment
            po2 = solve_periodic(q, seg.states, seg.T)
        except SegmentSolveError:
            continue
        if np.max(np.abs(po2.multipliers)) > 1.0 + 1e-6:
            return po2
    raise SegmentSolveError("no saddle orbit seed near this coupling")


def _etop_solve_at(p, lam, delta1, section, m2, z_guess=None, po_guess=None,
                   d2_seed=1e-3, v_frozen=None):
    q = replace(p, lambda_plus=float(lam))
    po = _sro_at(q, po_guess)
    p0, w_s, mult = _sro_anchor(po)
    if z_guess is not None:
        # keep the Floquet offset on the same side as the carried guess,
        # or the corrector kills delta2 instead of crossing the orbit
        if np.dot(z_guess[3 * m2:3 * (m2 + 1)] - p0, w_s) < 0:
            w_s = -w_s
    tr, t1, x1_end = _x1_segment(q, 1, delta1, section)
    if v_frozen is not None:
        v = v_frozen
    else:
        axis_pt = np.array([0.0, 0.0, section])
        v = axis_pt - x1_end
        v[2] = 0.0
        v = v / np.linalg.norm(v)

    if z_guess is None:
        # backward flight from just off the orbit down to the section;
        # of all forward-downward crossings keep the one nearest the
        # manifold endpoint, the earlier ones can sit half a phase away
        f = lmg_vector_field(q)
        best = None
        sols = {}
        for sign in (+1.0, -1.0):
            x_end = p0 + sign * d2_seed * w_s
            sol = solve_ivp(f, (0.0, -400.0), x_end, method="DOP853",
                            rtol=1e-11, atol=1e-13, dense_output=True)
            sols[sign] = sol
            ts = np.linspace(0.0, sol.t[-1], 8000)
            ys = sol.sol(ts)
            hits = np.where((ys[2, :-1] - section)
                            * (ys[2, 1:] - section) < 0)[0]
            for h in hits:
                state = ys[:, h]
                if lmg_rhs(state, q)[2] < 0:
                    gap = np.linalg.norm(state[:2] - x1_end[:2])
                    if best is None or gap < best[0]:
                        best = (gap, sign, ts[h], ts[h + 1])
        if best is None:
            raise SegmentSolveError("backward seed never reached the section")
        _, sign, tb0, tb1 = best
        sol = sols[sign]
        t_hit = brentq(lambda t: sol.sol(t)[2] - section, tb0, tb1,
                       xtol=1e-12)
        X = sol.sol(np.linspace(t_hit, 0.0, m2 + 1)).T.copy()
        T2 = -t_hit
        eps0 = float(np.dot(X[0] - x1_end, v))
        w_s = sign * w_s
        z_guess = np.concatenate([X.ravel(), [T2, np.log(d2_seed), eps0]])
    # sliding the arrival phase along the orbit moves the section point
    # slowly, so allow a long damped crawl
    build = _etop_x2_build(q, m2, x1_end, v, p0, w_s)
    z = _newton(build, z_guess, tol=1e-10, maxiter=80)
    ctx = {"po": po, "p0": p0, "w_s": w_s, "x1_traj": tr, "t_k": t1,
           "x1_end": x1_end, "v": v, "multipliers": mult}
    return float(z[-1]), z, ctx


def lin_find_etop(p, side="plus", sequence="01", scan=None, delta1=1e-5,
                  section=-0.4, m2=12, tol=1e-12) -> EtoPResult:
    """Connection from the normal saddle to the saddle periodic orbit.

    The manifold branch is carried to its first downward section crossing
    and matched, across a Lin gap, to a segment that lands on the stable
    Floquet direction of the b_x > 0 saddle orbit; the end offset delta2
    is a free unknown.  Only the "plus"-side orbit with tail label 1 is
    in scope, reached by the negative manifold branch after one crossing.
    """
    if side != "plus":
        raise ValueError("only the b_x > 0 orbit is supported")
    if scan is None:
        scan = np.linspace(1.53278, 1.53288, 6)
    scan = list(scan)
    eps_vals = []
    zs = []
    pos = []
    z = None
    po = None
    v_frozen = None
    for lam in scan:
        try:
            eps, z, ctx = _etop_solve_at(p, lam, delta1, section, m2,
                                         z_guess=z, po_guess=po,
                                         v_frozen=v_frozen)
        except SegmentSolveError:
            # a scan point can refuse to converge off the connection;
            # drop it and reseed the next one
            eps, z = np.nan, None
            eps_vals.append(eps)
            zs.append(None)
            pos.append(po)
            continue
        po = ctx["po"]
        v_frozen = ctx["v"]
        eps_vals.append(eps)
        zs.append(z)
        pos.append(po)
    # fill failed scan points from converged neighbours on either side
    for order in (range(len(scan)), range(len(scan) - 1, -1, -1)):
        carry = None
        for i in order:
            if np.isfinite(eps_vals[i]):
                carry = (zs[i], pos[i])
            elif carry is not None:
                try:
                    eps, z2, ctx = _etop_solve_at(
                        p, scan[i], delta1, section, m2, z_guess=carry[0],
                        po_guess=carry[1], v_frozen=v_frozen)
                except SegmentSolveError:
                    continue
                eps_vals[i], zs[i], pos[i] = eps, z2, ctx["po"]
                carry = (z2, ctx["po"])
    # bracket on consecutive converged entries, holes allowed between
    finite = [i for i in range(len(scan)) if np.isfinite(eps_vals[i])]
    bracket = None
    for i, j in zip(finite, finite[1:]):
        if eps_vals[i] * eps_vals[j] < 0:
            bracket = (scan[i], scan[j], eps_vals[i], eps_vals[j])
            z, po = zs[i], pos[i]
            break
    if bracket is None:
        raise SegmentSolveError(
            f"no Lin-gap sign change over scan; gaps {eps_vals}")
    la, lb, ea, eb = bracket
    best = None
    for _ in range(80):
        lm_s = la - ea * (lb - la) / (eb - ea)
        if not (min(la, lb) < lm_s < max(la, lb)):
            lm_s = 0.5 * (la + lb)
        em = None
        for lm in (lm_s, 0.5 * (lm_s + la), 0.5 * (lm_s + lb)):
            try:
                em, z, ctx = _etop_solve_at(p, lm, delta1, section, m2,
                                            z_guess=z, po_guess=po,
                                            v_frozen=v_frozen)
                break
            except SegmentSolveError:
                continue
        if em is None:
            break
        po = ctx["po"]
        if best is None or abs(em) < abs(best[1]):
            best = (lm, em, z, ctx)
        if abs(lb - la) < tol or em == 0.0:
            break
        if ea * em < 0:
            lb, eb = lm, em
        else:
            la, ea = lm, em
    if best is None:
        raise SegmentSolveError("Lin gap refinement never converged")
    lam_star, eps_star, z, ctx = best
    m = m2
    X2 = z[:3 * (m + 1)].reshape(m + 1, 3)
    T2 = float(z[-3])
    d2 = float(np.exp(z[-2]))
    tr = ctx["x1_traj"]
    t_k = ctx["t_k"]
    ts1 = np.linspace(0.0, t_k, 400)
    states1 = tr.sol(ts1).T
    states2 = _dense_segment(replace(p, lambda_plus=float(lam_star)),
                             X2, T2, 200)
    times = np.concatenate([ts1, t_k + np.linspace(0.0, T2, 200)])
    return EtoPResult(
        lambda_plus=float(lam_star), label=sequence,
        x1=OrbitSegment(ts1 / t_k, states1, float(t_k), "lin-x1"),
        x2=OrbitSegment(np.linspace(0, 1, m + 1), X2, T2, "lin-x2-etop"),
        orbit=ctx["po"], epsilon=eps_star, delta2=d2,
        lin_vector=ctx["v"], section_value=section,
        times=times, states=np.vstack([states1, states2]))


# ---------------------------------------------------------------------------
# one-parameter diagram

def bif_diagram(p, lambda_plus_range=(1.3, 1.8), n_grid=60) -> BifDiagram:
    """Branches and events of the one-parameter slice at fixed lambda_minus.

    Assembles the normal and superradiant equilibrium branches, the
    symmetric lasing family split at its orbit pitchfork into stable and
    unstable parts, the symmetry-broken family down through its first
    period doublings, and the saddle orbit born at the homoclinic
    bifurcation.  Connection events (homoclinic) are estimated from the
    period blowup of the unstable families; Lin refinement is a separate,
    more expensive call.
    """
    from .localbif import pitchfork_lambda_plus
    lo, hi = lambda_plus_range
    branches = []
    events = []
    notes = []

    # normal branch: state constant, pitchforks from the closed form via
    # continuation events
    q0 = replace(p, lambda_plus=lo)
    nq = normal_equilibrium(q0)
    n_branch = _continue_equilibrium(
        nq, q0, {"range": (lo, hi), "direction": +1, "initial_step": 4e-3,
                 "max_step": 8e-3, "branch_id": "N", "max_steps": 400})
    branches.append(n_branch)
    events.extend(n_branch.events)

    # superradiant branch seeded between the pitchforks
    pf = pitchfork_lambda_plus(p, p.lambda_minus)
    if len(pf) == 2:
        mid = 0.5 * (pf[0] + pf[1])
        qs = replace(p, lambda_plus=mid)
        srs = superradiant_equilibria(qs)
        if srs:
            sr = srs[0]
            up = _continue_equilibrium(
                sr, qs, {"range": (lo, hi), "direction": +1,
                         "initial_step": 2e-3, "max_step": 6e-3,
                         "branch_id": "SR", "min_amplitude": 5e-4,
                         "max_steps": 400})
            down = _continue_equilibrium(
                sr, qs, {"range": (lo, hi), "direction": -1,
                         "initial_step": 2e-3, "max_step": 6e-3,
                         "branch_id": "SR", "min_amplitude": 5e-4,
                         "max_steps": 400})
            sr_branch = Branch(
                "SR", "equilibrium",
                list(reversed(down.points)) + up.points,
                down.events + up.events,
                f"down: {down.note}; up: {up.note}")
            branches.append(sr_branch)
            events.extend(sr_branch.events)
        else:
            notes.append("superradiant seed failed between pitchforks")
    else:
        notes.append("no pitchfork pair at this lambda_minus")

    # symmetric lasing family from the stable attractor well above the
    # transitional window
    lam_seed = min(hi - 1e-3, 1.534)
    try:
        po = periodic_from_attractor(replace(p, lambda_plus=lam_seed))
        sym_down = _continue_periodic(po, {
            "range": (lo, hi), "direction": -1, "initial_step": 5e-4,
            "max_step": 2e-3, "branch_id": "CL_sym", "max_period": 320.0,
            "max_steps": 700, "period_weight": 0.005})
        sym_up = _continue_periodic(po, {
            "range": (lo, hi), "direction": +1, "initial_step": 2e-3,
            "max_step": 8e-3, "branch_id": "CL_sym", "max_steps": 300,
            "refine_events": False})
        ppo = [e for e in sym_down.events if e.kind == "PPO"]
        split = ppo[0].lambda_plus if ppo else None
        pts_all = list(reversed(sym_down.points))[:-1] + sym_up.points
        if split is None:
            branches.append(Branch("CL_s", "periodic", pts_all,
                                   sym_down.events, sym_down.note))
        else:
            cl_u = [pt for pt in pts_all if pt.lambda_plus < split]
            cl_s = [pt for pt in pts_all if pt.lambda_plus >= split]
            branches.append(Branch("CL_u", "periodic", cl_u, [],
                                   sym_down.note))
            branches.append(Branch("CL_s", "periodic", cl_s,
                                   sym_down.events, sym_up.note))
        events.extend(sym_down.events)
        tail = sym_down.points[-1] if sym_down.points else None
        if tail is not None and tail.period is not None \
                and tail.period > 200.0:
            fit = _fit_homoclinic_lambda(sym_down.points)
            lam_h = fit[0] if fit is not None else tail.lambda_plus
            events.append(BifurcationEvent(
                "homoclinic", lam_h, "CL_u",
                {"period": tail.period, "lambda_tail": tail.lambda_plus,
                 "method": "log-period fit to the symmetric family"}))
        # symmetry-broken family from the PPO
        if split is not None:
            for b in _asym_family(p, sym_down, split, lo):
                branches.append(b)
                events.extend(b.events)
    except SegmentSolveError as err:
        notes.append(f"lasing family failed: {err}")

    # saddle orbit born at the homoclinic point
    try:
        sro = _sro_at(replace(p, lambda_plus=1.5328))
        sro_up = _continue_periodic(sro, {
            "range": (lo, min(hi, 1.54)), "direction": +1,
            "initial_step": 5e-4, "max_step": 2e-3, "branch_id": "SRO_u",
            "max_steps": 200, "refine_events": False})
        sro_down = _continue_periodic(sro, {
            "range": (lo, hi), "direction": -1, "initial_step": 3e-4,
            "max_step": 1e-3, "branch_id": "SRO_u", "max_period": 320.0,
            "max_steps": 200, "refine_events": False})
        branches.append(Branch(
            "SRO_u", "periodic",
            list(reversed(sro_down.points))[:-1] + sro_up.points, [],
            f"down: {sro_down.note}; up: {sro_up.note}"))
    except SegmentSolveError as err:
        notes.append(f"saddle orbit failed: {err}")

    events.sort(key=lambda e: e.lambda_plus)
    return BifDiagram(p=p, lambda_minus=p.lambda_minus, branches=branches,
                      events=events, notes=notes)


def _asym_family(p, sym_down, split, lo):
    """Branch-switch at the orbit pitchfork and continue downward through
    the first period doubling; then follow the doubled orbit to its own."""
    # the split-off pair attracts between its first period doubling and
    # the PPO, so catch it by integration in that window; the pitchfork
    # opens too steeply for eigenvector kicks to reach it
    donor = None
    for pt in sym_down.points:
        if pt.lambda_plus < split and \
                (donor is None or pt.lambda_plus > donor.lambda_plus):
            donor = pt
    if donor is None or donor.data is None:
        return []
    s_kick = donor.data.segment.states[0] + np.array([5e-4, 0.0, 0.0])
    asym_po = None
    for dlam in (3e-5, 6e-5, 1e-4):
        q = replace(p, lambda_plus=split - dlam)
        try:
            trial = periodic_from_attractor(q, s0=s_kick, t_settle=6000.0)
        except SegmentSolveError:
            continue
        if not trial.symmetric and trial.stability == "stable":
            asym_po = trial
            break
    if asym_po is None:
        return []
    # the period climbs ~5e4 per unit lambda here, so measure arclength
    # mostly in T and keep the natural hop tiny
    lo_a = max(lo, split - 2e-4)
    br = _continue_periodic(asym_po, {
        "range": (lo_a, split), "direction": -1, "first_hop": 2e-6,
        "initial_step": 0.05, "max_step": 0.2, "period_weight": 1.0,
        "branch_id": "CL_s_asym", "max_steps": 160, "max_period": 400.0})
    out = [Branch("CL_s_asym", "periodic", list(reversed(br.points)),
                  list(br.events), br.note)]
    pd = [e for e in br.events if e.kind == "PD"]
    if pd:
        # follow the doubled orbit from just below PD_1 to find PD_2
        lam_pd = pd[0].lambda_plus
        src = None
        for pt in br.points:
            if pt.lambda_plus < lam_pd and (src is None or
                                            pt.lambda_plus > src.lambda_plus):
                src = pt
        if src is not None and src.data is not None:
            # the doubled orbit is the attractor in the short window below
            # PD_1, so catch it by integration there; kick along the
            # doubling eigenvector, anything else drifts into an SR sink
            fl = floquet(src.data)
            kv = int(np.argmin(np.abs(fl.multipliers + 1.0)))
            v_pd = np.real(fl.vectors[:, kv])
            v_pd = v_pd / np.linalg.norm(v_pd)
            dbl = None
            for off in (2.5e-6, 4e-6, 6e-6):
                qd = replace(p, lambda_plus=lam_pd - off)
                for amp in (1e-3, -1e-3):
                    try:
                        trial = periodic_from_attractor(
                            qd, s0=src.state + amp * v_pd,
                            t_settle=6000.0, n_nodes=24)
                    except SegmentSolveError:
                        continue
                    half = trial.segment.states
                    mh = (half.shape[0] - 1) // 2
                    if trial.stability == "stable" and \
                            np.max(np.abs(half[:mh] - half[mh:2 * mh])) \
                            > 1e-5:
                        dbl = trial
                        break
                if dbl is not None:
                    break
            if dbl is not None:
                br2 = _continue_periodic(dbl, {
                    "range": (max(lo_a, lam_pd - 3e-5), lam_pd),
                    "direction": -1, "first_hop": 5e-7,
                    "initial_step": 0.05, "max_step": 0.2,
                    "period_weight": 1.0, "branch_id": "CL_s_asym2",
                    "max_steps": 60, "max_period": 800.0})
                out.append(Branch(
                    "CL_s_asym2", "periodic", list(reversed(br2.points)),
                    [e for e in br2.events if e.kind == "PD"], br2.note))
    return out


def _fit_homoclinic_lambda(points, n_tail=10):
    """Estimate the connection point from period blowup along a branch.

    Near a homoclinic the period grows like a - b*log(lam - lam_h), so fit
    that form to the longest-period points, scanning the pole position and
    solving the remaining linear problem by least squares.
    """
    pts = [pt for pt in points if pt.period is not None]
    pts.sort(key=lambda pt: pt.period)
    pts = pts[-n_tail:]
    if len(pts) < 4:
        return None
    lams = np.array([pt.lambda_plus for pt in pts])
    periods = np.array([pt.period for pt in pts])
    lam_lo = lams.min()
    best = None
    for gap in np.geomspace(1e-7, 5e-3, 400):
        lam_h = lam_lo - gap
        A = np.column_stack([np.ones_like(periods), -np.log(lams - lam_h)])
        coef, rss, *_ = np.linalg.lstsq(A, periods, rcond=None)
        sse = float(rss[0]) if rss.size else \
            float(np.sum((A @ coef - periods) ** 2))
        if coef[1] > 0 and (best is None or sse < best[0]):
            best = (sse, lam_h, float(coef[1]))
    if best is None:
        return None
    return best[1], best[2]


# ---------------------------------------------------------------------------
# exports

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def branches_to_csv(branches, path, meta=None):
    """One row per branch point: id, coupling, amplitude, stability, period.

    The period cell is empty on equilibrium branches.  The first line is a
    '#'-prefixed JSON header.
    """
    rows = []
    for br in branches:
        for pt in br.points:
            rows.append([br.branch_id, repr(float(pt.lambda_plus)),
                         repr(float(pt.max_bx)), pt.stability,
                         "" if pt.period is None else
                         repr(float(pt.period))])
    _write_csv(path, dict(meta or {}),
               ["branch_id", "lambda_plus", "max_bx", "stability",
                "period"], rows)


def bif_events_to_csv(events, path, meta=None):
    """One row per detected bifurcation; diagnostics as a JSON cell."""
    rows = [[ev.kind, repr(float(ev.lambda_plus)),
             json.dumps(_jsonable(ev.diagnostics), sort_keys=True)]
            for ev in events]
    _write_csv(path, dict(meta or {}),
               ["kind", "lambda_plus", "diagnostics"], rows)


def connection_to_csv(result, path, meta=None):
    """Write a connecting orbit's assembled path as t, bx, by, gamma rows.

    Works for both connection kinds; the JSON header records the kind, the
    located coupling, and the sequence label.
    """
    m = dict(meta or {})
    m.setdefault("kind", "EtoP" if isinstance(result, EtoPResult)
                 else "homoclinic")
    m.setdefault("lambda_plus", float(result.lambda_plus))
    m.setdefault("label", result.label)
    rows = ([repr(float(t))] + [repr(float(v)) for v in s]
            for t, s in zip(result.times, result.states))
    _write_csv(path, m, ["t", "bx", "by", "gamma"], rows)


