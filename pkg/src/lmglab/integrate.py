"""Adaptive integration with dense output and post-hoc event extraction.

All integrations use an eighth-order Runge-Kutta scheme with dense
output.  Events (component extrema, section crossings) are not located
during the solve; instead the dense interpolant is scanned on a fine
grid for sign changes of the relevant test function and each bracket is
polished with a root finder.  This keeps event logic out of the stepper
and makes the extracted times reproducible for a given trajectory.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from lmglab.model import ModelParams, lmg_jacobian, lmg_vector_field

__all__ = [
    "IntegrationError",
    "DegeneratePlaneError",
    "TransientEscapeWarning",
    "Trajectory",
    "ExtremumEvent",
    "PlaneCrossing",
    "LyapunovResult",
    "integrate",
    "extrema_events",
    "poincare_crossings",
    "lyapunov_max",
    "trajectory_to_csv",
    "events_to_csv",
]

# brentq cannot go below 4*eps relative
_BRENTQ_RTOL = 8.9e-16


class IntegrationError(RuntimeError):
    """Solver failure; t_fail holds the last time reached."""

    def __init__(self, message, t_fail=None):
        super().__init__(message)
        self.t_fail = t_fail


class DegeneratePlaneError(ValueError):
    """Section test function is identically zero along the trajectory."""


class TransientEscapeWarning(UserWarning):
    """Lyapunov run collapsed onto an equilibrium."""


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    sol: object
    rhs: object
    t_span: tuple
    rtol: float
    atol: float
    stopped: bool = False

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class ExtremumEvent:
    time: float
    value: float
    kind: str                   # "min" or "max"
    symbol: int | None          # 0 / 1, None when inside the exclusion band
    component: int = 0


@dataclass(frozen=True)
class PlaneCrossing:
    time: float
    state: np.ndarray
    direction: int              # +1 rising, -1 falling
    component: int = 0
    value: float = 0.0


@dataclass
class LyapunovResult:
    exponent: float
    stderr: float
    n_renorms: int
    log_growths: np.ndarray
    escaped: bool


def integrate(rhs, s0, t_span, rtol=1e-9, atol=1e-11, max_step=np.inf,
              stop_points=None) -> Trajectory:
    """Integrate y' = rhs(t, y) and keep the dense interpolant.

    stop_points is an optional list of (point, radius) pairs; entering
    any of the balls ends the run early and sets Trajectory.stopped.
    Raises IntegrationError if the stepper gives up (blow-up) or the
    solution turns non-finite.
    """
    s0 = np.asarray(s0, dtype=float)
    events = []
    if stop_points:
        for point, radius in stop_points:
            point = np.asarray(point, dtype=float)

            def hit(t, y, point=point, radius=radius):
                return float(np.dot(y - point, y - point) - radius * radius)

            hit.terminal = True
            hit.direction = -1
            events.append(hit)
    res = solve_ivp(rhs, t_span, s0, method="DOP853", dense_output=True,
                    rtol=rtol, atol=atol, max_step=max_step,
                    events=events or None)
    if res.status < 0:
        t_last = float(res.t[-1]) if res.t.size else t_span[0]
        raise IntegrationError(
            f"integration failed at t = {t_last:.6g}: {res.message}",
            t_fail=t_last)
    if not np.all(np.isfinite(res.y)):
        raise IntegrationError("solution lost finiteness",
                               t_fail=float(res.t[-1]))
    return Trajectory(times=res.t, states=res.y.T, sol=res.sol, rhs=rhs,
                      t_span=(float(t_span[0]), float(t_span[1])),
                      rtol=rtol, atol=atol, stopped=(res.status == 1))


def _test_values(traj: Trajectory, grid: np.ndarray, gfun, vector_gfun):
    """Evaluate the event test function, vectorized when possible."""
    if vector_gfun is not None:
        try:
            vals = np.asarray(vector_gfun(grid))
            if vals.shape == grid.shape:
                return vals
        except Exception:
            pass
    return np.array([gfun(t) for t in grid])


def _bracketed_roots(traj: Trajectory, gfun, vector_gfun, scan_dt):
    t0, t1 = traj.times[0], traj.times[-1]
    n = max(int(np.ceil((t1 - t0) / scan_dt)), 2)
    grid = np.linspace(t0, t1, n + 1)
    g = _test_values(traj, grid, gfun, vector_gfun)
    scale = np.max(np.abs(g)) if g.size else 0.0
    if scale < 1e-13:
        return None, None
    roots = []
    signs = np.sign(g)
    for i in range(len(grid) - 1):
        gi, gj = g[i], g[i + 1]
        if gi == 0.0:
            # grid point exactly on a root; keep it if interior and the
            # sign really changes across it
            if 0 < i and signs[i - 1] * signs[i + 1] < 0:
                roots.append((grid[i], g[i - 1], g[i + 1]))
            continue
        if gi * gj < 0.0:
            t_root = brentq(gfun, grid[i], grid[i + 1],
                            xtol=1e-13, rtol=_BRENTQ_RTOL)
            roots.append((t_root, gi, gj))
    # merge duplicates from adjacent brackets
    out = []
    for item in roots:
        if out and abs(item[0] - out[-1][0]) < 1e-9:
            continue
        out.append(item)
    return out, grid


def extrema_events(traj: Trajectory, component: int = 0,
                   exclusion_halfwidth: float = 0.0,
                   scan_dt: float = 0.25,
                   deriv_tol: float = 1e-13) -> list[ExtremumEvent]:
    """Locate extrema of one state component along a trajectory.

    A minimum deeper than -exclusion_halfwidth gets symbol 0, a maximum
    above +exclusion_halfwidth symbol 1 (strict inequalities); extrema
    inside the band are reported with symbol None.  Sign changes whose
    polished root has |d/dt rhs_component| below deriv_tol are treated
    as inflection noise and dropped.
    """

    def gfun(t):
        return float(np.asarray(traj.rhs(t, traj.sol(t)))[component])

    def vector_gfun(grid):
        ys = traj.sol(grid)
        return np.asarray(traj.rhs(grid[0], ys))[component]

    roots, _ = _bracketed_roots(traj, gfun, vector_gfun, scan_dt)
    if roots is None:
        return []
    events = []
    for t_root, g_left, g_right in roots:
        h = 1e-7 * max(1.0, abs(t_root))
        dg = (gfun(t_root + h) - gfun(t_root - h)) / (2.0 * h)
        if abs(dg) < deriv_tol:
            continue
        kind = "min" if g_left < 0.0 else "max"
        val = float(traj.sol(t_root)[component])
        if kind == "min":
            symbol = 0 if val < -exclusion_halfwidth else None
        else:
            symbol = 1 if val > exclusion_halfwidth else None
        events.append(ExtremumEvent(time=float(t_root), value=val, kind=kind,
                                    symbol=symbol, component=component))
    return events


def poincare_crossings(traj: Trajectory, component: int = 0,
                       value: float = 0.0, direction: int = 0,
                       scan_dt: float = 0.25) -> list[PlaneCrossing]:
    """Locate crossings of a coordinate plane x[component] = value.

    direction filters: +1 rising only, -1 falling only, 0 both.  Raises
    DegeneratePlaneError when the trajectory never leaves the plane.
    """

    def gfun(t):
        return float(traj.sol(t)[component] - value)

    def vector_gfun(grid):
        return traj.sol(grid)[component] - value

    roots, _ = _bracketed_roots(traj, gfun, vector_gfun, scan_dt)
    if roots is None:
        raise DegeneratePlaneError(
            f"trajectory stays on the plane component {component} = {value}")
    out = []
    for t_root, g_left, g_right in roots:
        d = +1 if g_left < 0.0 else -1
        if direction and d != direction:
            continue
        out.append(PlaneCrossing(time=float(t_root),
                                 state=np.asarray(traj.sol(t_root)),
                                 direction=d, component=component,
                                 value=value))
    return out


def _augmented_field(p: ModelParams):
    f = lmg_vector_field(p)

    def aug(t, y):
        x, v = y[:3], y[3:]
        return np.concatenate([f(t, x), lmg_jacobian(x, p) @ v])

    return aug


def lyapunov_max(p: ModelParams, s0, horizon=2000.0, renorm_interval=5.0,
                 rtol=1e-9, atol=1e-11, seed=0,
                 transient_fraction=0.2) -> LyapunovResult:
    """Largest Lyapunov exponent by tangent-vector renormalization.

    The tangent vector rides the linearization and is renormalized every
    renorm_interval; the first transient_fraction of the growth record
    is discarded.  The standard error comes from block averages of the
    per-interval growth rates.  A TransientEscapeWarning is issued when
    the base trajectory lands on an equilibrium, where the estimate
    degenerates to the leading eigenvalue.
    """
    aug = _augmented_field(p)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    x = np.asarray(s0, dtype=float).copy()
    n_chunks = int(np.ceil(horizon / renorm_interval))
    logs = np.empty(n_chunks)
    for k in range(n_chunks):
        res = solve_ivp(aug, (0.0, renorm_interval), np.concatenate([x, v]),
                        method="DOP853", rtol=rtol, atol=atol)
        if res.status != 0:
            raise IntegrationError("tangent integration failed",
                                   t_fail=k * renorm_interval)
        x = res.y[:3, -1]
        v = res.y[3:, -1]
        nrm = np.linalg.norm(v)
        logs[k] = np.log(nrm)
        v /= nrm
    keep = logs[int(transient_fraction * n_chunks):]
    exponent = float(np.sum(keep) / (len(keep) * renorm_interval))
    # block averaging tames the serial correlation of the growth record
    block = max(10, len(keep) // 20)
    n_blocks = len(keep) // block
    if n_blocks >= 2:
        means = keep[:n_blocks * block].reshape(n_blocks, block).mean(axis=1)
        stderr = float(np.std(means, ddof=1)
                       / (np.sqrt(n_blocks) * renorm_interval))
    else:
        stderr = float("nan")
    speed = float(np.linalg.norm(lmg_vector_field(p)(0.0, x)))
    escaped = speed < 1e-8
    if escaped:
        warnings.warn(
            f"trajectory settled on an equilibrium (|f| = {speed:.2e}); "
            "exponent reflects its leading eigenvalue",
            TransientEscapeWarning)
    return LyapunovResult(exponent=exponent, stderr=stderr,
                          n_renorms=n_chunks, log_growths=logs,
                          escaped=escaped)


_COLUMN_NAMES = {2: ["y0", "y1"], 3: ["bx", "by", "gamma"],
                 5: ["re_alpha", "im_alpha", "bx", "by", "gamma"]}


def _write_csv(path, meta, header, rows):
    buf = io.StringIO()
    buf.write("#" + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def trajectory_to_csv(traj: Trajectory, path, n_samples=2001, meta=None):
    """Sample the dense interpolant uniformly and write t + state columns.

    The first line is a '#'-prefixed JSON header; bodies are
    byte-identical across repeated calls with the same inputs.
    """
    meta = dict(meta or {})
    meta.setdefault("t_span", list(traj.t_span))
    meta.setdefault("rtol", traj.rtol)
    meta.setdefault("atol", traj.atol)
    ts = np.linspace(traj.times[0], traj.times[-1], n_samples)
    ys = traj.sol(ts)
    names = _COLUMN_NAMES.get(traj.dim,
                              [f"y{i}" for i in range(traj.dim)])
    rows = ([repr(float(t))] + [repr(float(v)) for v in ys[:, i]]
            for i, t in enumerate(ts))
    _write_csv(path, meta, ["t"] + names, rows)


def events_to_csv(events, path, meta=None):
    """Write extrema and crossings to one table.

    Columns: time, kind, value, tag.  For extrema the tag is the symbol
    (empty when excluded); for crossings it is the signed direction.
    """
    rows = []
    for ev in events:
        if isinstance(ev, ExtremumEvent):
            tag = "" if ev.symbol is None else str(ev.symbol)
            rows.append([repr(ev.time), ev.kind, repr(ev.value), tag])
        else:
            rows.append([repr(ev.time), "cross",
                         repr(float(ev.state[ev.component])),
                         str(ev.direction)])
    _write_csv(path, dict(meta or {}), ["time", "kind", "value", "tag"],
               rows)
