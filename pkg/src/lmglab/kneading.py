"""Symbolic dynamics of the saddle's one-dimensional unstable manifold.

The negative branch of the manifold is integrated forward and its large
b_x excursions are encoded as bits: deep minima are 0, high maxima 1,
excursions inside the exclusion band are discarded.  The first n retained
bits form the kneading sequence whose binary value, kept as an exact
rational, is locally constant in parameter and jumps only at global
bifurcations.  Sweeps over the coupling then expose a staircase of
rational plateaus separated by spikes.
"""

from dataclasses import dataclass, replace
from fractions import Fraction
from multiprocessing import Pool

import numpy as np

from .integrate import Trajectory, _write_csv, extrema_events, integrate
from .localbif import normal_equilibrium, superradiant_equilibria
from .model import lmg_vector_field

_PARITY = np.diag([-1.0, -1.0, 1.0])


@dataclass(frozen=True)
class KneadingRecord:
    """Sweep result at one coupling value.

    K_n is None unless the full n symbols were retained.  terminal is
    "completed", "escaped-to-attractor" (trajectory entered a sink ball
    early), "horizon-exhausted", or "failed" when the integration itself
    errored out.
    """

    lambda_plus: float
    symbols: str
    K_n: Fraction | None
    n: int
    terminal: str


@dataclass(frozen=True)
class PlateauInterval:
    """Maximal parameter run of constant kneading invariant.

    Narrow interior departures (spikes at global bifurcations) are merged
    into the plateau and reported through spike_centers.
    """

    lambda_range: tuple
    K_value: Fraction
    left_sequence: str
    right_sequence: str
    spike_centers: tuple = ()

    @property
    def spike_center_estimate(self):
        return self.spike_centers[0] if self.spike_centers else None


def unstable_branch(p, delta1=1e-6, arc_budget=5000.0, rtol=1e-9,
                    atol=1e-11, stop_radius=1e-4) -> Trajectory:
    """Negative branch of the saddle's unstable manifold.

    Seeds at N_u - delta1 * y_u with the unstable eigenvector oriented to
    positive b_x, and integrates until arc_budget or until the state
    enters a ball of stop_radius around a stable superradiant equilibrium.
    The positive branch is the parity image (see parity_branch); it is
    never integrated separately.
    """
    eq = normal_equilibrium(p)
    if eq.stability != "saddle(1)":
        raise ValueError(
            f"normal state is {eq.stability}, need a 1D unstable manifold")
    k = int(np.argmax(np.real(eq.eigenvalues)))
    lam = eq.eigenvalues[k]
    if abs(lam.imag) > 1e-9 * max(1.0, abs(lam)):
        raise ValueError("unstable eigenvalue is complex")
    v = np.real(eq.eigenvectors[:, k])
    v = v / np.linalg.norm(v)
    # deterministic orientation: positive b_x (fall back along the vector)
    for comp in v:
        if abs(comp) > 1e-12:
            if comp < 0.0:
                v = -v
            break
    stop = [(e.state, stop_radius)
            for e in superradiant_equilibria(p) if e.stability == "sink"]
    return integrate(lmg_vector_field(p), eq.state - delta1 * v,
                     (0.0, arc_budget), rtol=rtol, atol=atol,
                     stop_points=stop or None)


def parity_branch(traj: Trajectory) -> Trajectory:
    """Parity image of a branch, sharing the dense interpolant.

    Valid because the flow commutes with the parity map, so the image of a
    trajectory is again a trajectory of the same field.
    """
    sol = traj.sol

    def flipped(t):
        return _PARITY @ np.asarray(sol(t))

    return replace(traj, states=traj.states @ _PARITY, sol=flipped)


def kneading_sequence(traj, n=12, w=0.2) -> str:
    """First n retained symbols of the trajectory's b_x excursions.

    Minima below -w give 0, maxima above +w give 1; extrema inside the
    band are discarded (strictly: |b_x| = w does not count).  Returns a
    shorter string when the trajectory ends first.
    """
    out = []
    for ev in extrema_events(traj, component=0, exclusion_halfwidth=w):
        if ev.symbol is None:
            continue
        out.append(str(ev.symbol))
        if len(out) == n:
            break
    return "".join(out)


def kneading_invariant(symbols, n=None) -> Fraction:
    """Exact binary value sum a_k 2^-k of an n-symbol sequence."""
    if n is None:
        n = len(symbols)
    if len(symbols) != n:
        raise ValueError(f"expected {n} symbols, got {len(symbols)}")
    if set(symbols) - {"0", "1"}:
        raise ValueError("symbols must be bits")
    return Fraction(int(symbols, 2), 2 ** n) if n else Fraction(0)


def limit_invariant(symbols) -> Fraction | None:
    """Invariant of the infinite extension of an eventually periodic sequence.

    Finds the shortest preperiod and period visible in the given symbols
    (requiring at least two full periods) and sums the geometric tail
    exactly.  Returns None when no periodic tail is visible.
    """
    n = len(symbols)
    for m in range(n):
        for q in range(1, (n - m) // 2 + 1):
            tail = symbols[m:]
            if all(tail[i] == tail[i + q] for i in range(len(tail) - q)):
                head = kneading_invariant(symbols[:m], m)
                block = Fraction(int(symbols[m:m + q], 2), 2 ** q)
                return head + block / (2 ** m * (1 - Fraction(1, 2 ** q)))
    return None


def negate_sequence(symbols) -> str:
    """Bitwise Boolean negation."""
    return "".join("1" if c == "0" else "0" for c in symbols)


def negate_map(left_sequence, prefix_len) -> str:
    """Right counterpart of a plateau-bounding sequence.

    Keeps the first prefix_len symbols and negates the rest; defined only
    when the symbol right after the prefix is 1.
    """
    k = int(prefix_len)
    if not 0 <= k < len(left_sequence):
        raise ValueError("prefix length out of range")
    if left_sequence[k] != "1":
        raise ValueError("symbol after the prefix must be 1")
    return left_sequence[:k] + negate_sequence(left_sequence[k:])


def _make_record(p, lambda_plus, n, w, delta1, horizon, stop_radius,
                 rtol, atol) -> KneadingRecord:
    q = replace(p, lambda_plus=float(lambda_plus))
    try:
        traj = unstable_branch(q, delta1=delta1, arc_budget=horizon,
                               rtol=rtol, atol=atol, stop_radius=stop_radius)
        symbols = kneading_sequence(traj, n=n, w=w)
    except Exception:
        return KneadingRecord(float(lambda_plus), "", None, n, "failed")
    if len(symbols) == n:
        terminal = "completed"
        K = kneading_invariant(symbols, n)
    else:
        terminal = "escaped-to-attractor" if traj.stopped \
            else "horizon-exhausted"
        K = None
    return KneadingRecord(float(lambda_plus), symbols, K, n, terminal)


def _sweep_worker(args):
    return _make_record(*args)


def sweep(p, lambda_plus_values, n=12, w=0.2, delta1=1e-6, horizon=5000.0,
          stop_radius=1e-4, rtol=1e-9, atol=1e-11, workers=None):
    """One KneadingRecord per coupling value, in input order.

    Points are independent; workers > 1 distributes them over processes
    and merges deterministically.  Failures at single points produce
    "failed" records instead of aborting the sweep.
    """
    jobs = [(p, lp, n, w, delta1, horizon, stop_radius, rtol, atol)
            for lp in lambda_plus_values]
    if workers is not None and workers > 1 and len(jobs) > 1:
        with Pool(processes=workers) as pool:
            return pool.map(_sweep_worker, jobs, chunksize=1)
    return [_make_record(*job) for job in jobs]


def detect_plateaus(records, evaluator=None, resolution=1e-7,
                    spike_points=2):
    """Maximal constant-K runs, with narrow spikes absorbed.

    Interior runs of at most spike_points records whose K differs from
    the surrounding common value are treated as spikes: merged into the
    plateau and reported by their center.  If evaluator (a callable
    lambda_plus -> KneadingRecord) is given, the boundary between
    adjacent plateaus is refined by bisection down to the given
    resolution in lambda_plus.
    """
    recs = sorted((r for r in records if r.K_n is not None),
                  key=lambda r: r.lambda_plus)
    if not recs:
        return []
    runs = []
    for r in recs:
        if runs and runs[-1][0] == r.K_n:
            runs[-1][1].append(r)
        else:
            runs.append((r.K_n, [r]))

    plateaus = []
    i = 0
    while i < len(runs):
        K, group = runs[i]
        group = list(group)
        spikes = []
        j = i + 1
        while j < len(runs):
            # gather consecutive non-K runs; absorb them if short and
            # followed by a return to K
            k = j
            count = 0
            spiked = []
            while k < len(runs) and runs[k][0] != K:
                count += len(runs[k][1])
                spiked.extend(runs[k][1])
                k += 1
            if k < len(runs) and 0 < count <= spike_points:
                spikes.append(float(np.mean([s.lambda_plus for s in spiked])))
                group.extend(runs[k][1])
                j = k + 1
            else:
                break
        plateaus.append([K, group, spikes])
        i = j

    out = []
    for K, group, spikes in plateaus:
        out.append(PlateauInterval(
            lambda_range=(group[0].lambda_plus, group[-1].lambda_plus),
            K_value=K,
            left_sequence=group[0].symbols,
            right_sequence=group[-1].symbols,
            spike_centers=tuple(spikes)))

    if evaluator is not None and len(out) > 1:
        refined = list(out)
        for idx in range(len(refined) - 1):
            left, right = refined[idx], refined[idx + 1]
            lo = left.lambda_range[1]
            hi = right.lambda_range[0]
            left_seq = left.right_sequence
            right_seq = right.left_sequence
            while hi - lo > resolution:
                mid = 0.5 * (lo + hi)
                rec = evaluator(mid)
                if rec.K_n == left.K_value:
                    lo, left_seq = mid, rec.symbols
                elif rec.K_n == right.K_value:
                    hi, right_seq = mid, rec.symbols
                else:
                    # unknown K between plateaus; narrow from the right so
                    # the loop still terminates
                    hi = mid
            refined[idx] = replace(
                left, lambda_range=(left.lambda_range[0], lo),
                right_sequence=left_seq)
            refined[idx + 1] = replace(
                right, lambda_range=(hi, right.lambda_range[1]),
                left_sequence=right_seq)
        out = refined
    return out


def sweep_to_csv(records, path, meta=None):
    """Write sweep records with a '#'-prefixed JSON header line.

    Columns: lambda_plus, K_numerator, n, symbols, terminal.  K_numerator
    is the exact integer K_n * 2^n (empty for incomplete records), so the
    invariant is recoverable together with n.
    """
    rows = []
    for r in records:
        num = "" if r.K_n is None else str(int(r.K_n * (1 << r.n)))
        rows.append([repr(float(r.lambda_plus)), num, str(r.n),
                     r.symbols, r.terminal])
    _write_csv(path, dict(meta or {}),
               ["lambda_plus", "K_numerator", "n", "symbols", "terminal"],
               rows)


def plateaus_to_csv(plateaus, path, meta=None):
    """Write plateau intervals; K is the exact rational as num/den text."""
    rows = []
    for pl in plateaus:
        lo, hi = pl.lambda_range
        spike = pl.spike_center_estimate
        rows.append([repr(float(lo)), repr(float(hi)), str(pl.K_value),
                     pl.left_sequence, pl.right_sequence,
                     "" if spike is None else repr(float(spike))])
    _write_csv(path, dict(meta or {}),
               ["lo", "hi", "K", "left_seq", "right_seq", "spike_center"],
               rows)
