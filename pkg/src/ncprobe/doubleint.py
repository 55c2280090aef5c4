"""Minimum-time double integrator: dynamics, bang-bang expert, datasets.

The system is q'' = u with u in [-1, 1].  The closed-form minimum-time
feedback policy switches between full throttle and full brake on the parabola
q = -v|v|/2 and is implemented in :func:`optimal_control`.  An independent
dynamic-programming oracle (:class:`MinTimeGrid`) estimates the minimum time
to the origin by value iteration on a discretized state grid, for
cross-checking closed-loop rollout times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream, sample_in_ball

# Label encoding for the three controls, fixed across the package.
CONTROL_TO_LABEL = {1: 0, 0: 1, -1: 2}
LABEL_TO_CONTROL = {0: 1.0, 1: 0.0, 2: -1.0}


@dataclass(frozen=True)
class State2:
    """State (q, v) of the double integrator."""

    q: float
    v: float

    def norm(self) -> float:
        return math.hypot(self.q, self.v)


def optimal_control(x: State2) -> int:
    """Closed-form minimum-time feedback policy, in {+1, 0, -1}."""
    q, v = x.q, x.v
    if q == 0.0 and v == 0.0:
        return 0
    if (v < 0.0 and q <= 0.5 * v * v) or (v >= 0.0 and q < -0.5 * v * v):
        return 1
    return -1


def step(x: State2, u: float, dt: float) -> State2:
    """Exact integration over dt under piecewise-constant control."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(u) > 1.0 + 1e-12:
        raise ValueError(f"control magnitude {u} exceeds 1")
    return State2(x.q + x.v * dt + 0.5 * u * dt * dt, x.v + u * dt)


@dataclass
class RolloutResult:
    states: list[State2]
    controls: list[float]
    time: float
    reached: bool


def rollout(
    x0: State2,
    policy,
    dt: float = 1e-3,
    max_time: float = 100.0,
    eps: float = 0.02,
) -> RolloutResult:
    """Run a feedback policy until the state enters the eps-ball at the origin.

    Returns the trajectory and elapsed time; a timeout is reported through
    ``reached=False`` rather than an exception.
    """
    if dt <= 0 or eps <= 0:
        raise ValueError("dt and eps must be positive")
    states = [x0]
    controls: list[float] = []
    x = x0
    t = 0.0
    while True:
        if x.norm() <= eps:
            return RolloutResult(states, controls, t, True)
        if t >= max_time:
            return RolloutResult(states, controls, t, False)
        u = float(policy(x))
        x = step(x, u, dt)
        controls.append(u)
        states.append(x)
        t += dt


def analytic_min_time(x: State2) -> float:
    """Closed-form minimum time to the origin (used only as a test reference).

    For states right of the switching parabola (q > -v|v|/2) the optimal
    control brakes first: T = v + 2*sqrt(v^2/2 + q); the mirrored formula
    covers the other side, and on the parabola T = |v|.
    """
    q, v = x.q, x.v
    gamma = -0.5 * v * abs(v)
    if q > gamma:
        return v + 2.0 * math.sqrt(0.5 * v * v + q)
    if q < gamma:
        return -v + 2.0 * math.sqrt(0.5 * v * v - q)
    return abs(v)


# ---------------------------------------------------------------------------
# Dynamic-programming minimum-time oracle.
# ---------------------------------------------------------------------------

# Sentinel for states whose value has not (or cannot) be reached; large but
# finite so interpolated foot points still admit updates.
UNREACHED = 1e9

_KERNEL = None


def _sweep_kernel():
    """Compile the Gauss-Seidel value-iteration sweep (numba, lazy import)."""
    global _KERNEL
    if _KERNEL is not None:
        return _KERNEL
    import numba

    @numba.njit(cache=True, fastmath=False)
    def sweeps(V, frozen, dt, dq, v0, max_sweeps, tol):  # pragma: no cover - jitted
        n_i, n_j = V.shape
        for sweep in range(max_sweeps):
            delta = 0.0
            for order in range(4):
                i_rev = order % 2 == 1
                j_rev = order >= 2
                for ii in range(n_i):
                    i = n_i - 1 - ii if i_rev else ii
                    v = v0 + i * dt
                    # Foot-point column offsets for u = -1 (row below) and
                    # u = +1 (row above); v lands exactly on grid rows.
                    off_m = (v * dt - 0.5 * dt * dt) / dq
                    off_p = (v * dt + 0.5 * dt * dt) / dq
                    s_m = int(math.floor(off_m))
                    s_p = int(math.floor(off_p))
                    f_m = off_m - s_m
                    f_p = off_p - s_p
                    for jj in range(n_j):
                        j = n_j - 1 - jj if j_rev else jj
                        if frozen[i, j]:
                            continue
                        best = V[i, j]
                        # coast (u = 0): exact transit to the adjacent column
                        if v > 0.0 and j + 1 < n_j:
                            cand = dq / v + V[i, j + 1]
                            if cand < best:
                                best = cand
                        elif v < 0.0 and j - 1 >= 0:
                            cand = dq / (-v) + V[i, j - 1]
                            if cand < best:
                                best = cand
                        # bang controls (u = +-1): q interpolated at the foot
                        if i >= 1:
                            jf = j + s_m
                            if 0 <= jf and jf + 1 < n_j:
                                cand = dt + (1.0 - f_m) * V[i - 1, jf] + f_m * V[i - 1, jf + 1]
                                if cand < best:
                                    best = cand
                        if i + 1 < n_i:
                            jf = j + s_p
                            if 0 <= jf and jf + 1 < n_j:
                                cand = dt + (1.0 - f_p) * V[i + 1, jf] + f_p * V[i + 1, jf + 1]
                                if cand < best:
                                    best = cand
                        if best < V[i, j]:
                            ch = V[i, j] - best
                            if ch > delta:
                                delta = ch
                            V[i, j] = best
            if delta < tol:
                return sweep + 1
        return max_sweeps

    _KERNEL = sweeps
    return sweeps


class _GridLevel:
    """One value-iteration level on a regular (v, q) grid."""

    def __init__(self, q_extent, v_extent, dq, dt, max_sweeps, tol):
        self.dq = dq
        self.dt = dt
        self.n_i = int(round(2 * v_extent / dt)) + 1
        self.n_j = int(round(2 * q_extent / dq)) + 1
        self.v0 = -dt * ((self.n_i - 1) // 2)
        self.q0 = -dq * ((self.n_j - 1) // 2)
        self.v_max = self.v0 + dt * (self.n_i - 1)
        self.q_max = self.q0 + dq * (self.n_j - 1)
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.values = np.full((self.n_i, self.n_j), UNREACHED)
        self.frozen = np.zeros((self.n_i, self.n_j), dtype=np.uint8)

    def axes(self):
        v = self.v0 + self.dt * np.arange(self.n_i)
        q = self.q0 + self.dq * np.arange(self.n_j)
        return v, q

    def solve(self) -> int:
        kernel = _sweep_kernel()
        return int(
            kernel(self.values, self.frozen, self.dt, self.dq, self.v0, self.max_sweeps, self.tol)
        )

    def contains(self, q, v, margin=0.0):
        return (
            self.q0 + margin <= q <= self.q_max - margin
            and self.v0 + margin <= v <= self.v_max - margin
        )

    def interp(self, q, v) -> float:
        fi = (v - self.v0) / self.dt
        fj = (q - self.q0) / self.dq
        i0 = min(max(int(fi), 0), self.n_i - 2)
        j0 = min(max(int(fj), 0), self.n_j - 2)
        ai, aj = fi - i0, fj - j0
        m = self.values
        return float(
            (1 - ai) * ((1 - aj) * m[i0, j0] + aj * m[i0, j0 + 1])
            + ai * ((1 - aj) * m[i0 + 1, j0] + aj * m[i0 + 1, j0 + 1])
        )


@dataclass
class MinTimeGrid:
    """Two-level value-iteration table of approximate minimum times.

    Both levels share the same scheme: the v spacing equals the time step so
    bang controls land exactly on grid rows, only the q coordinate is
    interpolated (linearly), and the zero control is an exact transit to the
    adjacent q column.  Values start high and decrease monotonically under
    Gauss-Seidel sweeps with alternating orderings until converged.

    The fine inner level resolves the terminal region (where the trajectory
    curvature is far below the coarse cell size); its converged values are
    frozen into the coarse level as interior boundary conditions.  The coarse
    extents cover every optimal excursion from the radius-10 ball; braking
    from the worst start reaches |q| ~ 50.5 and |v| ~ 10.1.
    """

    q_extent: float = 52.0
    v_extent: float = 11.0
    dq: float = 0.025
    dt: float = 0.025
    fine_q_extent: float = 0.9
    fine_v_extent: float = 1.4
    fine_dq: float = 0.002
    fine_dt: float = 0.002
    # States are answered from the fine table only inside this box, chosen so
    # that the whole optimal excursion (|q| grows to at most |q| + v^2/2,
    # |v| to sqrt(v^2 + 2|q|)) stays inside the fine grid; the fine values
    # there are independent of anything outside it.
    fine_query_q: float = 0.45
    fine_query_v: float = 0.9
    eps: float = 0.02
    tol: float = 1e-9
    max_sweeps: int = 200
    sweeps_used: tuple = field(init=False)

    def __post_init__(self):
        fine = _GridLevel(
            self.fine_q_extent, self.fine_v_extent, self.fine_dq, self.fine_dt,
            self.max_sweeps, self.tol,
        )
        fv, fq = fine.axes()
        qq, vv = np.meshgrid(fq, fv)
        terminal = qq * qq + vv * vv <= self.eps * self.eps
        fine.values[terminal] = 0.0
        fine.frozen[terminal] = 1
        fine_sweeps = fine.solve()

        coarse = _GridLevel(
            self.q_extent, self.v_extent, self.dq, self.dt, self.max_sweeps, self.tol
        )
        cv, cq = coarse.axes()
        qq, vv = np.meshgrid(cq, cv)
        # Freeze coarse nodes inside the trusted fine box to the fine values;
        # they act as an accurate interior boundary for the coarse sweeps.
        inner = (np.abs(qq) <= self.fine_query_q) & (np.abs(vv) <= self.fine_query_v)
        ii, jj = np.nonzero(inner)
        for i, j in zip(ii, jj):
            coarse.values[i, j] = fine.interp(cq[j], cv[i])
        coarse.frozen[inner] = 1
        coarse_sweeps = coarse.solve()

        self._fine = fine
        self._coarse = coarse
        self.sweeps_used = (fine_sweeps, coarse_sweeps)

    def query(self, x: State2) -> float:
        """Interpolated minimum-time estimate at a state."""
        if abs(x.q) <= self.fine_query_q and abs(x.v) <= self.fine_query_v:
            out = self._fine.interp(x.q, x.v)
        elif self._coarse.contains(x.q, x.v):
            out = self._coarse.interp(x.q, x.v)
        else:
            raise ValueError(f"state {x} outside the oracle grid")
        if out >= UNREACHED * 1e-3:
            raise ValueError(f"oracle value not converged at {x}")
        return float(out)


_GRID_CACHE: dict[tuple, MinTimeGrid] = {}


def min_time_oracle(x0: State2, grid_resolution: float = 0.025, dt: float = 0.025) -> float:
    """Approximate minimum time to the origin from a DP value table.

    Grids are cached per (resolution, dt) because a single table answers any
    number of queries.
    """
    key = (grid_resolution, dt)
    if key not in _GRID_CACHE:
        _GRID_CACHE[key] = MinTimeGrid(dq=grid_resolution, dt=dt)
    return _GRID_CACHE[key].query(x0)


# ---------------------------------------------------------------------------
# Behavior-cloning dataset.
# ---------------------------------------------------------------------------

@dataclass
class BCDataset:
    """3N labeled states: N per control class, plus N origin copies for u=0.

    ``inputs`` has shape (3N, 2); ``labels`` holds class indices with the
    encoding +1 -> 0, 0 -> 1, -1 -> 2.
    """

    inputs: np.ndarray
    labels: np.ndarray
    n_per_class: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels misaligned")


def generate_bc_dataset(n: int, radius: float, seed: int) -> BCDataset:
    """Draw states uniformly in the radius ball and label them by the expert.

    Rejection sampling keeps drawing until n samples each of the +1 and -1
    classes are collected (the origin is the only u=0 state, so it never
    appears among the draws); n exact-origin copies are then appended with
    label 0 to balance the classes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = RngStream(seed)
    plus: list[np.ndarray] = []
    minus: list[np.ndarray] = []
    while len(plus) < n or len(minus) < n:
        batch = sample_in_ball(rng, radius, 2, n=4096)
        for row in batch:
            u = optimal_control(State2(row[0], row[1]))
            if u == 1 and len(plus) < n:
                plus.append(row)
            elif u == -1 and len(minus) < n:
                minus.append(row)
    inputs = np.concatenate(
        [np.asarray(plus), np.zeros((n, 2)), np.asarray(minus)], axis=0
    )
    labels = np.concatenate(
        [np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64), np.full(n, 2, dtype=np.int64)]
    )
    return BCDataset(inputs, labels, n)
