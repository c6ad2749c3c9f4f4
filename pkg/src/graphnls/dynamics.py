"""Time integration of the focusing NLS flow on a discretized graph.

Scheme: Crank-Nicolson with fixed-point relaxation on the nonlinearity,

    (W + i dt/2 A) u+ = (W - i dt/2 A) u- + i dt W N((u+ + u-)/2),

with N(w) = |w|^(p-2) w evaluated nodewise.  A is the symmetric form matrix
of the Kirchhoff operator and W the lumped quadrature weights, so the
converged step conserves the discrete mass u*Wu exactly and the scheme is
time-reversible (second order).  The complex-symmetric left-hand matrix is
factorized once per (operator, dt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .discretization import DiscreteOperator, GraphFunction, GridError
from . import observables as obs


class NonlinearSolveError(RuntimeError):
    """Fixed-point relaxation did not converge; the time step is too large."""


class MassDriftError(RuntimeError):
    """Relative mass drift exceeded the run guard."""

    def __init__(self, message: str, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class Integrator:
    """Crank-Nicolson parameters.

    ``nl_tol`` bounds the L2 norm of the relaxation residual; ``nonlinear``
    switches the focusing term off for linear-propagator checks.
    """

    dt: float
    p: float
    nl_tol: float = 1e-10
    max_nl_iter: int = 50
    nonlinear: bool = True

    def __post_init__(self):
        if self.dt == 0:
            raise ValueError("dt must be nonzero")
        if self.nl_tol <= 0:
            raise ValueError("nonlinear tolerance must be positive")


class CrankNicolson:
    """Prefactorized stepper for one (operator, integrator) pair."""

    def __init__(self, operator: DiscreteOperator, integrator: Integrator):
        self.operator = operator
        self.integrator = integrator
        W = diags(operator.weights)
        lam = 0.5 * integrator.dt
        self._minus = (W - 1j * lam * operator.form_matrix).tocsr()
        self._solve = splu((W + 1j * lam * operator.form_matrix).tocsc()).solve
        self._w = operator.weights
        self._dirichlet = operator.grid.dirichlet

    def _nonlinearity(self, w: np.ndarray) -> np.ndarray:
        if not self.integrator.nonlinear:
            return np.zeros_like(w)
        return np.abs(w) ** (self.integrator.p - 2.0) * w

    def step(self, values: np.ndarray) -> np.ndarray:
        it = self.integrator
        rhs_linear = self._minus @ values
        if not it.nonlinear:
            out = self._solve(rhs_linear)
            out[self._dirichlet] = 0.0
            return out
        u_new = values
        for _ in range(it.max_nl_iter):
            mid = 0.5 * (values + u_new)
            rhs = rhs_linear + 1j * it.dt * self._w * self._nonlinearity(mid)
            u_next = self._solve(rhs)
            u_next[self._dirichlet] = 0.0
            residual = math.sqrt(float(np.sum(self._w * np.abs(u_next - u_new) ** 2)))
            u_new = u_next
            if residual < it.nl_tol:
                return u_new
        raise NonlinearSolveError(
            f"relaxation stalled above {it.nl_tol} after {it.max_nl_iter} iterations; "
            "reduce dt"
        )


def step(
    u: GraphFunction, integrator: Integrator, operator: DiscreteOperator
) -> GraphFunction:
    """Single Crank-Nicolson step (one-off; evolve() reuses the factorization)."""
    if operator.grid is not u.grid:
        raise GridError("state and operator live on different grids")
    stepper = CrankNicolson(operator, integrator)
    return GraphFunction(u.grid, stepper.step(u.values))


@dataclass
class Trajectory:
    """Recorded observables, decimated snapshots, and per-edge amplitude maxima."""

    times: np.ndarray
    data: dict[str, np.ndarray]
    snapshots: list[tuple[float, GraphFunction]]
    edge_ids: tuple[str, ...]
    edge_max_abs2: np.ndarray  # shape (len(times), n_edges)

    def observable(self, name: str) -> np.ndarray:
        return self.data[name]


def evolve(
    u0: GraphFunction,
    t_end: float,
    integrator: Integrator,
    operator: DiscreteOperator,
    record_every: int = 1,
    snapshot_times: Sequence[float] = (),
    observers: Mapping[str, Callable[[GraphFunction], float]] | None = None,
    mass_guard: float = 1e-2,
) -> Trajectory:
    """Iterate the stepper up to t_end, recording observables along the way.

    Mass, energy, kinetic and momentum are always recorded every
    ``record_every`` steps (plus the initial and final states); extra
    ``observers`` are called on the same cadence.  Snapshots are taken at the
    requested times (matched to the nearest step).  The run aborts with
    MassDriftError if the relative mass drift exceeds ``mass_guard``.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if operator.grid is not u0.grid:
        raise GridError("state and operator live on different grids")
    dt = integrator.dt
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end {t_end} is not an integer number of steps of dt {dt}")
    stepper = CrankNicolson(operator, integrator)
    observers = dict(observers or {})
    snap_steps = {int(round(ts / dt)): ts for ts in snapshot_times}
    edge_ids = tuple(e.id for e in u0.grid.graph.edges)

    times: list[float] = []
    records: dict[str, list[float]] = {
        "mass": [], "energy": [], "kinetic": [], "momentum": [],
    }
    for name in observers:
        records[name] = []
    edge_max: list[list[float]] = []
    snapshots: list[tuple[float, GraphFunction]] = []

    u = u0.copy()
    m0 = obs.mass(u)

    def record(t: float, u: GraphFunction) -> float:
        m = obs.mass(u)
        times.append(t)
        records["mass"].append(m)
        records["energy"].append(obs.energy(u, operator, integrator.p))
        records["kinetic"].append(obs.kinetic(u))
        records["momentum"].append(obs.momentum(u))
        for name, fn in observers.items():
            records[name].append(float(fn(u)))
        edge_max.append(
            [float(np.max(np.abs(u.edge_values(eid)) ** 2)) for eid in edge_ids]
        )
        return m

    def build(partial: bool) -> Trajectory:
        return Trajectory(
            times=np.asarray(times),
            data={k: np.asarray(v) for k, v in records.items()},
            snapshots=snapshots,
            edge_ids=edge_ids,
            edge_max_abs2=np.asarray(edge_max),
        )

    record(0.0, u)
    if 0 in snap_steps:
        snapshots.append((snap_steps[0], u.copy()))
    for k in range(1, n_steps + 1):
        u = GraphFunction(u.grid, stepper.step(u.values))
        t = k * dt
        if k % record_every == 0 or k == n_steps:
            m = record(t, u)
            if m0 > 0 and abs(m - m0) / m0 > mass_guard:
                raise MassDriftError(
                    f"relative mass drift {abs(m - m0) / m0:.3e} exceeded guard "
                    f"{mass_guard:.1e} at t = {t:g}",
                    trajectory=build(partial=True),
                )
        if k in snap_steps:
            snapshots.append((snap_steps[k], u.copy()))
    return build(partial=False)


def detect_collision_time(traj: Trajectory) -> float:
    """Time of maximal kinetic energy (earliest record on ties)."""
    kin = traj.data.get("kinetic")
    if kin is None or len(kin) == 0:
        raise ValueError("trajectory has no kinetic-energy series")
    return float(traj.times[int(np.argmax(kin))])


def export_observables(traj: Trajectory, path) -> None:
    """Observable series as CSV; absent optional observers leave empty fields."""
    optional = ("F", "orbital_distance", "orbital_c", "orbital_theta")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,mass,energy,kinetic,momentum,F,orbital_distance,orbital_c,orbital_theta\n")
        for i, t in enumerate(traj.times):
            row = [repr(float(t))]
            for name in ("mass", "energy", "kinetic", "momentum"):
                row.append(repr(float(traj.data[name][i])))
            for name in optional:
                row.append(repr(float(traj.data[name][i])) if name in traj.data else "")
            fh.write(",".join(row) + "\n")
