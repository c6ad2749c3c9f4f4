"""Constrained energy minimization at fixed mass and variational diagnostics.

The minimizer is a semi-implicit normalized gradient flow (imaginary time):

    u  <-  (W + tau A)^-1 W (u + tau |u|^(p-2) u),   then rescale mass to mu.

Energy is non-increasing along accepted iterates; the pseudo-time step tau
halves on an energy increase and grows geometrically while steps keep
succeeding, which is what makes the exponentially flat escape regime on
truncated graphs tractable.

Diagnostics follow the concentration/runaway dichotomy: a flow whose mass
ends up in the far tail of a single half-line while the compact core empties
is classified Runaway; a flow that becomes stationary with most of its mass
near the core is Convergent; anything else is Undetermined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .discretization import (
    DiscreteOperator,
    GraphFunction,
    GraphGrid,
    GridError,
    assemble_kirchhoff,
    norm_h1,
    norm_lq,
)
from .graphs import GraphValidationError, MetricGraph, vertex_distance_matrix
from .states import bubble_tower_ground_state, bubble_tower_structure, phi_mu


class EnergyIncreaseError(RuntimeError):
    """Energy increased beyond round-off with tau already at its floor."""


class Classification(str, Enum):
    CONVERGENT = "Convergent"
    RUNAWAY = "Runaway"
    UNDETERMINED = "Undetermined"


@dataclass
class FlowConfig:
    """Normalized-gradient-flow controls and classification thresholds."""

    mu: float
    p: float
    tau0: float = 0.05
    tau_max: float = 200.0
    tau_growth: float = 1.25
    tau_min: float = 1e-9
    energy_tol: float = 1e-9           # relative energy decrease per step
    increment_tol: float = 1e-8        # H1 increment: stationary cutoff
    flat_patience: int = 50
    max_iter: int = 20000
    guess: str | GraphFunction = "gaussian"   # "gaussian" | "folded" | GraphFunction
    guess_width: float = 2.0
    noise_amp: float = 1e-2
    seed: int = 0
    core_radius: float = 2.0
    window: int = 50
    runaway_tail_frac: float = 0.05    # mass allowed outside the single escape tail
    runaway_linf: float = 1e-2
    convergent_core_frac: float = 0.5
    convergent_increment: float = 1e-4
    conc_stride: int = 0               # 0 disables concentration recording

    def __post_init__(self):
        if self.mu <= 0 or not (2.0 < self.p < 6.0):
            raise GraphValidationError("flow needs mu > 0 and p in (2, 6)")
        if min(self.tau0, self.tau_max, self.energy_tol, self.increment_tol) <= 0:
            raise GraphValidationError("flow tolerances and steps must be positive")
        if self.energy_tol >= 1:
            raise GraphValidationError("energy tolerance must be below 1")


@dataclass
class FlowOutcome:
    state: GraphFunction
    energy: float
    classification: Classification
    diagnostics: dict[str, np.ndarray]
    iterations: int
    reason: str


# ----------------------------------------------------------------------
# geometry helpers shared by diagnostics
# ----------------------------------------------------------------------


def node_core_distance(grid: GraphGrid) -> np.ndarray:
    """Distance of every unknown from the compact core (bounded edges + vertices)."""
    d = np.zeros(grid.size)
    for e in grid.graph.edges:
        if e.is_halfline:
            idx = grid.edge_index[e.id]
            d[idx[1:]] = grid.edge_x[e.id][1:]
    return d


def core_node_mask(grid: GraphGrid) -> np.ndarray:
    mask = np.zeros(grid.size, dtype=bool)
    mask[: len(grid.graph.vertices)] = True
    for e in grid.graph.bounded_edges:
        mask[grid.edge_index[e.id]] = True
    return mask


def reference_overlap_state(grid: GraphGrid, mu: float, p: float) -> GraphFunction:
    """Positive reference state for the overlap functional F.

    On a bubble tower this is the folded ground state; elsewhere (no ground
    state available) the soliton profile is draped over the graph by core
    distance, which keeps F a monotone escape indicator.
    """
    try:
        bubble_tower_structure(grid.graph)
    except GraphValidationError:
        d = node_core_distance(grid)
        return GraphFunction(grid, phi_mu(d, mu, p).astype(np.complex128))
    return bubble_tower_ground_state(grid, mu, p)


def functional_F(u: GraphFunction, Phi: GraphFunction) -> float:
    """Overlap F(u) = ∫ |u| Phi dx (Phi the positive reference state)."""
    if u.grid is not Phi.grid:
        raise GridError("overlap needs both functions on one grid")
    return float(np.sum(u.grid.weights * np.abs(u.values) * np.real(Phi.values)))


# ----------------------------------------------------------------------
# concentration function
# ----------------------------------------------------------------------


def concentration(u: GraphFunction, radius: float) -> float:
    """sup over grid-node centers of the mass in the metric ball B(center, radius)."""
    if radius < 0:
        raise GraphValidationError("radius must be >= 0")
    if radius == 0.0:
        return 0.0
    grid = u.grid
    graph = grid.graph
    index, dvv = vertex_distance_matrix(graph)
    dens = {e.id: np.abs(u.edge_values(e.id)) ** 2 for e in graph.edges}

    prefix: dict[str, tuple[np.ndarray, float, float]] = {}
    for e in graph.edges:
        g = dens[e.id]
        h = grid.edge_h[e.id]
        cum = np.concatenate(([0.0], np.cumsum(h * (g[:-1] + g[1:]) / 2.0)))
        prefix[e.id] = (cum, h, e.span)

    def pintegral(eid: str, y: np.ndarray) -> np.ndarray:
        cum, h, span = prefix[eid]
        g = dens[eid]
        y = np.clip(y, 0.0, span)
        k = np.clip((y // h).astype(int), 0, len(g) - 2)
        yl = y - k * h
        gk = g[k]
        slope = (g[k + 1] - gk) / h
        return cum[k] + gk * yl + 0.5 * slope * yl**2

    def seg(eid: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lo = np.minimum(a, b)
        return np.where(b > a, pintegral(eid, b) - pintegral(eid, np.minimum(a, b)), 0.0)

    best = 0.0
    for ec in graph.edges:
        xc = grid.edge_x[ec.id]
        # distances from each center on ec to the endpoints of every edge
        to_vertex = {}
        for v in graph.vertices:
            iv = index[v]
            cand = xc + dvv[index[ec.src], iv]
            if not ec.is_halfline:
                cand = np.minimum(cand, (ec.span - xc) + dvv[index[ec.dst], iv])
            to_vertex[v] = cand
        total = np.zeros_like(xc)
        for ef in graph.edges:
            span = ef.span
            alpha = radius - to_vertex[ef.src]                      # [0, alpha)
            if ef.is_halfline:
                beta = np.full_like(xc, np.inf)                     # no far-end entry
            else:
                beta = span - (radius - to_vertex[ef.dst])          # (beta, span]
            zeros = np.zeros_like(xc)
            spans = np.full_like(xc, span)
            s = seg(ef.id, zeros, np.minimum(alpha, spans))
            s += seg(ef.id, np.maximum(beta, zeros), spans)
            s -= seg(ef.id, np.maximum(beta, zeros), np.minimum(alpha, spans))
            if ef.id == ec.id:
                lo3 = xc - radius
                hi3 = xc + radius
                s += seg(ef.id, np.maximum(lo3, zeros), np.minimum(hi3, spans))
                s -= seg(ef.id, np.maximum(lo3, zeros), np.minimum(np.minimum(hi3, alpha), spans))
                s -= seg(ef.id, np.maximum(np.maximum(lo3, beta), zeros), np.minimum(hi3, spans))
                s += seg(
                    ef.id,
                    np.maximum(np.maximum(lo3, beta), zeros),
                    np.minimum(np.minimum(hi3, alpha), spans),
                )
            total += s
        best = max(best, float(np.max(total)))
    return best


# ----------------------------------------------------------------------
# the flow
# ----------------------------------------------------------------------


def _initial_guess(grid: GraphGrid, config: FlowConfig) -> np.ndarray:
    if isinstance(config.guess, GraphFunction):
        vals = config.guess.values.real.astype(float).copy()
    elif config.guess == "folded":
        vals = bubble_tower_ground_state(grid, config.mu, config.p).values.real.copy()
    elif config.guess == "gaussian":
        d = node_core_distance(grid)
        vals = np.exp(-(d**2) / (2.0 * config.guess_width**2))
        if config.noise_amp > 0:
            rng = np.random.default_rng(config.seed)
            vals *= 1.0 + config.noise_amp * rng.uniform(-1.0, 1.0, size=vals.shape)
    else:
        raise GraphValidationError(f"unknown initial guess {config.guess!r}")
    vals[grid.dirichlet] = 0.0
    m = float(np.sum(grid.weights * vals**2))
    if m <= 0:
        raise GraphValidationError("initial guess has zero mass")
    return vals * math.sqrt(config.mu / m)


def normalized_gradient_flow(
    graph: MetricGraph,
    grid: GraphGrid,
    p: float,
    config: FlowConfig,
    operator: DiscreteOperator | None = None,
) -> FlowOutcome:
    """Minimize the NLS energy at fixed mass by normalized imaginary-time flow."""
    if config.p != p:
        config = replace(config, p=p)
    op = operator if operator is not None else assemble_kirchhoff(graph, grid, graph.potential)
    W = grid.weights
    K = op.form_matrix
    mu = config.mu

    def flow_energy(vals: np.ndarray) -> float:
        return 0.5 * float(vals @ (K @ vals)) - float(np.sum(W * np.abs(vals) ** p)) / p

    u = _initial_guess(grid, config)
    energy = flow_energy(u)

    Phi = reference_overlap_state(grid, mu, p)
    phi_abs = np.abs(Phi.values.real)
    core_dist = node_core_distance(grid)
    core_mask = core_node_mask(grid)
    near_core = core_dist <= config.core_radius
    tail_masks = {
        e.id: (core_dist > config.core_radius)
        & np.isin(np.arange(grid.size), grid.edge_index[e.id])
        for e in graph.halflines
    }

    diag: dict[str, list[float]] = {
        k: []
        for k in (
            "energy", "mass", "F", "core_mass_fraction", "linf_core",
            "max_tail_fraction", "h1_increment", "com", "concentration",
        )
    }

    def push_diag(vals: np.ndarray, h1_inc: float, it: int) -> None:
        dens = W * vals**2
        m = float(np.sum(dens))
        diag["energy"].append(flow_energy(vals))
        diag["mass"].append(m)
        diag["F"].append(float(np.sum(W * np.abs(vals) * phi_abs)))
        diag["core_mass_fraction"].append(float(np.sum(dens[near_core])) / m)
        diag["linf_core"].append(float(np.max(np.abs(vals[core_mask]))))
        tails = [float(np.sum(dens[mask])) for mask in tail_masks.values()]
        diag["max_tail_fraction"].append(max(tails) / m if tails else 0.0)
        diag["h1_increment"].append(h1_inc)
        diag["com"].append(float(np.sum(dens * core_dist)) / m)
        if config.conc_stride > 0 and it % config.conc_stride == 0:
            diag["concentration"].append(
                concentration(GraphFunction(grid, vals.astype(np.complex128)), config.core_radius)
            )
        elif diag["concentration"]:
            diag["concentration"].append(diag["concentration"][-1])
        else:
            diag["concentration"].append(float("nan"))

    factors: dict[float, object] = {}

    def solver(tau: float):
        f = factors.get(tau)
        if f is None:
            if len(factors) > 64:
                factors.clear()
            f = splu((diags(W) + tau * K).tocsc())
            factors[tau] = f
        return f

    tau = config.tau0
    reason = "max_iterations"
    flat_run = 0
    stationary_run = 0
    it = 0
    push_diag(u, float("nan"), 0)
    while it < config.max_iter:
        it += 1
        rhs = W * (u + tau * np.abs(u) ** (p - 2.0) * u)
        u_new = solver(tau).solve(rhs)
        u_new[grid.dirichlet] = 0.0
        m_new = float(np.sum(W * u_new**2))
        u_new *= math.sqrt(mu / m_new)
        e_new = flow_energy(u_new)
        if e_new > energy + 1e-12 * (1.0 + abs(energy)):
            tau *= 0.5
            if tau < config.tau_min:
                raise EnergyIncreaseError(
                    f"energy increased beyond round-off at iterate {it} with tau at its floor"
                )
            it -= 1
            continue
        diff = GraphFunction(grid, (u_new - u).astype(np.complex128))
        h1_inc = norm_h1(diff)
        rel_dec = (energy - e_new) / (1.0 + abs(e_new))
        u, energy = u_new, e_new
        push_diag(u, h1_inc, it)
        tau = min(tau * config.tau_growth, config.tau_max)
        stationary_run = stationary_run + 1 if h1_inc < config.increment_tol else 0
        flat_run = flat_run + 1 if rel_dec < config.energy_tol else 0
        if it >= config.window:
            if stationary_run >= 10:
                reason = "stationary"
                break
            if flat_run >= config.flat_patience:
                reason = "flat"
                break

    diagnostics = {k: np.asarray(v) for k, v in diag.items()}
    state = GraphFunction(grid, u.astype(np.complex128))
    if reason == "max_iterations":
        classification = Classification.UNDETERMINED
    else:
        classification = classify(diagnostics, config)
    return FlowOutcome(
        state=state,
        energy=energy,
        classification=classification,
        diagnostics=diagnostics,
        iterations=it,
        reason=reason,
    )


def classify(diagnostics: dict[str, np.ndarray], config: FlowConfig) -> Classification:
    """Runaway / Convergent / Undetermined from the trailing diagnostic window."""
    n = len(diagnostics["energy"])
    w = config.window
    if w > n:
        raise GraphValidationError(f"window {w} longer than diagnostic series ({n})")
    tail = slice(n - w, n)
    escaped = np.all(1.0 - diagnostics["max_tail_fraction"][tail] < config.runaway_tail_frac)
    core_dark = diagnostics["linf_core"][-1] < config.runaway_linf
    if escaped and core_dark:
        return Classification.RUNAWAY
    incs = diagnostics["h1_increment"][-1]
    if (
        np.isfinite(incs)
        and incs < config.convergent_increment
        and diagnostics["core_mass_fraction"][-1] > config.convergent_core_frac
    ):
        return Classification.CONVERGENT
    return Classification.UNDETERMINED


# ----------------------------------------------------------------------
# critical-mass bisection
# ----------------------------------------------------------------------


@dataclass
class CriticalMassResult:
    mu_lo: float
    mu_hi: float
    evaluations: list[tuple[float, Classification]]
    converged: bool
    note: str = ""

    @property
    def estimate(self) -> float:
        return 0.5 * (self.mu_lo + self.mu_hi)


def critical_mass_search(
    graph: MetricGraph,
    grid: GraphGrid,
    p: float,
    bracket: tuple[float, float],
    config: FlowConfig,
    mu_tol: float,
    flow: Callable[[float], Classification] | None = None,
) -> CriticalMassResult:
    """Bisect the Runaway -> Convergent transition mass on a bracket.

    ``flow`` maps a mass to its flow classification (injectable for tests);
    by default it runs normalized_gradient_flow with ``config`` at that mass.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi):
        raise GraphValidationError(f"invalid bracket {bracket}")

    if flow is None:
        operator = assemble_kirchhoff(graph, grid, graph.potential)

        def flow(mu: float) -> Classification:
            cfg = replace(config, mu=mu)
            return normalized_gradient_flow(graph, grid, p, cfg, operator=operator).classification

    evaluations: list[tuple[float, Classification]] = []
    c_lo = flow(lo)
    evaluations.append((lo, c_lo))
    c_hi = flow(hi)
    evaluations.append((hi, c_hi))
    if c_lo != Classification.RUNAWAY or c_hi != Classification.CONVERGENT:
        raise GraphValidationError(
            f"bracket does not straddle the transition: flow({lo}) = {c_lo.value}, "
            f"flow({hi}) = {c_hi.value}"
        )
    note = ""
    while hi - lo > mu_tol:
        mid = 0.5 * (lo + hi)
        c_mid = flow(mid)
        evaluations.append((mid, c_mid))
        if c_mid == Classification.RUNAWAY:
            lo = mid
        elif c_mid == Classification.CONVERGENT:
            hi = mid
        else:
            note = f"bisection stopped: Undetermined outcome at mu = {mid}"
            return CriticalMassResult(lo, hi, evaluations, converged=False, note=note)
    return CriticalMassResult(lo, hi, evaluations, converged=True, note=note)
