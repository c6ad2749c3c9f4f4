"""Closed-form reference states: line solitons, cutoff data, folded ground states.

The frequency-1 profile is

    phi_1(x) = (p/2)^(1/(p-2)) sech^(2/(p-2)) ((p-2) x / 2),

the unique positive even solution of -phi'' + phi = phi^(p-1).  The family is
generated by the scaling phi_omega(x) = omega^(1/(p-2)) phi_1(sqrt(omega) x),
whose mass is M(phi_omega) = omega^((6-p)/(2(p-2))) M(phi_1).  Prescribing the
mass mu therefore fixes omega; no profile constants are hard-coded, M(phi_1)
comes from adaptive quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .discretization import GraphFunction, GraphGrid
from .graphs import GraphValidationError, MetricGraph


@dataclass(frozen=True)
class SolitonParams:
    """Line-soliton datum parameters: e^(i theta) e^(-i v x / 2) phi_mu(x - x0).

    The phase gradient -v/2 makes the profile travel with velocity -v, i.e.
    towards the coordinate origin (the anchoring vertex on a half-line) when
    v > 0.
    """

    p: float
    mu: float
    x0: float = 0.0
    v: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not (2.0 < self.p < 6.0):
            raise GraphValidationError(f"nonlinearity power must lie in (2, 6), got {self.p}")
        if not (self.mu > 0):
            raise GraphValidationError(f"mass must be positive, got {self.mu}")


def _sech_power(y: np.ndarray, a: float) -> np.ndarray:
    """sech(y)^a evaluated without overflow for large |y|."""
    ay = np.abs(y)
    return np.exp(a * (math.log(2.0) - ay)) / (1.0 + np.exp(-2.0 * ay)) ** a


def phi1(x, p: float):
    """Frequency-1 soliton profile (positive, even)."""
    x = np.asarray(x, dtype=float)
    amp = (p / 2.0) ** (1.0 / (p - 2.0))
    return amp * _sech_power((p - 2.0) / 2.0 * x, 2.0 / (p - 2.0))


def phi1_derivative(x, p: float):
    x = np.asarray(x, dtype=float)
    y = (p - 2.0) / 2.0 * x
    amp = (p / 2.0) ** (1.0 / (p - 2.0))
    return -amp * _sech_power(y, 2.0 / (p - 2.0)) * np.tanh(y)


@lru_cache(maxsize=None)
def phi1_mass(p: float) -> float:
    """M(phi_1) by adaptive quadrature (evenness halves the domain)."""
    val, _ = quad(lambda x: phi1(x, p) ** 2, 0.0, np.inf)
    return 2.0 * val


def omega_for_mass(mu: float, p: float) -> float:
    """Frequency omega with M(phi_omega) = mu."""
    return (mu / phi1_mass(p)) ** (2.0 * (p - 2.0) / (6.0 - p))


def mass_for_omega(omega: float, p: float) -> float:
    return omega ** ((6.0 - p) / (2.0 * (p - 2.0))) * phi1_mass(p)


def phi_mu(x, mu: float, p: float):
    """Positive even line ground state at mass mu."""
    omega = omega_for_mass(mu, p)
    return omega ** (1.0 / (p - 2.0)) * phi1(math.sqrt(omega) * np.asarray(x, dtype=float), p)


def phi_mu_derivative(x, mu: float, p: float):
    omega = omega_for_mass(mu, p)
    return omega ** (1.0 / (p - 2.0) + 0.5) * phi1_derivative(
        math.sqrt(omega) * np.asarray(x, dtype=float), p
    )


def line_soliton_energy(mu: float, p: float) -> float:
    """E(phi_mu, R) = 1/2 ||phi'||^2 - 1/p ||phi||_p^p by adaptive quadrature.

    This is the independent reference value used by flow and folded-state
    checks; it never touches the grid quadrature path.
    """
    kin, _ = quad(lambda x: phi_mu(x, mu, p) ** 2 * 0 + phi_mu_derivative(x, mu, p) ** 2, 0.0, np.inf)
    pot, _ = quad(lambda x: phi_mu(x, mu, p) ** p, 0.0, np.inf)
    return 0.5 * (2.0 * kin) - (2.0 * pot) / p


def soliton_profile(params: SolitonParams) -> Callable[[np.ndarray], np.ndarray]:
    """Complex moving-soliton profile on the line."""

    def profile(x):
        x = np.asarray(x, dtype=float)
        phase = params.theta - 0.5 * params.v * x
        return np.exp(1j * phase) * phi_mu(x - params.x0, params.mu, params.p)

    return profile


# ----------------------------------------------------------------------
# cutoff
# ----------------------------------------------------------------------


def _ramp(t: np.ndarray) -> np.ndarray:
    # exp(-1/t) for t > 0, 0 otherwise; smooth at t = 0
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def cutoff_chi(x) -> np.ndarray:
    """Smooth monotone ramp: 0 on (0,1), 1 on (2,inf), symmetric about 1.5."""
    x = np.asarray(x, dtype=float)
    a = _ramp(x - 1.0)
    b = _ramp(2.0 - x)
    return a / (a + b)


# ----------------------------------------------------------------------
# graph data
# ----------------------------------------------------------------------


def slow_soliton_datum(
    grid: GraphGrid, halfline: str, params: SolitonParams
) -> GraphFunction:
    """Approximate soliton on one half-line, cut off smoothly at the vertex.

    On the chosen half-line the datum is e^(i theta) e^(-i v x/2) chi(x)
    phi_mu(x - x0); it vanishes identically on every other edge, so the
    shared vertex value is zero and the datum is continuous on the graph.
    """
    e = grid.graph.edge(halfline)
    if not e.is_halfline:
        raise GraphValidationError(f"edge {halfline!r} is not a half-line")
    if not (0.0 < params.x0 < e.span):
        raise GraphValidationError(
            f"soliton center {params.x0} outside the truncated half-line (0, {e.span})"
        )
    profile = soliton_profile(params)
    vals = np.zeros(grid.size, dtype=np.complex128)
    x = grid.edge_x[halfline]
    vals[grid.edge_index[halfline]] = cutoff_chi(x) * profile(x)
    vals[grid.vertex_index[e.src]] = 0.0
    return GraphFunction(grid, vals)


@dataclass(frozen=True)
class BubbleTower:
    """Recognized bubble-tower structure: chain vertices top to bottom."""

    chain: tuple[str, ...]                 # v_top, ..., v_bottom
    bubble_edges: tuple[tuple[str, str], ...]  # per bubble, the two edge ids
    perimeters: tuple[float, ...]
    halflines: tuple[str, str]


def bubble_tower_structure(graph: MetricGraph) -> BubbleTower:
    """Detect the bubble-tower layout of a graph, or raise."""
    hls = graph.halflines
    if len(hls) != 2 or hls[0].src != hls[1].src:
        raise GraphValidationError("bubble tower needs exactly two half-lines at one vertex")
    bottom = hls[0].src
    # pair up bounded edges by their endpoint sets
    pairs: dict[frozenset, list] = {}
    for e in graph.bounded_edges:
        pairs.setdefault(frozenset((e.src, e.dst)), []).append(e)
    for key, es in pairs.items():
        if len(es) != 2 or abs(es[0].length - es[1].length) > 1e-12:
            raise GraphValidationError("each bubble needs two edges of equal length")
    # walk the chain from the bottom vertex upward
    chain = [bottom]
    bubble_edges: list[tuple[str, str]] = []
    perimeters: list[float] = []
    seen = {bottom}
    cur = bottom
    while True:
        nxt = [key for key in pairs if cur in key and not (key <= seen)]
        if not nxt:
            break
        if len(nxt) > 1:
            raise GraphValidationError("bubble chain branches; not a tower")
        key = nxt[0]
        other = next(iter(key - {cur}))
        es = pairs.pop(key)
        bubble_edges.append((es[0].id, es[1].id))
        perimeters.append(2.0 * es[0].length)
        chain.append(other)
        seen.add(other)
        cur = other
    if pairs:
        raise GraphValidationError("extra bounded edges outside the bubble chain")
    if len(chain) < 2:
        raise GraphValidationError("no bubbles found")
    chain.reverse()          # top first
    bubble_edges.reverse()
    perimeters.reverse()
    return BubbleTower(
        chain=tuple(chain),
        bubble_edges=tuple(bubble_edges),
        perimeters=tuple(perimeters),
        halflines=(hls[0].id, hls[1].id),
    )


def bubble_tower_ground_state(
    grid: GraphGrid, mu: float, p: float, renormalize: bool = False
) -> GraphFunction:
    """Fold the line soliton phi_mu onto a bubble-tower graph.

    The maximum sits at the apex of the top bubble (arc distance
    perimeter/2 from the lower vertex of that bubble); nested symmetric arc
    intervals of the even profile wrap the successive bubbles and the tails
    run down the two half-lines.  The result is continuous, positive and
    satisfies the Kirchhoff flux balance at every vertex analytically.

    Truncation removes the tail mass beyond the half-line ends; with
    ``renormalize`` the amplitude is rescaled so the discrete mass is exactly
    mu (by default the loss is reported by the caller, not hidden).
    """
    tower = bubble_tower_structure(grid.graph)
    if any(b >= a for a, b in zip(tower.perimeters[1:], tower.perimeters[:-1])):
        raise GraphValidationError(
            "folded ground state requires perimeters strictly increasing from top to bottom"
        )
    # arc offset of each chain vertex from the soliton maximum
    offsets = np.concatenate(([0.0], np.cumsum(np.asarray(tower.perimeters) / 2.0)))
    offset_of = dict(zip(tower.chain, offsets))
    vals = np.zeros(grid.size, dtype=np.complex128)
    for e in grid.graph.edges:
        x = grid.edge_x[e.id]
        if e.is_halfline:
            s = offset_of[e.src] + x
        else:
            # orient from the chain vertex closer to the top
            if offset_of[e.src] <= offset_of[e.dst]:
                s = offset_of[e.src] + x
            else:
                s = offset_of[e.dst] + (e.span - x)
        vals[grid.edge_index[e.id]] = phi_mu(s, mu, p)
    out = GraphFunction(grid, vals)
    if renormalize:
        m = float(np.sum(grid.weights * np.abs(out.values) ** 2))
        out.values *= math.sqrt(mu / m)
    return out
