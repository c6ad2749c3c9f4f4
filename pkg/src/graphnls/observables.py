"""Physical functionals of a state: mass, energy, kinetic, momentum, orbital fit.

Sign conventions: every edge is integrated along its stored orientation
(x = 0 at the origin vertex), and half-lines point outward from their
vertex.  On a fixed graph only the magnitude of the momentum and its sign
changes are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .discretization import (
    DiscreteOperator,
    GraphFunction,
    GridError,
    derivative_form,
    norm_lq,
)
from .states import phi_mu


def mass(u: GraphFunction) -> float:
    """M(u) = ||u||_2^2 (same quadrature path as norm_lq)."""
    return norm_lq(u, 2) ** 2


def kinetic(u: GraphFunction) -> float:
    """K(u) = 1/2 ||u'||_2^2 with the discrete derivative form."""
    return 0.5 * derivative_form(u)


def energy(u: GraphFunction, operator: DiscreteOperator, p: float) -> float:
    """E(u) = 1/2 u*Au - 1/p ||u||_p^p.

    The quadratic part includes the potential / delta contributions carried
    by the operator, matching the conserved energy of the evolution.
    """
    if operator.grid is not u.grid:
        raise GridError("operator assembled on a different grid")
    return 0.5 * operator.quadratic_form(u.values) - norm_lq(u, p) ** p / p


def momentum(u: GraphFunction) -> float:
    """p(u) = Im ∫ u' conj(u) dx, midpoint rule cell by cell."""
    g = u.grid
    du = u.values[g.cell_j] - u.values[g.cell_i]
    um = 0.5 * (u.values[g.cell_i] + u.values[g.cell_j])
    return float(np.sum(np.imag(du * np.conj(um))))


@dataclass
class OrbitalFit:
    """Best fit of e^(i theta) phi_mu(. - c) to the state on a half-line."""

    distance: float
    theta: float
    c: float
    core_h1: float | None = None


@dataclass
class ObservableRecord:
    time: float
    mass: float
    energy: float
    kinetic: float
    momentum: float
    F: float | None = None
    orbital: OrbitalFit | None = None


class _HalflineH1:
    """H^1 geometry of a single half-line restriction, reused across c-scans."""

    def __init__(self, u: GraphFunction, halfline: str):
        e = u.grid.graph.edge(halfline)
        if not e.is_halfline:
            raise GridError(f"edge {halfline!r} is not a half-line")
        self.x = u.grid.edge_x[halfline]
        self.h = u.grid.edge_h[halfline]
        self.span = e.span
        self.u = u.edge_values(halfline)
        self.du = np.diff(self.u) / self.h

    def _fields(self, w: np.ndarray):
        dw = np.diff(w) / self.h
        return dw

    def inner(self, w: np.ndarray, dw: np.ndarray) -> complex:
        """H^1 inner product <u, w>; w real."""
        l2 = _trapz_weights(len(self.x), self.h)
        val = np.sum(l2 * self.u * w)
        val += np.sum(self.h * self.du * dw)
        return complex(val)

    def sq_norm(self, w: np.ndarray, dw: np.ndarray) -> float:
        l2 = _trapz_weights(len(self.x), self.h)
        return float(np.sum(l2 * np.abs(w) ** 2) + np.sum(self.h * np.abs(dw) ** 2))

    def distance_at(self, c: float, mu: float, p: float) -> tuple[float, float]:
        """min over theta of ||u - e^(i theta) phi_mu(.-c)||_{H^1}, with argmin."""
        w = phi_mu(self.x - c, mu, p)
        w[-1] = 0.0  # reference truncated identically to the state space
        dw = self._fields(w)
        ip = self.inner(w, dw)
        uu = self.sq_norm(self.u, self.du)
        ww = self.sq_norm(w, dw)
        theta = math.atan2(ip.imag, ip.real)
        d2 = max(uu + ww - 2.0 * abs(ip), 0.0)
        return math.sqrt(d2), theta


def _trapz_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


def orbital_distance(
    u: GraphFunction,
    halfline: str,
    mu: float,
    p: float,
    exclusion: float = 0.0,
    coarse_step: float | None = None,
    refine_tol: float = 1e-6,
) -> OrbitalFit:
    """Distance to the rephased/translated soliton family on a half-line.

    The phase infimum is eliminated in closed form (theta* is the argument
    of the H^1 inner product against the real shifted profile); the shift c
    is located by a coarse scan over (exclusion, truncation) followed by
    golden-section refinement.  Flat stretches tie-break to the leftmost c.
    """
    geom = _HalflineH1(u, halfline)
    if exclusion >= geom.span:
        raise GridError("exclusion distance leaves no admissible shifts")
    step = coarse_step if coarse_step is not None else max(geom.span / 200.0, geom.h)
    cs = np.arange(exclusion, geom.span + step / 2, step)
    vals = np.array([geom.distance_at(c, mu, p)[0] for c in cs])
    k = int(np.argmin(vals))  # argmin returns the first (leftmost) minimum
    lo = cs[max(k - 1, 0)]
    hi = cs[min(k + 1, len(cs) - 1)]
    c_star = _golden_min(lambda c: geom.distance_at(c, mu, p)[0], lo, hi, refine_tol)
    d_ref, theta_ref = geom.distance_at(c_star, mu, p)
    if vals[k] < d_ref:  # never leave the coarse minimum behind
        c_star = float(cs[k])
        d_ref, theta_ref = geom.distance_at(c_star, mu, p)
    return OrbitalFit(distance=d_ref, theta=theta_ref % (2 * math.pi), c=float(c_star))


def _golden_min(f, a: float, b: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc <= fd:  # prefer the left interval on ties
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def core_h1_norm(u: GraphFunction, excluded_halfline: str) -> float:
    """H^1 norm of the state restricted to everything but one half-line.

    Companion quantity for assembling the full confinement functional
    (core norm + orbital distance on the carrying half-line).
    """
    g = u.grid
    keep = np.zeros(g.size, dtype=bool)
    for e in g.graph.edges:
        if e.id != excluded_halfline:
            keep[g.edge_index[e.id]] = True
    # l2 part with weights restricted to the kept edges
    w = np.zeros(g.size)
    for e in g.graph.edges:
        if e.id == excluded_halfline:
            continue
        idx = g.edge_index[e.id]
        he = g.edge_h[e.id]
        np.add.at(w, idx[:-1], he / 2)
        np.add.at(w, idx[1:], he / 2)
    l2 = float(np.sum(w * np.abs(u.values) ** 2))
    d2 = 0.0
    for e in g.graph.edges:
        if e.id == excluded_halfline:
            continue
        idx = g.edge_index[e.id]
        he = g.edge_h[e.id]
        du = np.diff(u.values[idx]) / he
        d2 += float(np.sum(he * np.abs(du) ** 2))
    return math.sqrt(l2 + d2)
